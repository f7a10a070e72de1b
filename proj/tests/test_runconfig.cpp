#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefalign/runconfig.hpp"
#include "prefalign/rundir.hpp"

using namespace prefalign;
namespace fs = std::filesystem;

namespace {

RunConfig from_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
    return config_from_text(text, overrides, "<test>");
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("prefalign_cfg_" + tag + "_" +
                                            std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("empty text yields pure defaults") {
    RunConfig c = from_text("");
    CHECK(c.data.seed == 1);
    CHECK(c.data.n == 600);
    CHECK(c.data.ratio == doctest::Approx(0.7));
    CHECK(c.model.n_layers == 2);
    CHECK(c.model.d_model == 64);
    CHECK(c.sft.epochs == 4);
    CHECK(c.sft.setting == "TEXT_IMAGE_CAPTION");
    CHECK(c.preference.k == 5);
    CHECK(c.preference.ranker == "oracle");
    CHECK(c.preference.n_prompts == 100);
    CHECK(c.ppo.steps == 300);
    CHECK(c.ppo.clip_eps == doctest::Approx(0.2));
    CHECK(c.dpo.beta == doctest::Approx(0.1));
    CHECK(c.eval.settings == std::vector<std::string>{"TEXT_IMAGE", "TEXT_CAPTION",
                                                      "TEXT_IMAGE_CAPTION"});
    CHECK(c.eval.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(c.eval.alignment == "dpo");
}

TEST_CASE("file values override defaults without disturbing the rest") {
    RunConfig c = from_text(R"({"data": {"n": 50}, "ppo": {"steps": 12, "kl_beta": 0.05}})");
    CHECK(c.data.n == 50);
    CHECK(c.data.seed == 1);
    CHECK(c.ppo.steps == 12);
    CHECK(c.ppo.kl_beta == doctest::Approx(0.05));
    CHECK(c.ppo.lr == doctest::Approx(1e-5));
    CHECK(c.sft.epochs == 4);
}

TEST_CASE("unknown keys are rejected with their full path") {
    CHECK_THROWS_WITH_AS(from_text(R"({"sft": {"epoch": 2}})"),
                         doctest::Contains("sft"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(from_text(R"({"sftt": {}})"), doctest::Contains("sftt"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(from_text(R"({"ppo": {"clip_epsilon": 0.1}})"),
                         doctest::Contains("clip_epsilon"), std::invalid_argument);
}

TEST_CASE("malformed json names the origin") {
    CHECK_THROWS_WITH_AS(from_text("{not json"), doctest::Contains("<test>"),
                         std::invalid_argument);
}

TEST_CASE("--set overrides beat file values") {
    RunConfig c = from_text(R"({"ppo": {"clip_eps": 0.3}})",
                            {"ppo.clip_eps=0.15", "sft.setting=TEXT_IMAGE",
                             "eval.seeds=[5,7]", "data.seed=42"});
    CHECK(c.ppo.clip_eps == doctest::Approx(0.15));
    CHECK(c.sft.setting == "TEXT_IMAGE");
    CHECK(c.eval.seeds == std::vector<std::uint64_t>{5, 7});
    CHECK(c.data.seed == 42);
}

TEST_CASE("bad --set specs are rejected") {
    CHECK_THROWS_WITH_AS(from_text("", {"ppo.steps"}), doctest::Contains("section.key=value"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(from_text("", {"ppo.stepz=3"}), doctest::Contains("stepz"),
                         std::invalid_argument);
}

TEST_CASE("validation names the offending key") {
    CHECK_THROWS_WITH_AS(from_text(R"({"data": {"ratio": 1.5}})"),
                         doctest::Contains("data.ratio"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(from_text("", {"model.lora_rank=-1"}),
                         doctest::Contains("lora_rank"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(from_text("", {"sft.setting=BOGUS"}),
                         doctest::Contains("sft.setting"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(from_text("", {"ppo.clip_eps=1.0"}),
                         doctest::Contains("ppo.clip_eps"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(from_text("", {"eval.alignment=grpo"}),
                         doctest::Contains("eval.alignment"), std::invalid_argument);
    // external ranker needs an endpoint; oracle does not
    CHECK_THROWS_WITH_AS(from_text("", {"preference.ranker=external"}),
                         doctest::Contains("preference.endpoint"), std::invalid_argument);
    CHECK_NOTHROW(from_text("", {"preference.ranker=external",
                                 "preference.endpoint=http://127.0.0.1:1/rank"}));
}

TEST_CASE("json round trip is lossless") {
    RunConfig c = from_text("", {"ppo.steps=7", "eval.settings=[\"TEXT_CAPTION\"]"});
    RunConfig back = RunConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(config_diff(c.to_json(), back.to_json()).empty());
}

TEST_CASE("config_diff lists differing key paths sorted") {
    RunConfig a = from_text("");
    RunConfig b = from_text("", {"ppo.steps=7", "data.n=10"});
    auto diff = config_diff(a.to_json(), b.to_json());
    REQUIRE(diff.size() == 2);
    CHECK(diff[0] == "data.n");
    CHECK(diff[1] == "ppo.steps");
}

TEST_CASE("load_config reports an unreadable path") {
    CHECK_THROWS_WITH_AS(load_config("/nonexistent/prefalign.json", {}),
                         doctest::Contains("cannot open"), std::runtime_error);
}

TEST_CASE("run dir snapshots its config and refuses a changed one") {
    TempDir tmp("snapshot");
    const std::string dir = (tmp.path / "run").string();
    RunConfig original = from_text("", {"ppo.steps=5"});
    { RunDir rd(dir, original); }
    CHECK_NOTHROW(RunDir(dir, original));  // identical config reopens fine

    RunConfig changed = from_text("", {"ppo.steps=6", "sft.epochs=2"});
    CHECK_THROWS_WITH_AS(RunDir(dir, changed), doctest::Contains("ppo.steps"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(RunDir(dir, changed), doctest::Contains("sft.epochs"),
                         std::runtime_error);
}
