#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Drives the installed binary exactly as a user would: argv in, exit code and
// captured streams out.
struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("prefalign_cli_" + tag + "_" +
                                            std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

CliResult run_cli(const TempDir& tmp, const std::vector<std::string>& args) {
    const fs::path out_file = tmp.path / "_stdout.txt";
    const fs::path err_file = tmp.path / "_stderr.txt";
    std::string cmd = PREFALIGN_CLI_PATH;
    for (const auto& arg : args) cmd += " '" + arg + "'";
    cmd += " >'" + out_file.string() + "' 2>'" + err_file.string() + "'";
    const int status = std::system(cmd.c_str());
    CliResult result;
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    result.out = slurp(out_file);
    result.err = slurp(err_file);
    return result;
}

// Micro config shared by every test: one tiny layer so full pipeline stages
// run in seconds.
std::vector<std::string> micro_opts(const fs::path& run_dir) {
    return {"-r", run_dir.string(),
            "--set", "data.n=40",
            "--set", "model.n_layers=1",
            "--set", "model.d_model=16",
            "--set", "model.n_heads=2",
            "--set", "model.d_ff=32",
            "--set", "model.image_prefix_len=2",
            "--set", "sft.epochs=1",
            "--set", "sft.lr=1e-3",
            "--set", "preference.k=2",
            "--set", "preference.n_prompts=6",
            "--set", "preference.max_new_tokens=6",
            "--set", "reward.epochs=1",
            "--set", "ppo.steps=2",
            "--set", "ppo.rollout_batch=2",
            "--set", "ppo.minibatch=1",
            "--set", "ppo.ppo_epochs=1",
            "--set", "ppo.max_new_tokens=4",
            "--set", "dpo.epochs=1",
            "--set", "eval.max_new_tokens=6"};
}

CliResult run_stage(const TempDir& tmp, const std::string& verb, const fs::path& run_dir,
                    const std::vector<std::string>& extra = {}) {
    std::vector<std::string> args = {verb};
    const auto opts = micro_opts(run_dir);
    args.insert(args.end(), opts.begin(), opts.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(tmp, args);
}

json last_error_line(const std::string& err) {
    std::istringstream is(err);
    std::string line;
    std::string last;
    while (std::getline(is, line)) {
        if (!line.empty()) last = line;
    }
    REQUIRE(!last.empty());
    return json::parse(last);
}

int count_lines(const fs::path& path) {
    std::ifstream is(path);
    int n = 0;
    std::string line;
    while (std::getline(is, line)) ++n;
    return n;
}

}  // namespace

TEST_CASE("cli requires a subcommand and documents them in --help") {
    TempDir tmp("help");
    CliResult bare = run_cli(tmp, {});
    CHECK(bare.exit_code != 0);

    CliResult help = run_cli(tmp, {"--help"});
    CHECK(help.exit_code == 0);
    for (const char* verb : {"gen-data", "sft", "gen-candidates", "rank", "make-pairs",
                             "train-rm", "ppo", "dpo", "eval", "ablate"}) {
        CHECK(help.out.find(verb) != std::string::npos);
    }

    CliResult unknown = run_cli(tmp, {"frobnicate"});
    CHECK(unknown.exit_code != 0);
}

TEST_CASE("gen-data writes both splits and reruns are no-ops") {
    TempDir tmp("gendata");
    const fs::path dir = tmp.path / "run";
    CliResult first = run_stage(tmp, "gen-data", dir);
    REQUIRE(first.exit_code == 0);
    CHECK(count_lines(dir / "train.jsonl") == 28);
    CHECK(count_lines(dir / "test.jsonl") == 12);

    CliResult again = run_stage(tmp, "gen-data", dir);
    CHECK(again.exit_code == 0);
    CHECK(again.out.find("already complete") != std::string::npos);
    CHECK(count_lines(dir / "train.jsonl") == 28);
}

TEST_CASE("missing prerequisites exit 2 with a machine-readable error") {
    TempDir tmp("prereq");
    const fs::path dir = tmp.path / "run";

    CliResult sft = run_stage(tmp, "sft", dir);
    CHECK(sft.exit_code == 2);
    json err = last_error_line(sft.err);
    CHECK(err.at("subcommand") == "sft");
    CHECK(err.at("producer") == "gen-data");
    CHECK(err.at("missing").get<std::string>().find("train.jsonl") != std::string::npos);
    CHECK(err.at("error").get<std::string>().find("gen-data") != std::string::npos);

    REQUIRE(run_stage(tmp, "gen-data", dir).exit_code == 0);
    CliResult ppo = run_stage(tmp, "ppo", dir);
    CHECK(ppo.exit_code == 2);
    CHECK(last_error_line(ppo.err).at("producer") == "sft");

    CliResult pairs = run_stage(tmp, "make-pairs", dir);
    CHECK(pairs.exit_code == 2);
    CHECK(last_error_line(pairs.err).at("producer") == "gen-candidates");
}

TEST_CASE("invalid configs exit 1 with a json error line") {
    TempDir tmp("badcfg");
    const fs::path dir = tmp.path / "run";

    CliResult bad = run_cli(tmp, {"gen-data", "-r", dir.string(), "--set", "data.ratio=1.5"});
    CHECK(bad.exit_code == 1);
    json err = last_error_line(bad.err);
    CHECK(err.at("subcommand") == "gen-data");
    CHECK(err.at("error").get<std::string>().find("data.ratio") != std::string::npos);
    CHECK(!err.contains("missing"));

    CliResult absent = run_cli(tmp, {"gen-data", "-c", "/nonexistent/prefalign.json"});
    CHECK(absent.exit_code == 1);
    CHECK(last_error_line(absent.err).at("error").get<std::string>().find("cannot open") !=
          std::string::npos);
}

TEST_CASE("full pipeline chain runs through the cli") {
    TempDir tmp("chain");
    const fs::path dir = tmp.path / "run";
    for (const char* verb : {"gen-data", "sft", "gen-candidates", "rank", "make-pairs",
                             "train-rm", "dpo"}) {
        CliResult r = run_stage(tmp, verb, dir);
        REQUIRE_MESSAGE(r.exit_code == 0, verb << " failed: " << r.err);
    }
    CHECK(fs::exists(dir / "candidates.jsonl"));
    CHECK(fs::exists(dir / "rankings.jsonl"));
    CHECK(fs::exists(dir / "pairs.jsonl"));
    CHECK(fs::exists(dir / "checkpoints" / "sft_final.mmrl"));
    CHECK(fs::exists(dir / "checkpoints" / "rm_final.mmrl"));
    CHECK(fs::exists(dir / "checkpoints" / "dpo_final.mmrl"));

    // rank reruns are no-ops once the marker exists
    CliResult again = run_stage(tmp, "rank", dir);
    CHECK(again.exit_code == 0);
    CHECK(again.out.find("already complete") != std::string::npos);

    // eval picks the most aligned checkpoint available (dpo here)
    CliResult ev = run_stage(tmp, "eval", dir);
    REQUIRE_MESSAGE(ev.exit_code == 0, ev.err);
    json doc = json::parse(slurp(dir / "eval.json"));
    CHECK(doc.at("checkpoint") == "dpo_final.mmrl");
    CHECK(doc.at("aligned") == true);
    CHECK(doc.at("n_total") == 12);
    CHECK(doc.at("records").size() == 12);
    const double acc = doc.at("accuracy").get<double>();
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(doc.at("n_correct").get<int>() + doc.at("n_parse_fail").get<int>() <= 12);

    // ppo also runs off the same run dir once the reward model exists
    CliResult ppo = run_stage(tmp, "ppo", dir);
    REQUIRE_MESSAGE(ppo.exit_code == 0, ppo.err);
    CHECK(fs::exists(dir / "checkpoints" / "ppo_final.mmrl"));

    // a changed config is refused instead of silently diverging the run dir
    CliResult drift = run_stage(tmp, "sft", dir, {"--set", "ppo.steps=9"});
    CHECK(drift.exit_code == 1);
    CHECK(last_error_line(drift.err).at("error").get<std::string>().find("ppo.steps") !=
          std::string::npos);
}

TEST_CASE("interrupted stages resume to bit-identical artifacts") {
    TempDir tmp("resume");
    const fs::path a = tmp.path / "a";
    const fs::path b = tmp.path / "b";
    REQUIRE(run_stage(tmp, "gen-data", a).exit_code == 0);
    REQUIRE(run_stage(tmp, "gen-data", b).exit_code == 0);

    CliResult cut = run_stage(tmp, "sft", a, {"--interrupt-after", "2"});
    REQUIRE(cut.exit_code == 0);
    CHECK(cut.out.find("interrupted") != std::string::npos);
    CHECK(!fs::exists(a / "checkpoints" / "sft_final.mmrl"));

    REQUIRE(run_stage(tmp, "sft", a).exit_code == 0);  // resumes
    REQUIRE(run_stage(tmp, "sft", b).exit_code == 0);  // straight through

    CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
    CHECK(slurp(a / "checkpoints" / "sft_final.mmrl") ==
          slurp(b / "checkpoints" / "sft_final.mmrl"));
}

TEST_CASE("ablate builds the grid report through the cli") {
    TempDir tmp("ablate");
    const fs::path dir = tmp.path / "run";
    const std::vector<std::string> grid = {"--set", "eval.settings=[\"TEXT_IMAGE\"]",
                                           "--set", "eval.seeds=[0]",
                                           "--set", "preference.n_prompts=4"};
    std::vector<std::string> gen_args = {"gen-data"};
    auto opts = micro_opts(dir);
    gen_args.insert(gen_args.end(), opts.begin(), opts.end());
    gen_args.insert(gen_args.end(), grid.begin(), grid.end());
    REQUIRE(run_cli(tmp, gen_args).exit_code == 0);

    std::vector<std::string> abl_args = {"ablate"};
    abl_args.insert(abl_args.end(), opts.begin(), opts.end());
    abl_args.insert(abl_args.end(), grid.begin(), grid.end());
    CliResult abl = run_cli(tmp, abl_args);
    REQUIRE_MESSAGE(abl.exit_code == 0, abl.err);

    json report = json::parse(slurp(dir / "report.json"));
    REQUIRE(report.at("cells").size() == 2);
    CHECK(report.at("cells")[0].at("aligned") == false);
    CHECK(report.at("cells")[1].at("aligned") == true);
    CHECK(report.at("references").size() == 9);
    CHECK(fs::exists(dir / "report.txt"));
    CHECK(fs::exists(dir / "text_image_sft_seed0" / "checkpoints" / "sft_final.mmrl"));

    CliResult again = run_cli(tmp, abl_args);
    CHECK(again.exit_code == 0);
    CHECK(again.out.find("already complete") != std::string::npos);
}
