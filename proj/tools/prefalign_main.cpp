#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prefalign/alignment.hpp"
#include "prefalign/evalharness.hpp"
#include "prefalign/preference.hpp"
#include "prefalign/runconfig.hpp"
#include "prefalign/rundir.hpp"
#include "prefalign/sft.hpp"
#include "prefalign/taskgen.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace prefalign;

namespace {

// A stage input that is not on disk yet; carries the subcommand that produces
// it so the fix is one command away.
struct MissingArtifact : std::runtime_error {
    MissingArtifact(std::string missing_path, std::string producer_cmd)
        : std::runtime_error("missing prerequisite '" + missing_path +
                             "'; produce it with the '" + producer_cmd + "' subcommand"),
          path(std::move(missing_path)),
          producer(std::move(producer_cmd)) {}
    std::string path;
    std::string producer;
};

std::string require_artifact(const std::string& path, const std::string& producer) {
    if (!fs::exists(path)) throw MissingArtifact(path, producer);
    return path;
}

struct CliArgs {
    std::string config_path;
    std::string run_dir = "runs/default";
    std::vector<std::string> overrides;
    int interrupt_after = -1;  // test hook; < 0 disables
};

RunConfig resolve_config(const CliArgs& args) {
    if (args.config_path.empty()) return config_from_text("", args.overrides, "<defaults>");
    return load_config(args.config_path, args.overrides);
}

// Completed-stage check shared by every subcommand: markers make reruns no-ops.
bool notice_if_done(const RunDir& rd, const std::string& marker, const std::string& verb) {
    if (!rd.stage_done(marker)) return false;
    std::cout << verb << " already complete in '" << rd.path() << "'; nothing to do\n";
    return true;
}

std::vector<McqSample> load_split(const RunDir& rd, const char* name) {
    return read_jsonl(require_artifact(rd.file(name), "gen-data"));
}

int cmd_gen_data(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "gen-data", "gen-data")) return 0;
    const RunConfig& config = rd.config();
    auto samples = generate_dataset(config.data.seed, config.data.n);
    auto split = split_dataset(samples, config.data.ratio, config.data.seed);
    write_jsonl(split.train, rd.file("train.jsonl"));
    write_jsonl(split.test, rd.file("test.jsonl"));
    rd.mark_done("gen-data");
    std::cout << "gen-data: " << split.train.size() << " train / " << split.test.size()
              << " test samples in '" << rd.path() << "'\n";
    return 0;
}

int cmd_sft(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "sft", "sft")) return 0;
    const RunConfig& config = rd.config();
    auto train = load_split(rd, "train.jsonl");

    PolicyModel model(config.model, config.sft.seed);
    SftOptions opts;
    opts.epochs = config.sft.epochs;
    opts.batch_size = config.sft.batch_size;
    opts.lr = config.sft.lr;
    opts.setting = parse_setting(config.sft.setting);
    opts.seed = config.sft.seed;
    opts.checkpoint_every = config.sft.checkpoint_every;
    opts.interrupt_after = args.interrupt_after;
    auto result = sft_train(model, train, opts, &rd);
    if (result.interrupted) {
        std::cout << "sft: interrupted after " << result.steps << " steps; rerun to resume\n";
        return 0;
    }
    std::cout << "sft: " << result.steps << " steps, final loss " << result.final_loss << "\n";
    return 0;
}

int cmd_gen_candidates(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "gen-candidates", "gen-candidates")) return 0;
    const RunConfig& config = rd.config();
    auto train = load_split(rd, "train.jsonl");

    CandidateGenConfig gen;
    gen.checkpoints = {require_artifact(rd.checkpoint("sft_final.mmrl"), "sft")};
    gen.setting = parse_setting(config.sft.setting);
    gen.temperature = config.preference.temperature;
    gen.top_k = config.preference.top_k;
    gen.max_new_tokens = config.preference.max_new_tokens;
    gen.seed = config.preference.seed;
    gen.workers = config.preference.concurrency;

    const auto n_prompts =
        std::min<std::size_t>(train.size(), static_cast<std::size_t>(config.preference.n_prompts));
    const std::vector<McqSample> prompts(train.begin(),
                                         train.begin() + static_cast<std::ptrdiff_t>(n_prompts));
    auto build = generate_candidates(gen, prompts, config.preference.k);
    write_candidates(build.sets, rd.file("candidates.jsonl"));
    rd.mark_done("gen-candidates");
    std::cout << "gen-candidates: " << build.sets.size() << " sets of " << config.preference.k
              << " candidates (" << build.dropped_samples << " samples dropped)\n";
    return 0;
}

int cmd_rank(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "rank", "rank")) return 0;
    const RunConfig& config = rd.config();
    auto sets = read_candidates(require_artifact(rd.file("candidates.jsonl"), "gen-candidates"));
    auto train = load_split(rd, "train.jsonl");

    std::map<std::string, const McqSample*> by_id;
    for (const auto& s : train) by_id[s.id] = &s;
    std::vector<const McqSample*> golds;
    for (const auto& set : sets) {
        auto it = by_id.find(set.sample_id);
        if (it == by_id.end()) {
            throw std::runtime_error("candidate sample '" + set.sample_id +
                                     "' is not in train.jsonl; regenerate the candidates");
        }
        golds.push_back(it->second);
    }

    std::vector<RankedSet> rows;
    if (config.preference.ranker == "oracle") {
        for (std::size_t i = 0; i < sets.size(); ++i) {
            rows.push_back({sets[i].sample_id, rank_oracle(sets[i], *golds[i])});
        }
    } else {
        ExternalRankerConfig ext;
        ext.endpoint = config.preference.endpoint;
        ext.retries = config.preference.retries;
        std::vector<McqSample> gold_samples;
        gold_samples.reserve(golds.size());
        for (const auto* g : golds) gold_samples.push_back(*g);
        RankerStats stats;
        auto rankings = rank_all_external(sets, gold_samples, ext, config.preference.concurrency,
                                          &stats);
        for (std::size_t i = 0; i < sets.size(); ++i) {
            rows.push_back({sets[i].sample_id, std::move(rankings[i])});
        }
        std::cout << "rank: external ranker made " << stats.requests << " requests, "
                  << stats.invalid_replies << " invalid replies, " << stats.downgrades
                  << " oracle downgrades\n";
    }
    write_rankings(rows, rd.file("rankings.jsonl"));
    rd.mark_done("rank");
    std::cout << "rank: ranked " << rows.size() << " candidate sets with "
              << config.preference.ranker << " ranker\n";
    return 0;
}

int cmd_make_pairs(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "make-pairs", "make-pairs")) return 0;
    auto sets = read_candidates(require_artifact(rd.file("candidates.jsonl"), "gen-candidates"));
    auto ranked = read_rankings(require_artifact(rd.file("rankings.jsonl"), "rank"));

    std::map<std::string, const Ranking*> by_id;
    for (const auto& row : ranked) by_id[row.sample_id] = &row.ranking;

    std::vector<PreferencePair> pairs;
    int dropped = 0;
    for (const auto& set : sets) {
        auto it = by_id.find(set.sample_id);
        if (it == by_id.end()) {
            throw std::runtime_error("no ranking for sample '" + set.sample_id +
                                     "'; rerun the rank subcommand");
        }
        PairBuild built = make_pairs(set, *it->second);
        dropped += built.dropped_duplicates;
        for (auto& pair : built.pairs) pairs.push_back(std::move(pair));
    }
    write_pairs(pairs, rd.file("pairs.jsonl"));
    rd.mark_done("make-pairs");
    std::cout << "make-pairs: " << pairs.size() << " preference pairs (" << dropped
              << " duplicates dropped)\n";
    return 0;
}

int cmd_train_rm(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "rm", "train-rm")) return 0;
    const RunConfig& config = rd.config();
    auto pairs = read_pairs(require_artifact(rd.file("pairs.jsonl"), "make-pairs"));
    auto sft_model =
        PolicyModel::load(require_artifact(rd.checkpoint("sft_final.mmrl"), "sft"));

    RewardModel rm = RewardModel::from_policy(sft_model);
    RewardTrainOptions opts;
    opts.epochs = config.reward.epochs;
    opts.batch_size = config.reward.batch_size;
    opts.lr = config.reward.lr;
    opts.seed = config.reward.seed;
    opts.interrupt_after = args.interrupt_after;
    auto result = train_reward(rm, pairs, opts, &rd);
    if (result.interrupted) {
        std::cout << "train-rm: interrupted after " << result.steps
                  << " steps; rerun to resume\n";
        return 0;
    }
    std::cout << "train-rm: " << result.steps << " steps, final loss " << result.final_loss
              << ", last epoch accuracy " << result.epoch_accuracies.back() << "\n";
    return 0;
}

int cmd_ppo(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "ppo", "ppo")) return 0;
    const RunConfig& config = rd.config();
    auto train = load_split(rd, "train.jsonl");
    const std::string sft_ckpt = require_artifact(rd.checkpoint("sft_final.mmrl"), "sft");
    RewardModel rm =
        RewardModel::load(require_artifact(rd.checkpoint("rm_final.mmrl"), "train-rm"));

    PolicyModel policy = PolicyModel::load(sft_ckpt);
    PolicyModel ref = PolicyModel::load(sft_ckpt);
    PpoOptions opts;
    opts.steps = config.ppo.steps;
    opts.lr = config.ppo.lr;
    opts.value_lr = config.ppo.value_lr;
    opts.clip_eps = config.ppo.clip_eps;
    opts.kl_beta = config.ppo.kl_beta;
    opts.gamma = config.ppo.gamma;
    opts.gae_lambda = config.ppo.gae_lambda;
    opts.ppo_epochs = config.ppo.ppo_epochs;
    opts.rollout_batch = config.ppo.rollout_batch;
    opts.minibatch = config.ppo.minibatch;
    opts.max_new_tokens = config.ppo.max_new_tokens;
    opts.entropy_coef = config.ppo.entropy_coef;
    opts.value_coef = config.ppo.value_coef;
    opts.setting = parse_setting(config.sft.setting);
    opts.seed = config.ppo.seed;
    opts.checkpoint_every = config.ppo.checkpoint_every;
    opts.interrupt_after = args.interrupt_after;

    PpoTrainer trainer(policy, ref, make_rm_scorer(rm), train, opts);
    auto result = trainer.run(&rd);
    if (result.interrupted) {
        std::cout << "ppo: interrupted after " << result.steps << " steps; rerun to resume\n";
        return 0;
    }
    std::cout << "ppo: " << result.steps << " steps";
    if (!result.mean_rewards.empty()) {
        std::cout << ", last mean reward " << result.mean_rewards.back() << ", last KL "
                  << result.kl_totals.back();
    }
    std::cout << "\n";
    return 0;
}

int cmd_dpo(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "dpo", "dpo")) return 0;
    const RunConfig& config = rd.config();
    auto pairs = read_pairs(require_artifact(rd.file("pairs.jsonl"), "make-pairs"));
    const std::string sft_ckpt = require_artifact(rd.checkpoint("sft_final.mmrl"), "sft");

    PolicyModel policy = PolicyModel::load(sft_ckpt);
    PolicyModel ref = PolicyModel::load(sft_ckpt);
    DpoOptions opts;
    opts.beta = config.dpo.beta;
    opts.lr = config.dpo.lr;
    opts.epochs = config.dpo.epochs;
    opts.batch_size = config.dpo.batch_size;
    opts.seed = config.dpo.seed;
    opts.checkpoint_every = config.dpo.checkpoint_every;
    opts.interrupt_after = args.interrupt_after;
    auto result = dpo_train(policy, ref, pairs, opts, &rd);
    if (result.interrupted) {
        std::cout << "dpo: interrupted after " << result.steps << " steps; rerun to resume\n";
        return 0;
    }
    std::cout << "dpo: " << result.steps << " steps, final loss " << result.final_loss << "\n";
    return 0;
}

int cmd_eval(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "eval", "eval")) return 0;
    const RunConfig& config = rd.config();
    auto test = read_jsonl(require_artifact(rd.file("test.jsonl"), "gen-data"));

    // Newest stage wins: an aligned policy when one exists, the sft model
    // otherwise.
    std::string checkpoint = "ppo_final.mmrl";
    bool aligned = true;
    if (!fs::exists(rd.checkpoint(checkpoint))) {
        checkpoint = "dpo_final.mmrl";
        if (!fs::exists(rd.checkpoint(checkpoint))) {
            checkpoint = "sft_final.mmrl";
            aligned = false;
            require_artifact(rd.checkpoint(checkpoint), "sft");
        }
    }
    PolicyModel model = PolicyModel::load(rd.checkpoint(checkpoint));
    const InputSetting setting = parse_setting(config.sft.setting);
    EvalResult result = evaluate(model, test, setting, config.eval.max_new_tokens);
    result.aligned = aligned;

    ordered_json doc;
    doc["setting"] = setting_name(setting);
    doc["aligned"] = aligned;
    doc["checkpoint"] = checkpoint;
    doc["n_total"] = result.n_total;
    doc["n_correct"] = result.n_correct;
    doc["n_parse_fail"] = result.n_parse_fail;
    doc["accuracy"] = result.accuracy;
    doc["records"] = ordered_json::array();
    for (const auto& rec : result.records) {
        ordered_json row;
        row["id"] = rec.id;
        row["predicted"] = rec.predicted ? ordered_json(std::string(1, *rec.predicted))
                                         : ordered_json(nullptr);
        row["gold"] = std::string(1, rec.gold);
        doc["records"].push_back(std::move(row));
    }
    {
        std::ofstream os(rd.file("eval.json"), std::ios::trunc);
        os << doc.dump(2) << "\n";
        if (!os) throw std::runtime_error("cannot write eval.json in '" + rd.path() + "'");
    }
    rd.mark_done("eval");
    std::cout << "eval: accuracy " << result.accuracy << " (" << result.n_correct << "/"
              << result.n_total << ", " << result.n_parse_fail << " parse failures) from "
              << checkpoint << "\n";
    return 0;
}

int cmd_ablate(const CliArgs& args) {
    RunDir rd(args.run_dir, resolve_config(args));
    if (notice_if_done(rd, "ablate", "ablate")) return 0;
    const RunConfig& config = rd.config();
    auto train = load_split(rd, "train.jsonl");
    auto test = read_jsonl(require_artifact(rd.file("test.jsonl"), "gen-data"));

    AblationOptions opts;
    opts.model = config.model;
    opts.settings.clear();
    for (const auto& name : config.eval.settings) opts.settings.push_back(parse_setting(name));
    opts.seeds = config.eval.seeds;
    opts.alignment = parse_align_mode(config.eval.alignment);
    opts.sft.epochs = config.sft.epochs;
    opts.sft.batch_size = config.sft.batch_size;
    opts.sft.lr = config.sft.lr;
    opts.sft.checkpoint_every = config.sft.checkpoint_every;
    opts.dpo.beta = config.dpo.beta;
    opts.dpo.lr = config.dpo.lr;
    opts.dpo.epochs = config.dpo.epochs;
    opts.dpo.batch_size = config.dpo.batch_size;
    opts.dpo.checkpoint_every = config.dpo.checkpoint_every;
    opts.ppo.steps = config.ppo.steps;
    opts.ppo.lr = config.ppo.lr;
    opts.ppo.value_lr = config.ppo.value_lr;
    opts.ppo.clip_eps = config.ppo.clip_eps;
    opts.ppo.kl_beta = config.ppo.kl_beta;
    opts.ppo.gamma = config.ppo.gamma;
    opts.ppo.gae_lambda = config.ppo.gae_lambda;
    opts.ppo.ppo_epochs = config.ppo.ppo_epochs;
    opts.ppo.rollout_batch = config.ppo.rollout_batch;
    opts.ppo.minibatch = config.ppo.minibatch;
    opts.ppo.max_new_tokens = config.ppo.max_new_tokens;
    opts.ppo.entropy_coef = config.ppo.entropy_coef;
    opts.ppo.value_coef = config.ppo.value_coef;
    opts.ppo.checkpoint_every = config.ppo.checkpoint_every;
    opts.pair_prompts = config.preference.n_prompts;
    opts.pair_k = config.preference.k;
    opts.pair_temperature = config.preference.temperature;
    opts.pair_top_k = config.preference.top_k;
    opts.pair_max_new_tokens = config.preference.max_new_tokens;
    opts.eval_max_new_tokens = config.eval.max_new_tokens;

    AblationReport report = run_ablation(train, test, rd.path(), opts);
    emit_report(report, rd.path());
    int failed = 0;
    for (const auto& cell : report.cells) failed += cell.failed ? 1 : 0;
    std::cout << "ablate: " << report.cells.size() << " cells, " << failed
              << " failed; report at '" << rd.file("report.json") << "'\n";
    if (failed > 0) {
        throw std::runtime_error(std::to_string(failed) +
                                 " grid cell(s) failed; see report.json for details");
    }
    rd.mark_done("ablate");
    return 0;
}

int fail_line(const std::string& verb, const std::string& message, int code,
              const std::string& missing = "", const std::string& producer = "") {
    ordered_json err;
    err["error"] = message;
    err["subcommand"] = verb;
    if (!missing.empty()) {
        err["missing"] = missing;
        err["producer"] = producer;
    }
    std::cerr << err.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale multimodal preference-alignment pipeline"};
    app.require_subcommand(1);

    CliArgs args;
    const std::vector<std::pair<std::string, std::string>> verbs = {
        {"gen-data", "Generate the synthetic MCQ dataset and its train/test split"},
        {"sft", "Supervised finetuning on the train split (rerun resumes)"},
        {"gen-candidates", "Sample K candidate answers per prompt from the sft checkpoint"},
        {"rank", "Rank candidate sets (oracle, or external via preference.endpoint and the "
                 "PREFALIGN_RANKER_KEY environment variable)"},
        {"make-pairs", "Turn rankings into best-vs-rest preference pairs"},
        {"train-rm", "Train the reward model on the preference pairs (rerun resumes)"},
        {"ppo", "PPO alignment against the reward model (rerun resumes)"},
        {"dpo", "DPO alignment on the preference pairs (rerun resumes)"},
        {"eval", "Score the latest checkpoint on the test split"},
        {"ablate", "Train and evaluate the settings x alignment grid"},
    };
    for (const auto& [name, help] : verbs) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", args.config_path,
                        "JSON config file; built-in defaults apply when omitted");
        sub->add_option("-r,--run-dir", args.run_dir, "Run directory (default runs/default)");
        sub->add_option("--set", args.overrides,
                        "Override one config key, e.g. --set ppo.steps=100 (repeatable)");
        sub->add_option("--interrupt-after", args.interrupt_after)->group("");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const std::string verb = app.get_subcommands().front()->get_name();
    try {
        if (verb == "gen-data") return cmd_gen_data(args);
        if (verb == "sft") return cmd_sft(args);
        if (verb == "gen-candidates") return cmd_gen_candidates(args);
        if (verb == "rank") return cmd_rank(args);
        if (verb == "make-pairs") return cmd_make_pairs(args);
        if (verb == "train-rm") return cmd_train_rm(args);
        if (verb == "ppo") return cmd_ppo(args);
        if (verb == "dpo") return cmd_dpo(args);
        if (verb == "eval") return cmd_eval(args);
        if (verb == "ablate") return cmd_ablate(args);
        return fail_line(verb, "unknown subcommand", 1);
    } catch (const MissingArtifact& e) {
        return fail_line(verb, e.what(), 2, e.path, e.producer);
    } catch (const std::exception& e) {
        return fail_line(verb, e.what(), 1);
    }
}
