#include "prefalign/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <tuple>

#include <json.hpp>

#include "prefalign/checkpoint.hpp"
#include "prefalign/preference.hpp"
#include "prefalign/rundir.hpp"

namespace prefalign {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

const std::regex& answer_marker() {
    static const std::regex re("\\banswer\\s*:\\s*([A-Da-d])(?![A-Za-z0-9])",
                               std::regex::icase | std::regex::optimize);
    return re;
}

}  // namespace

std::optional<char> extract_answer(const std::string& text) {
    std::smatch match;
    if (!std::regex_search(text, match, answer_marker())) return std::nullopt;
    return static_cast<char>(std::toupper(static_cast<unsigned char>(match[1].str()[0])));
}

std::string response_explanation(const std::string& text) {
    std::smatch match;
    if (!std::regex_search(text, match, answer_marker())) return text;
    std::size_t begin = static_cast<std::size_t>(match.position(0) + match.length(0));
    while (begin < text.size() &&
           (text[begin] == '.' || text[begin] == ')' || text[begin] == ',' ||
            std::isspace(static_cast<unsigned char>(text[begin])))) {
        begin += 1;
    }
    return text.substr(begin);
}

// ---- evaluation ----

EvalResult evaluate(const PolicyModel& model, const std::vector<McqSample>& samples,
                    InputSetting setting, int max_new_tokens, const ResponseGenerator& generator,
                    int workers) {
    if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
    if (max_new_tokens < 1) throw std::invalid_argument("evaluate: max_new_tokens must be >= 1");
    if (workers < 1) throw std::invalid_argument("evaluate: workers must be >= 1");

    ResponseGenerator respond = generator;
    if (!respond) {
        respond = [&model, max_new_tokens](const McqSample&, const BuiltPrompt& built) {
            const SamplingParams sampling{.temperature = 1.0, .top_k = 0, .greedy = true};
            Rng rng(0);  // greedy decoding never draws from it
            return model.generate(built.prompt_ids, built.image, sampling, rng, max_new_tokens)
                .text;
        };
    }

    EvalResult out;
    out.setting = setting;
    out.n_total = static_cast<int>(samples.size());
    out.records.resize(samples.size());

    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= samples.size()) return;
            try {
                const McqSample& sample = samples[i];
                const BuiltPrompt built = build_prompt(sample, model.vocab(), setting);
                const std::string text = respond(sample, built);
                SampleRecord& rec = out.records[i];
                rec.id = sample.id;
                rec.gold = sample.answer;
                rec.predicted = extract_answer(text);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };

    const int n_workers = std::clamp(workers, 1, static_cast<int>(samples.size()));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_workers));
        for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    for (const auto& rec : out.records) {
        if (!rec.predicted) {
            out.n_parse_fail += 1;
        } else if (*rec.predicted == rec.gold) {
            out.n_correct += 1;
        }
    }
    out.accuracy = static_cast<double>(out.n_correct) / static_cast<double>(out.n_total);
    return out;
}

// ---- ablation grid ----

AlignMode parse_align_mode(const std::string& name) {
    if (name == "none") return AlignMode::none;
    if (name == "ppo") return AlignMode::ppo;
    if (name == "dpo") return AlignMode::dpo;
    throw std::invalid_argument("unknown alignment mode '" + name +
                                "' (expected none, ppo, or dpo)");
}

std::string align_mode_name(AlignMode mode) {
    switch (mode) {
        case AlignMode::none: return "none";
        case AlignMode::ppo: return "ppo";
        case AlignMode::dpo: return "dpo";
    }
    throw std::invalid_argument("unknown alignment mode value");
}

namespace {

std::string lower_name(InputSetting setting) {
    std::string name = setting_name(setting);
    for (char& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return name;
}

std::string cell_dir_name(InputSetting setting, bool aligned, std::uint64_t seed) {
    return lower_name(setting) + (aligned ? "_aligned_seed" : "_sft_seed") + std::to_string(seed);
}

// The snapshot a cell's RunDir pins: every option that shaped this cell, so a
// rerun with drifted settings is refused instead of silently mixed in.
RunConfig cell_run_config(const AblationOptions& opts, std::size_t n_train, std::size_t n_test,
                          InputSetting setting, std::uint64_t seed) {
    RunConfig c;
    c.data.seed = 0;
    c.data.n = static_cast<int>(n_train + n_test);
    c.data.ratio = static_cast<double>(n_train) / static_cast<double>(n_train + n_test);

    c.model = opts.model;

    c.sft.epochs = opts.sft.epochs;
    c.sft.batch_size = opts.sft.batch_size;
    c.sft.lr = opts.sft.lr;
    c.sft.setting = setting_name(setting);
    c.sft.seed = seed;
    c.sft.checkpoint_every = opts.sft.checkpoint_every;

    c.preference.k = opts.pair_k;
    c.preference.ranker = "oracle";
    c.preference.n_prompts = opts.pair_prompts;
    c.preference.temperature = opts.pair_temperature;
    c.preference.top_k = opts.pair_top_k;
    c.preference.max_new_tokens = opts.pair_max_new_tokens;
    c.preference.seed = seed;

    c.ppo.steps = opts.ppo.steps;
    c.ppo.lr = opts.ppo.lr;
    c.ppo.value_lr = opts.ppo.value_lr;
    c.ppo.clip_eps = opts.ppo.clip_eps;
    c.ppo.kl_beta = opts.ppo.kl_beta;
    c.ppo.gamma = opts.ppo.gamma;
    c.ppo.gae_lambda = opts.ppo.gae_lambda;
    c.ppo.ppo_epochs = opts.ppo.ppo_epochs;
    c.ppo.rollout_batch = opts.ppo.rollout_batch;
    c.ppo.minibatch = opts.ppo.minibatch;
    c.ppo.max_new_tokens = opts.ppo.max_new_tokens;
    c.ppo.entropy_coef = opts.ppo.entropy_coef;
    c.ppo.value_coef = opts.ppo.value_coef;
    c.ppo.seed = seed;
    c.ppo.checkpoint_every = opts.ppo.checkpoint_every;

    c.dpo.beta = opts.dpo.beta;
    c.dpo.lr = opts.dpo.lr;
    c.dpo.epochs = opts.dpo.epochs;
    c.dpo.batch_size = opts.dpo.batch_size;
    c.dpo.seed = seed;
    c.dpo.checkpoint_every = opts.dpo.checkpoint_every;

    c.eval.settings = {setting_name(setting)};
    c.eval.seeds = {seed};
    c.eval.alignment = align_mode_name(opts.alignment);
    c.eval.max_new_tokens = opts.eval_max_new_tokens;
    return c;
}

void check_grid_options(const std::vector<McqSample>& train, const std::vector<McqSample>& test,
                        const AblationOptions& opts) {
    if (train.empty()) throw std::invalid_argument("run_ablation: train split is empty");
    if (test.empty()) throw std::invalid_argument("run_ablation: test split is empty");
    if (opts.settings.empty()) throw std::invalid_argument("run_ablation: no settings");
    if (opts.seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
    for (std::size_t i = 0; i < opts.settings.size(); ++i) {
        for (std::size_t j = i + 1; j < opts.settings.size(); ++j) {
            if (opts.settings[i] == opts.settings[j]) {
                throw std::invalid_argument("run_ablation: duplicate setting " +
                                            setting_name(opts.settings[i]));
            }
        }
    }
    for (std::size_t i = 0; i < opts.seeds.size(); ++i) {
        for (std::size_t j = i + 1; j < opts.seeds.size(); ++j) {
            if (opts.seeds[i] == opts.seeds[j]) {
                throw std::invalid_argument("run_ablation: duplicate seed " +
                                            std::to_string(opts.seeds[i]));
            }
        }
    }
    if (opts.eval_max_new_tokens < 1) {
        throw std::invalid_argument("run_ablation: eval_max_new_tokens must be >= 1");
    }
    if (opts.eval_workers < 1) {
        throw std::invalid_argument("run_ablation: eval_workers must be >= 1");
    }
    if (opts.alignment == AlignMode::ppo) opts.ppo.validate();
    if (opts.alignment == AlignMode::dpo) {
        if (opts.pair_prompts < 1) {
            throw std::invalid_argument("run_ablation: pair_prompts must be >= 1");
        }
        if (opts.pair_k < 2) throw std::invalid_argument("run_ablation: pair_k must be >= 2");
        if (opts.pair_max_new_tokens < 1) {
            throw std::invalid_argument("run_ablation: pair_max_new_tokens must be >= 1");
        }
        if (!(opts.dpo.beta > 0.0)) {
            throw std::invalid_argument("run_ablation: dpo.beta must be positive");
        }
        if (!(opts.dpo.lr > 0.0)) {
            throw std::invalid_argument("run_ablation: dpo.lr must be positive");
        }
        if (opts.dpo.epochs <= 0) {
            throw std::invalid_argument("run_ablation: dpo.epochs must be positive");
        }
        if (opts.dpo.batch_size <= 0) {
            throw std::invalid_argument("run_ablation: dpo.batch_size must be positive");
        }
    }
}

// Preference pairs for one dpo cell: candidates sampled from the sibling sft
// checkpoint on a fixed train-prefix prompt set, oracle-ranked.
std::vector<PreferencePair> build_cell_pairs(const std::vector<McqSample>& train,
                                             InputSetting setting, std::uint64_t seed,
                                             const AblationOptions& opts,
                                             const std::string& sft_checkpoint) {
    const auto n = std::min<std::size_t>(train.size(), static_cast<std::size_t>(opts.pair_prompts));
    const std::vector<McqSample> prompts(train.begin(),
                                         train.begin() + static_cast<std::ptrdiff_t>(n));

    CandidateGenConfig gen;
    gen.checkpoints = {sft_checkpoint};
    gen.setting = setting;
    gen.temperature = opts.pair_temperature;
    gen.top_k = opts.pair_top_k;
    gen.max_new_tokens = opts.pair_max_new_tokens;
    gen.seed = seed;
    gen.workers = 1;
    const CandidateBuild build = generate_candidates(gen, prompts, opts.pair_k);

    std::map<std::string, const McqSample*> by_id;
    for (const auto& p : prompts) by_id[p.id] = &p;

    std::vector<PreferencePair> pairs;
    for (const auto& set : build.sets) {
        const McqSample& gold = *by_id.at(set.sample_id);
        PairBuild made = make_pairs(set, rank_oracle(set, gold));
        for (auto& pair : made.pairs) pairs.push_back(std::move(pair));
    }
    if (pairs.empty()) {
        throw std::runtime_error(
            "no preference pairs could be built from the sft checkpoint (every candidate set "
            "was dropped or fully duplicated)");
    }
    return pairs;
}

void sort_cells(std::vector<AblationCell>& cells) {
    std::stable_sort(cells.begin(), cells.end(), [](const AblationCell& a, const AblationCell& b) {
        return std::make_tuple(static_cast<int>(a.setting), a.aligned, a.seed) <
               std::make_tuple(static_cast<int>(b.setting), b.aligned, b.seed);
    });
}

}  // namespace

AblationReport run_ablation(const std::vector<McqSample>& train,
                            const std::vector<McqSample>& test, const std::string& grid_dir,
                            const AblationOptions& opts) {
    check_grid_options(train, test, opts);
    fs::create_directories(grid_dir);

    struct SftSlot {
        bool ok = false;
        std::optional<PolicyModel> model;
        std::string run_dir;
    };
    std::vector<SftSlot> slots(opts.settings.size() * opts.seeds.size());
    auto slot_of = [&](std::size_t si, std::size_t ki) { return si * opts.seeds.size() + ki; };

    std::vector<AblationCell> cells;

    for (std::size_t si = 0; si < opts.settings.size(); ++si) {
        const InputSetting setting = opts.settings[si];
        for (std::size_t ki = 0; ki < opts.seeds.size(); ++ki) {
            const std::uint64_t seed = opts.seeds[ki];
            AblationCell cell;
            cell.setting = setting;
            cell.aligned = false;
            cell.seed = seed;
            cell.run_dir =
                (fs::path(grid_dir) / cell_dir_name(setting, false, seed)).string();
            try {
                RunDir rd(cell.run_dir,
                          cell_run_config(opts, train.size(), test.size(), setting, seed));
                PolicyModel model(opts.model, seed);
                SftOptions sft = opts.sft;
                sft.setting = setting;
                sft.seed = seed;
                sft_train(model, train, sft, &rd);
                cell.eval = evaluate(model, test, setting, opts.eval_max_new_tokens, {},
                                     opts.eval_workers);
                SftSlot& slot = slots[slot_of(si, ki)];
                slot.ok = true;
                slot.model.emplace(std::move(model));
                slot.run_dir = cell.run_dir;
            } catch (const std::exception& e) {
                cell.failed = true;
                cell.error = e.what();
                std::cerr << "warning: ablation cell " << cell_dir_name(setting, false, seed)
                          << " failed: " << e.what() << "\n";
            }
            cells.push_back(std::move(cell));
        }
    }

    if (opts.alignment != AlignMode::none) {
        for (std::size_t si = 0; si < opts.settings.size(); ++si) {
            const InputSetting setting = opts.settings[si];
            for (std::size_t ki = 0; ki < opts.seeds.size(); ++ki) {
                const std::uint64_t seed = opts.seeds[ki];
                AblationCell cell;
                cell.setting = setting;
                cell.aligned = true;
                cell.seed = seed;
                cell.run_dir =
                    (fs::path(grid_dir) / cell_dir_name(setting, true, seed)).string();
                const SftSlot& sibling = slots[slot_of(si, ki)];
                try {
                    if (!sibling.ok) {
                        throw std::runtime_error(
                            "sft stage for this setting and seed failed; nothing to align");
                    }
                    RunDir rd(cell.run_dir,
                              cell_run_config(opts, train.size(), test.size(), setting, seed));
                    PolicyModel policy(opts.model, seed);
                    if (opts.alignment == AlignMode::dpo) {
                        if (rd.stage_done("dpo")) {
                            policy.import_tensors(
                                read_checkpoint(rd.checkpoint("dpo_final.mmrl")));
                        } else {
                            policy.copy_weights_from(*sibling.model);
                            PolicyModel ref(opts.model, seed);
                            ref.copy_weights_from(*sibling.model);
                            const auto pairs = build_cell_pairs(
                                train, setting, seed, opts,
                                (fs::path(sibling.run_dir) / "checkpoints" / "sft_final.mmrl")
                                    .string());
                            DpoOptions dpo = opts.dpo;
                            dpo.seed = seed;
                            dpo_train(policy, ref, pairs, dpo, &rd);
                        }
                    } else {
                        policy.copy_weights_from(*sibling.model);
                        PolicyModel ref(opts.model, seed);
                        ref.copy_weights_from(*sibling.model);
                        PpoOptions ppo = opts.ppo;
                        ppo.setting = setting;
                        ppo.seed = seed;
                        const RewardScorer scorer =
                            opts.scorer ? opts.scorer : make_oracle_scorer();
                        PpoTrainer trainer(policy, ref, scorer, train, ppo);
                        trainer.run(&rd);
                    }
                    cell.eval = evaluate(policy, test, setting, opts.eval_max_new_tokens, {},
                                         opts.eval_workers);
                    cell.eval.aligned = true;
                } catch (const std::exception& e) {
                    cell.failed = true;
                    cell.error = e.what();
                    std::cerr << "warning: ablation cell " << cell_dir_name(setting, true, seed)
                              << " failed: " << e.what() << "\n";
                }
                cells.push_back(std::move(cell));
            }
        }
    }

    sort_cells(cells);
    AblationReport report;
    report.cells = std::move(cells);
    return report;
}

double mean_cell_accuracy(const AblationReport& report, InputSetting setting, bool aligned) {
    double sum = 0.0;
    int n = 0;
    for (const auto& cell : report.cells) {
        if (cell.setting != setting || cell.aligned != aligned || cell.failed) continue;
        sum += cell.eval.accuracy;
        n += 1;
    }
    if (n == 0) {
        throw std::runtime_error("no successful " + std::string(aligned ? "aligned" : "sft") +
                                 " cells for setting " + setting_name(setting));
    }
    return sum / static_cast<double>(n);
}

const std::vector<ReferenceRow>& reference_rows() {
    static const std::vector<ReferenceRow> rows = {
        {"llava-1.5-7b", InputSetting::text_image, false, 64, 0.533},
        {"llava-1.5-13b", InputSetting::text_image, false, 64, 0.527},
        {"llava-1.5-13b-lora-large", InputSetting::text_image, false, 128, 0.531},
        {"llava-1.5-7b", InputSetting::text_caption, false, 64, 0.6695},
        {"llava-1.5-13b", InputSetting::text_caption, false, 64, 0.64},
        {"llava-1.5-13b-lora-large", InputSetting::text_caption, false, 128, 0.7456},
        {"llava-1.5-7b", InputSetting::text_image_caption, false, 64, 0.8252},
        {"llava-1.5-13b", InputSetting::text_image_caption, false, 64, 0.8328},
        {"llava-1.5-13b-lora-large", InputSetting::text_image_caption, false, 128, 0.821},
    };
    return rows;
}

namespace {

std::string fixed4(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

std::string padded(const std::string& text, std::size_t width) {
    std::string out = text;
    while (out.size() < width) out.push_back(' ');
    return out;
}

}  // namespace

void emit_report(const AblationReport& report, const std::string& dir) {
    fs::create_directories(dir);
    std::vector<AblationCell> cells = report.cells;
    sort_cells(cells);

    ordered_json doc;
    doc["cells"] = ordered_json::array();
    for (const auto& cell : cells) {
        ordered_json row;
        row["setting"] = setting_name(cell.setting);
        row["aligned"] = cell.aligned;
        row["seed"] = cell.seed;
        if (cell.failed) {
            row["accuracy"] = nullptr;
            row["parse_fail_rate"] = nullptr;
            row["n"] = 0;
            row["failed"] = true;
            row["error"] = cell.error;
        } else {
            row["accuracy"] = cell.eval.accuracy;
            row["parse_fail_rate"] = static_cast<double>(cell.eval.n_parse_fail) /
                                     static_cast<double>(cell.eval.n_total);
            row["n"] = cell.eval.n_total;
            row["failed"] = false;
        }
        doc["cells"].push_back(std::move(row));
    }
    doc["references"] = ordered_json::array();
    for (const auto& ref : reference_rows()) {
        ordered_json row;
        row["model"] = ref.model;
        row["setting"] = setting_name(ref.setting);
        row["aligned"] = ref.aligned;
        row["lora_rank"] = ref.lora_rank;
        row["accuracy"] = ref.accuracy;
        row["source"] = "external full-scale baseline; context only, not a target";
        doc["references"].push_back(std::move(row));
    }

    {
        std::ofstream os((fs::path(dir) / "report.json").string(), std::ios::trunc);
        os << doc.dump(2) << "\n";
        if (!os) throw std::runtime_error("cannot write report.json under '" + dir + "'");
    }

    std::ostringstream txt;
    txt << "ablation report\n";
    txt << "===============\n\n";
    txt << "cells\n";
    txt << padded("setting", 22) << padded("aligned", 9) << padded("seed", 6)
        << padded("accuracy", 10) << padded("parse_fail", 12) << "n\n";
    for (const auto& cell : cells) {
        txt << padded(setting_name(cell.setting), 22) << padded(cell.aligned ? "yes" : "no", 9)
            << padded(std::to_string(cell.seed), 6);
        if (cell.failed) {
            txt << "failed: " << cell.error << "\n";
        } else {
            const double pf = static_cast<double>(cell.eval.n_parse_fail) /
                              static_cast<double>(cell.eval.n_total);
            txt << padded(fixed4(cell.eval.accuracy), 10) << padded(fixed4(pf), 12)
                << cell.eval.n_total << "\n";
        }
    }

    txt << "\nmeans over seeds (successful cells only)\n";
    txt << padded("setting", 22) << padded("aligned", 9) << padded("cells", 7)
        << "mean_accuracy\n";
    std::vector<std::pair<InputSetting, bool>> columns;
    for (const auto& cell : cells) {
        const std::pair<InputSetting, bool> key{cell.setting, cell.aligned};
        if (std::find(columns.begin(), columns.end(), key) == columns.end()) {
            columns.push_back(key);
        }
    }
    for (const auto& [setting, aligned] : columns) {
        double sum = 0.0;
        int n = 0;
        for (const auto& cell : cells) {
            if (cell.setting == setting && cell.aligned == aligned && !cell.failed) {
                sum += cell.eval.accuracy;
                n += 1;
            }
        }
        txt << padded(setting_name(setting), 22) << padded(aligned ? "yes" : "no", 9)
            << padded(std::to_string(n), 7)
            << (n > 0 ? fixed4(sum / static_cast<double>(n)) : "-") << "\n";
    }

    txt << "\nreference baselines (external full-scale models, sft only; context, not targets)\n";
    txt << padded("model", 26) << padded("setting", 22) << padded("lora_rank", 11)
        << "accuracy\n";
    for (const auto& ref : reference_rows()) {
        txt << padded(ref.model, 26) << padded(setting_name(ref.setting), 22)
            << padded(std::to_string(ref.lora_rank), 11) << fixed4(ref.accuracy) << "\n";
    }

    std::ofstream os((fs::path(dir) / "report.txt").string(), std::ios::trunc);
    os << txt.str();
    if (!os) throw std::runtime_error("cannot write report.txt under '" + dir + "'");
}

}  // namespace prefalign
