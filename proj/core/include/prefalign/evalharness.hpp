#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prefalign/alignment.hpp"
#include "prefalign/sft.hpp"
#include "prefalign/taskgen.hpp"

namespace prefalign {

// First case-insensitive "Answer: <letter>" marker wins; the letter must not
// run into an alphanumeric character (so "Answer: Because" does not read as
// 'B'). Returns uppercase 'A'..'D', or nullopt when no marker is present —
// callers score that as a parse failure.
std::optional<char> extract_answer(const std::string& text);

// Text after the first answer marker with leading punctuation trimmed; the
// whole text when no marker is present. What overlap scoring treats as a
// response's explanation.
std::string response_explanation(const std::string& text);

// ---- evaluation ----

struct SampleRecord {
    std::string id;
    std::optional<char> predicted;  // nullopt = parse failure
    char gold = 'A';
};

// Accuracy is always n_correct / n_total, so parse failures count as wrong;
// their rate is reported separately rather than silently folded in.
struct EvalResult {
    InputSetting setting = InputSetting::text_image_caption;
    bool aligned = false;  // set by the ablation grid; evaluate() leaves false
    int n_total = 0;
    int n_correct = 0;
    int n_parse_fail = 0;
    double accuracy = 0.0;
    std::vector<SampleRecord> records;  // input sample order
};

// Produces the response text scored for one sample. The default is the model's
// own greedy decode; tests inject fixed responders here (an untrained model
// decodes deterministically, so only injection can exercise chance-level
// behaviour). Must be safe to call concurrently when workers > 1.
using ResponseGenerator = std::function<std::string(const McqSample& sample,
                                                    const BuiltPrompt& built)>;

// Scores `model` on `samples` under one input setting with greedy decoding
// (or `generator` when provided). An empty generation parses as a failure.
// Records keep sample order regardless of worker count.
EvalResult evaluate(const PolicyModel& model, const std::vector<McqSample>& samples,
                    InputSetting setting, int max_new_tokens = 24,
                    const ResponseGenerator& generator = {}, int workers = 1);

// ---- ablation grid ----

// How the aligned half of the grid is trained on top of each sft checkpoint.
enum class AlignMode {
    none,  // grid has only the sft cells
    ppo,
    dpo,
};

AlignMode parse_align_mode(const std::string& name);  // "none" | "ppo" | "dpo"
std::string align_mode_name(AlignMode mode);

struct AblationOptions {
    ModelConfig model;
    std::vector<InputSetting> settings = {InputSetting::text_image, InputSetting::text_caption,
                                          InputSetting::text_image_caption};
    std::vector<std::uint64_t> seeds = {0};
    AlignMode alignment = AlignMode::dpo;
    SftOptions sft;    // setting/seed are overridden per cell
    DpoOptions dpo;    // seed overridden per cell
    PpoOptions ppo;    // setting/seed overridden per cell
    // dpo alignment builds its preference pairs in-cell: candidates sampled
    // from the sibling sft checkpoint on the first pair_prompts train samples,
    // ranked by the oracle.
    int pair_prompts = 32;
    int pair_k = 4;
    double pair_temperature = 0.8;
    int pair_top_k = 20;
    int pair_max_new_tokens = 24;
    RewardScorer scorer;  // ppo terminal reward; empty = oracle response score
    int eval_max_new_tokens = 24;
    int eval_workers = 1;
};

struct AblationCell {
    InputSetting setting = InputSetting::text_image_caption;
    bool aligned = false;
    std::uint64_t seed = 0;
    std::string run_dir;
    EvalResult eval;  // meaningful only when !failed
    bool failed = false;
    std::string error;
};

struct AblationReport {
    std::vector<AblationCell> cells;  // sorted by (setting, aligned, seed)
};

// Trains and evaluates settings x {sft, aligned} x seeds under `grid_dir`, one
// run directory per trained cell ("<setting>_sft_seed<k>" and
// "<setting>_aligned_seed<k>"). Aligned cells start from their sibling sft
// cell's checkpoint. A failing cell is recorded with its error and the grid
// carries on; completed stages are skipped on rerun via their markers.
AblationReport run_ablation(const std::vector<McqSample>& train,
                            const std::vector<McqSample>& test, const std::string& grid_dir,
                            const AblationOptions& opts);

// Mean accuracy over the successful cells of one (setting, aligned) column;
// throws std::runtime_error when every such cell failed or none exists.
double mean_cell_accuracy(const AblationReport& report, InputSetting setting, bool aligned);

// Accuracy of an external full-scale baseline on the same input settings,
// supervised fine-tuning only. Context rows for reports — never targets for
// this implementation.
struct ReferenceRow {
    std::string model;
    InputSetting setting = InputSetting::text_image;
    bool aligned = false;
    int lora_rank = 0;
    double accuracy = 0.0;  // fraction in [0, 1]
};

const std::vector<ReferenceRow>& reference_rows();

// Writes <dir>/report.json ({"cells": [...], "references": [...]}) and a
// plain-text <dir>/report.txt with per-column means. Byte-deterministic for a
// given report; rows sorted by (setting, aligned, seed).
void emit_report(const AblationReport& report, const std::string& dir);

}  // namespace prefalign
