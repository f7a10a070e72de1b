#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prefalign/model.hpp"
#include "prefalign/taskgen.hpp"

namespace prefalign {

class RunDir;

// Which input channels a sample is rendered with. The image rides along as a
// soft prefix; the caption is spelled out as a text line inside the prompt.
enum class InputSetting {
    text_image,
    text_caption,
    text_image_caption,
};

// Accepts the canonical upper-snake names used in configs ("TEXT_IMAGE",
// "TEXT_CAPTION", "TEXT_IMAGE_CAPTION"); throws std::invalid_argument otherwise.
InputSetting parse_setting(const std::string& name);
std::string setting_name(InputSetting setting);

// A sample rendered for the model. `prompt_ids` starts with BOS; `full_ids`
// is prompt_ids + target tokens + EOS, so prompt_ids is always a strict
// prefix of full_ids.
struct BuiltPrompt {
    std::string prompt_text;
    std::string target_text;
    std::vector<int> prompt_ids;
    std::vector<int> full_ids;
    std::optional<ImageGrid> image;
};

BuiltPrompt build_prompt(const McqSample& sample, const Vocab& vocab, InputSetting setting);

// Per-position loss weights over a sequence of total_len ids: 0.0 for indices
// before prompt_len, 1.0 from prompt_len on. Throws std::invalid_argument when
// prompt_len >= total_len (nothing left to supervise).
std::vector<double> loss_mask(std::size_t prompt_len, std::size_t total_len);

// Mean next-token cross-entropy over the completion span of one sample, with
// prompt positions masked out. Grad-tracking; callers that only want the value
// should wrap it in a NoGradGuard.
Tensor sequence_loss(PolicyModel& model, const BuiltPrompt& built);

// Gradient-free mean of sequence_loss over a sample set.
double mean_sequence_loss(PolicyModel& model, const std::vector<McqSample>& samples,
                          InputSetting setting);

struct SftOptions {
    int epochs = 4;
    int batch_size = 8;
    double lr = 3e-4;
    InputSetting setting = InputSetting::text_image_caption;
    std::uint64_t seed = 0;
    int checkpoint_every = 50;
    // Test hook: stop after this many optimizer steps in this invocation,
    // saving resumable state but not the stage marker. Negative disables.
    int interrupt_after = -1;
};

struct SftResult {
    int steps = 0;
    double final_loss = 0.0;
    // Mean batch loss per epoch, in epoch order, for epochs this invocation
    // worked on (a resumed run only reports the epochs it touched).
    std::vector<double> epoch_mean_losses;
    bool interrupted = false;
};

// Supervised finetuning on the MCQ corpus. Per-sample losses are averaged via
// gradient accumulation, so results are independent of how a batch would be
// padded. With a RunDir attached this streams metrics, checkpoints resumable
// trainer state every checkpoint_every steps, resumes bit-exact from that
// state, and writes sft_final.mmrl plus the stage marker on completion.
SftResult sft_train(PolicyModel& model, const std::vector<McqSample>& samples,
                    const SftOptions& opts, RunDir* run_dir = nullptr);

}  // namespace prefalign
