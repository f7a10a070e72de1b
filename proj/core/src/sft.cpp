#include "prefalign/sft.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "prefalign/adam.hpp"
#include "prefalign/checkpoint.hpp"
#include "prefalign/rng.hpp"
#include "prefalign/rundir.hpp"
#include "prefalign/trainstate.hpp"

namespace prefalign {

InputSetting parse_setting(const std::string& name) {
    if (name == "TEXT_IMAGE") return InputSetting::text_image;
    if (name == "TEXT_CAPTION") return InputSetting::text_caption;
    if (name == "TEXT_IMAGE_CAPTION") return InputSetting::text_image_caption;
    throw std::invalid_argument("unknown input setting '" + name +
                                "' (expected TEXT_IMAGE, TEXT_CAPTION, or TEXT_IMAGE_CAPTION)");
}

std::string setting_name(InputSetting setting) {
    switch (setting) {
        case InputSetting::text_image: return "TEXT_IMAGE";
        case InputSetting::text_caption: return "TEXT_CAPTION";
        case InputSetting::text_image_caption: return "TEXT_IMAGE_CAPTION";
    }
    throw std::invalid_argument("unknown input setting value");
}

BuiltPrompt build_prompt(const McqSample& sample, const Vocab& vocab, InputSetting setting) {
    const bool with_caption =
        setting == InputSetting::text_caption || setting == InputSetting::text_image_caption;
    const bool with_image =
        setting == InputSetting::text_image || setting == InputSetting::text_image_caption;

    BuiltPrompt built;
    built.prompt_text = "Q: " + sample.question + "\nA) " + sample.options[0] + "\nB) " +
                        sample.options[1] + "\nC) " + sample.options[2] + "\nD) " +
                        sample.options[3];
    if (with_caption) built.prompt_text += "\nCaption: " + sample.caption;
    built.prompt_text += "\n";
    built.target_text = std::string("Answer: ") + sample.answer + ". " + sample.explanation;

    built.prompt_ids.push_back(Vocab::kBos);
    for (int id : vocab.tokenize(built.prompt_text)) built.prompt_ids.push_back(id);
    built.full_ids = built.prompt_ids;
    for (int id : vocab.tokenize(built.target_text)) built.full_ids.push_back(id);
    built.full_ids.push_back(Vocab::kEos);
    if (with_image) built.image = sample.image;
    return built;
}

std::vector<double> loss_mask(std::size_t prompt_len, std::size_t total_len) {
    if (prompt_len >= total_len) {
        throw std::invalid_argument("loss_mask: prompt_len " + std::to_string(prompt_len) +
                                    " leaves no supervised positions in a sequence of length " +
                                    std::to_string(total_len));
    }
    std::vector<double> mask(total_len, 1.0);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(prompt_len), 0.0);
    return mask;
}

Tensor sequence_loss(PolicyModel& model, const BuiltPrompt& built) {
    const auto& ids = built.full_ids;
    const std::size_t n = ids.size();
    const std::size_t prefix =
        built.image ? static_cast<std::size_t>(model.config().image_prefix_len) : 0;

    auto out = model.forward(ids, built.image);
    Tensor rows = slice_rows(out.logits, static_cast<std::int64_t>(prefix),
                             static_cast<std::int64_t>(prefix + n - 1));
    std::vector<int> targets(ids.begin() + 1, ids.end());
    Tensor nll = cross_entropy(rows, targets);

    auto mask = loss_mask(built.prompt_ids.size(), n);
    std::vector<double> weights(mask.begin() + 1, mask.end());
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    Tensor w = Tensor::from_data({static_cast<std::int64_t>(weights.size())}, weights);
    return scale(sum(mul(nll, w)), 1.0 / total);
}

double mean_sequence_loss(PolicyModel& model, const std::vector<McqSample>& samples,
                          InputSetting setting) {
    if (samples.empty()) throw std::invalid_argument("mean_sequence_loss: no samples");
    NoGradGuard guard;
    double sum_loss = 0.0;
    for (const auto& s : samples) {
        sum_loss += sequence_loss(model, build_prompt(s, model.vocab(), setting)).item();
    }
    return sum_loss / static_cast<double>(samples.size());
}

SftResult sft_train(PolicyModel& model, const std::vector<McqSample>& samples,
                    const SftOptions& opts, RunDir* run_dir) {
    if (samples.empty()) throw std::invalid_argument("sft_train: no samples");
    if (opts.epochs <= 0) throw std::invalid_argument("sft_train: epochs must be positive");
    if (opts.batch_size <= 0) throw std::invalid_argument("sft_train: batch_size must be positive");
    if (!(opts.lr > 0.0)) throw std::invalid_argument("sft_train: lr must be positive");

    const int n = static_cast<int>(samples.size());
    const int batches_per_epoch = (n + opts.batch_size - 1) / opts.batch_size;

    if (run_dir != nullptr && run_dir->stage_done("sft")) {
        model.import_tensors(read_checkpoint(run_dir->checkpoint("sft_final.mmrl")));
        SftResult done;
        done.steps = opts.epochs * batches_per_epoch;
        return done;
    }

    std::vector<BuiltPrompt> built;
    built.reserve(samples.size());
    for (const auto& s : samples) built.push_back(build_prompt(s, model.vocab(), opts.setting));

    Adam opt(model.policy_params(), {.lr = opts.lr});

    TrainerState st;
    if (run_dir != nullptr) {
        const std::string state_path = run_dir->checkpoint("sft_state.mmrl");
        if (std::filesystem::exists(state_path)) {
            st = load_trainer_state(state_path, model, {{"opt", &opt}});
            run_dir->truncate_metrics_after("sft", st.step);
        }
    }

    Rng base(opts.seed);
    SftResult result;
    result.steps = st.step;
    int steps_this_run = 0;

    for (int epoch = st.epoch; epoch < opts.epochs; ++epoch) {
        std::vector<int> order(samples.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle = base.split(static_cast<std::uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i) {
            std::swap(order[static_cast<std::size_t>(i)],
                      order[shuffle.below(static_cast<std::uint64_t>(i) + 1)]);
        }

        double epoch_loss_sum = 0.0;
        int epoch_batches = 0;
        const int first_batch = (epoch == st.epoch) ? st.batch_idx : 0;
        for (int b = first_batch; b < batches_per_epoch; ++b) {
            const auto batch_start = std::chrono::steady_clock::now();
            const int begin = b * opts.batch_size;
            const int end = std::min(n, begin + opts.batch_size);
            const int batch_n = end - begin;

            double batch_loss = 0.0;
            try {
                opt.zero_grad();
                for (int i = begin; i < end; ++i) {
                    Tensor loss = sequence_loss(model, built[static_cast<std::size_t>(
                                                           order[static_cast<std::size_t>(i)])]);
                    batch_loss += loss.item() / batch_n;
                    backward(scale(loss, 1.0 / batch_n));
                }
                opt.step();
            } catch (const NumericError& e) {
                throw std::runtime_error("sft diverged at step " + std::to_string(st.step + 1) +
                                         " (epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(b) + "): " + e.what());
            }

            st.step += 1;
            steps_this_run += 1;
            epoch_loss_sum += batch_loss;
            epoch_batches += 1;
            result.final_loss = batch_loss;

            if (run_dir != nullptr) {
                nlohmann::ordered_json row;
                row["stage"] = "sft";
                row["step"] = st.step;
                row["epoch"] = epoch;
                row["loss"] = batch_loss;
                row["lr"] = opts.lr;
                run_dir->append_metrics(row);
                const double wall_ms =
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                              batch_start)
                        .count();
                run_dir->append_timing("sft", st.step, wall_ms);
            }

            const bool interrupt = opts.interrupt_after >= 0 && steps_this_run >= opts.interrupt_after;
            const bool periodic = opts.checkpoint_every > 0 && st.step % opts.checkpoint_every == 0;
            if (run_dir != nullptr && (interrupt || periodic)) {
                TrainerState snap = st;
                snap.epoch = epoch;
                snap.batch_idx = b + 1;
                save_trainer_state(run_dir->checkpoint("sft_state.mmrl"), model, {{"opt", &opt}},
                                   snap);
            }
            if (interrupt) {
                if (epoch_batches > 0) {
                    result.epoch_mean_losses.push_back(epoch_loss_sum / epoch_batches);
                }
                result.steps = st.step;
                result.interrupted = true;
                return result;
            }
        }
        if (epoch_batches > 0) {
            result.epoch_mean_losses.push_back(epoch_loss_sum / epoch_batches);
        }
    }

    result.steps = st.step;
    if (run_dir != nullptr) {
        TrainerState snap = st;
        snap.epoch = opts.epochs;
        snap.batch_idx = 0;
        save_trainer_state(run_dir->checkpoint("sft_state.mmrl"), model, {{"opt", &opt}}, snap);
        model.save(run_dir->checkpoint("sft_final.mmrl"));
        run_dir->mark_done("sft");
    }
    return result;
}

}  // namespace prefalign
