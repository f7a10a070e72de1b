#include "prefalign/alignment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "prefalign/checkpoint.hpp"
#include "prefalign/rng.hpp"
#include "prefalign/rundir.hpp"
#include "prefalign/trainstate.hpp"

namespace prefalign {

namespace {

// -log sigmoid(x), stable on both tails; exactly ln 2 at x = 0.
double neg_log_sigmoid(double x) {
    return x < 0.0 ? -x + std::log1p(std::exp(x)) : std::log1p(std::exp(-x));
}

void ensure_distinct_models(const PolicyModel& policy, const PolicyModel& ref,
                            const std::string& stage) {
    for (const auto& [policy_name, policy_tensor] : policy.named_params()) {
        for (const auto& [ref_name, ref_tensor] : ref.named_params()) {
            if (policy_tensor.same_storage(ref_tensor)) {
                throw std::invalid_argument(
                    stage + ": reference model shares weight storage with the policy ('" +
                    policy_name + "'); load or deep-copy it into a separate model");
            }
        }
    }
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since)
        .count();
}

std::vector<int> shuffled_order(std::size_t n, Rng stream) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) {
        std::swap(order[i], order[stream.below(static_cast<std::uint64_t>(i) + 1)]);
    }
    return order;
}

}  // namespace

std::uint64_t weight_hash(const PolicyModel& model) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [name, tensor] : model.named_params()) {
        mix(name.data(), name.size());
        const auto data = tensor.data();
        mix(data.data(), data.size() * sizeof(double));
    }
    return h;
}

std::vector<double> response_logps(const PolicyModel& model, const std::vector<int>& prompt_ids,
                                   const std::optional<ImageGrid>& image,
                                   const std::vector<int>& response) {
    if (prompt_ids.empty()) throw std::invalid_argument("response_logps: empty prompt");
    if (response.empty()) return {};
    NoGradGuard guard;
    std::vector<int> full = prompt_ids;
    full.insert(full.end(), response.begin(), response.end());
    auto out = model.forward(full, image);
    const std::int64_t prefix = image ? model.config().image_prefix_len : 0;
    const std::int64_t row0 = prefix + static_cast<std::int64_t>(prompt_ids.size()) - 1;
    Tensor rows = slice_rows(out.logits, row0, row0 + static_cast<std::int64_t>(response.size()));
    Tensor logp = take_per_row(log_softmax(rows), response);
    return {logp.data().begin(), logp.data().end()};
}

// ---- reward model ----

RewardModel::RewardModel(ModelConfig config, std::uint64_t seed) : model_(config, seed) {}

RewardModel RewardModel::from_policy(const PolicyModel& policy) {
    RewardModel rm(policy.config(), 0);
    rm.model_.copy_weights_from(policy);
    return rm;
}

Tensor RewardModel::score_tensor(const std::string& prompt, const std::optional<ImageGrid>& image,
                                 const std::string& response) const {
    std::vector<int> ids;
    ids.push_back(Vocab::kBos);
    for (int id : model_.vocab().tokenize(prompt)) ids.push_back(id);
    for (int id : model_.vocab().tokenize(response)) ids.push_back(id);
    ids.push_back(Vocab::kEos);
    auto out = model_.forward(ids, image, /*with_values=*/true);
    const std::int64_t n = out.values.dim(0);
    return sum(slice_rows(reshape(out.values, {n, 1}), n - 1, n));
}

double RewardModel::score(const std::string& prompt, const std::optional<ImageGrid>& image,
                          const std::string& response) const {
    NoGradGuard guard;
    return score_tensor(prompt, image, response).item();
}

std::vector<Tensor> RewardModel::trainable_params() {
    auto params = model_.policy_params();
    for (auto& p : model_.value_params()) params.push_back(p);
    return params;
}

void RewardModel::save(const std::string& path) const { model_.save(path); }

RewardModel RewardModel::load(const std::string& path) {
    auto model = PolicyModel::load(path);
    RewardModel rm(model.config(), 0);
    rm.model_.copy_weights_from(model);
    return rm;
}

double reward_pair_loss(const RewardModel& rm, const PreferencePair& pair) {
    const double margin = rm.score(pair.prompt, pair.image, pair.chosen) -
                          rm.score(pair.prompt, pair.image, pair.rejected);
    return neg_log_sigmoid(margin);
}

double reward_pair_accuracy(const RewardModel& rm, const std::vector<PreferencePair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("reward_pair_accuracy: no pairs");
    int correct = 0;
    for (const auto& pair : pairs) {
        const double margin = rm.score(pair.prompt, pair.image, pair.chosen) -
                              rm.score(pair.prompt, pair.image, pair.rejected);
        if (margin > 0.0) correct += 1;
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

RewardTrainResult train_reward(RewardModel& rm, const std::vector<PreferencePair>& pairs,
                               const RewardTrainOptions& opts, RunDir* run_dir) {
    if (pairs.empty()) throw std::invalid_argument("train_reward: no pairs");
    if (opts.epochs <= 0) throw std::invalid_argument("train_reward: epochs must be positive");
    if (opts.batch_size <= 0) {
        throw std::invalid_argument("train_reward: batch_size must be positive");
    }
    if (!(opts.lr > 0.0)) throw std::invalid_argument("train_reward: lr must be positive");

    const int n = static_cast<int>(pairs.size());
    const int batches_per_epoch = (n + opts.batch_size - 1) / opts.batch_size;

    if (run_dir != nullptr && run_dir->stage_done("rm")) {
        rm.backbone().import_tensors(read_checkpoint(run_dir->checkpoint("rm_final.mmrl")));
        RewardTrainResult done;
        done.steps = opts.epochs * batches_per_epoch;
        return done;
    }

    Adam opt(rm.trainable_params(), {.lr = opts.lr});

    TrainerState st;
    if (run_dir != nullptr) {
        const std::string state_path = run_dir->checkpoint("rm_state.mmrl");
        if (std::filesystem::exists(state_path)) {
            st = load_trainer_state(state_path, rm.backbone(), {{"opt", &opt}});
            run_dir->truncate_metrics_after("rm", st.step);
        }
    }

    Rng base(opts.seed);
    RewardTrainResult result;
    result.steps = st.step;
    int steps_this_run = 0;

    for (int epoch = st.epoch; epoch < opts.epochs; ++epoch) {
        const auto order = shuffled_order(pairs.size(), base.split(static_cast<std::uint64_t>(epoch)));

        double epoch_loss_sum = 0.0;
        int epoch_batches = 0;
        int epoch_correct = 0;
        int epoch_count = 0;
        const int first_batch = (epoch == st.epoch) ? st.batch_idx : 0;
        for (int b = first_batch; b < batches_per_epoch; ++b) {
            const auto batch_start = std::chrono::steady_clock::now();
            const int begin = b * opts.batch_size;
            const int end = std::min(n, begin + opts.batch_size);
            const int batch_n = end - begin;

            double batch_loss = 0.0;
            int batch_correct = 0;
            std::string current_pair = "?";
            try {
                opt.zero_grad();
                for (int i = begin; i < end; ++i) {
                    const auto& pair = pairs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
                    current_pair = pair.id;
                    Tensor margin = sub(rm.score_tensor(pair.prompt, pair.image, pair.chosen),
                                        rm.score_tensor(pair.prompt, pair.image, pair.rejected));
                    Tensor loss = scale(log_sigmoid(margin), -1.0);
                    batch_loss += loss.item() / batch_n;
                    if (margin.item() > 0.0) batch_correct += 1;
                    backward(scale(loss, 1.0 / batch_n));
                }
                opt.step();
            } catch (const NumericError& e) {
                throw std::runtime_error("reward training diverged at step " +
                                         std::to_string(st.step + 1) + " (epoch " +
                                         std::to_string(epoch) + ", batch " + std::to_string(b) +
                                         ", pair " + current_pair + "): " + e.what());
            }

            st.step += 1;
            steps_this_run += 1;
            epoch_loss_sum += batch_loss;
            epoch_batches += 1;
            epoch_correct += batch_correct;
            epoch_count += batch_n;
            result.final_loss = batch_loss;

            if (run_dir != nullptr) {
                nlohmann::ordered_json row;
                row["stage"] = "rm";
                row["step"] = st.step;
                row["epoch"] = epoch;
                row["loss"] = batch_loss;
                row["accuracy"] = static_cast<double>(batch_correct) / batch_n;
                run_dir->append_metrics(row);
                run_dir->append_timing("rm", st.step, elapsed_ms(batch_start));
            }

            const bool interrupt =
                opts.interrupt_after >= 0 && steps_this_run >= opts.interrupt_after;
            const bool periodic = opts.checkpoint_every > 0 && st.step % opts.checkpoint_every == 0;
            if (run_dir != nullptr && (interrupt || periodic)) {
                TrainerState snap = st;
                snap.epoch = epoch;
                snap.batch_idx = b + 1;
                save_trainer_state(run_dir->checkpoint("rm_state.mmrl"), rm.backbone(),
                                   {{"opt", &opt}}, snap);
            }
            if (interrupt) {
                if (epoch_batches > 0) {
                    result.epoch_mean_losses.push_back(epoch_loss_sum / epoch_batches);
                    result.epoch_accuracies.push_back(static_cast<double>(epoch_correct) /
                                                      epoch_count);
                }
                result.steps = st.step;
                result.interrupted = true;
                return result;
            }
        }
        if (epoch_batches > 0) {
            result.epoch_mean_losses.push_back(epoch_loss_sum / epoch_batches);
            result.epoch_accuracies.push_back(static_cast<double>(epoch_correct) / epoch_count);
        }
    }

    result.steps = st.step;
    if (run_dir != nullptr) {
        TrainerState snap = st;
        snap.epoch = opts.epochs;
        snap.batch_idx = 0;
        save_trainer_state(run_dir->checkpoint("rm_state.mmrl"), rm.backbone(), {{"opt", &opt}},
                           snap);
        rm.save(run_dir->checkpoint("rm_final.mmrl"));
        run_dir->mark_done("rm");
    }
    return result;
}

// ---- kl measurement ----

KlTrace kl_estimate(const PolicyModel& policy, const PolicyModel& ref,
                    const std::vector<int>& prompt_ids, const std::optional<ImageGrid>& image,
                    const std::vector<int>& response) {
    KlTrace trace;
    const auto policy_logp = response_logps(policy, prompt_ids, image, response);
    const auto ref_logp = response_logps(ref, prompt_ids, image, response);
    trace.per_token.resize(policy_logp.size());
    for (std::size_t i = 0; i < policy_logp.size(); ++i) {
        trace.per_token[i] = policy_logp[i] - ref_logp[i];
        trace.total += trace.per_token[i];
    }
    return trace;
}

double measure_kl(const PolicyModel& policy, const PolicyModel& ref,
                  const std::vector<McqSample>& samples, InputSetting setting, int max_new_tokens,
                  std::uint64_t seed, int n_prompts) {
    if (samples.empty()) throw std::invalid_argument("measure_kl: no samples");
    if (n_prompts <= 0) throw std::invalid_argument("measure_kl: n_prompts must be positive");
    Rng base(seed);
    const SamplingParams sampling{.temperature = 1.0, .top_k = 0, .greedy = false};
    double total = 0.0;
    int counted = 0;
    for (int i = 0; i < n_prompts; ++i) {
        const auto& sample = samples[static_cast<std::size_t>(i) % samples.size()];
        const auto built = build_prompt(sample, policy.vocab(), setting);
        Rng gen = base.split(static_cast<std::uint64_t>(i));
        const auto trace = policy.generate(built.prompt_ids, built.image, sampling, gen,
                                           max_new_tokens);
        if (trace.tokens.empty()) continue;
        total += kl_estimate(policy, ref, built.prompt_ids, built.image, trace.tokens).total;
        counted += 1;
    }
    return counted > 0 ? total / counted : 0.0;
}

// ---- ppo ----

RewardScorer make_rm_scorer(const RewardModel& rm) {
    return [rm = &rm](const McqSample&, const std::string& prompt,
                      const std::optional<ImageGrid>& image, const std::string& response) {
        return rm->score(prompt, image, response);
    };
}

RewardScorer make_oracle_scorer() {
    return [](const McqSample& sample, const std::string&, const std::optional<ImageGrid>&,
              const std::string& response) { return oracle_response_score(sample, response); };
}

void whiten(std::vector<double>& values) {
    if (values.size() < 2) return;
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double stddev = std::sqrt(var / n);
    for (double& v : values) v = (v - mean) / (stddev + 1e-8);
}

void PpoOptions::validate() const {
    auto bad = [](const std::string& what) {
        throw std::invalid_argument("ppo options: " + what);
    };
    if (steps < 1) bad("steps must be >= 1");
    if (!(lr > 0.0)) bad("lr must be positive");
    if (!(value_lr > 0.0)) bad("value_lr must be positive");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) bad("clip_eps must lie in (0,1)");
    if (kl_beta < 0.0) bad("kl_beta must be >= 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) bad("gamma must lie in (0,1]");
    if (gae_lambda < 0.0 || gae_lambda > 1.0) bad("gae_lambda must lie in [0,1]");
    if (ppo_epochs < 1) bad("ppo_epochs must be >= 1");
    if (rollout_batch < 1) bad("rollout_batch must be >= 1");
    if (minibatch < 1) bad("minibatch must be >= 1");
    if (max_new_tokens < 1) bad("max_new_tokens must be >= 1");
    if (entropy_coef < 0.0) bad("entropy_coef must be >= 0");
    if (value_coef < 0.0) bad("value_coef must be >= 0");
}

namespace {

PpoOptions checked_ppo(PpoOptions opts) {
    opts.validate();
    return opts;
}

}  // namespace

PpoTrainer::PpoTrainer(PolicyModel& policy, const PolicyModel& ref, RewardScorer scorer,
                       std::vector<McqSample> samples, PpoOptions opts)
    : policy_(policy),
      ref_(ref),
      scorer_(std::move(scorer)),
      samples_(std::move(samples)),
      opts_(checked_ppo(opts)),
      policy_opt_(policy.policy_params(), {.lr = opts_.lr}),
      value_opt_(policy.value_params(), {.lr = opts_.value_lr}) {
    if (!scorer_) throw std::invalid_argument("ppo: scorer is empty");
    if (samples_.empty()) throw std::invalid_argument("ppo: no samples");
    ensure_distinct_models(policy_, ref_, "ppo");
    built_.reserve(samples_.size());
    for (const auto& s : samples_) {
        built_.push_back(build_prompt(s, policy_.vocab(), opts_.setting));
    }
}

std::vector<PpoTrainer::Rollout> PpoTrainer::collect_rollouts(const Rng& step_stream) {
    std::vector<Rollout> rollouts;
    Rng pick = step_stream.split(0);
    const SamplingParams sampling{.temperature = 1.0, .top_k = 0, .greedy = false};
    for (int b = 0; b < opts_.rollout_batch; ++b) {
        const auto idx = static_cast<std::size_t>(pick.below(samples_.size()));
        const BuiltPrompt& built = built_[idx];
        Rng gen = step_stream.split(1 + static_cast<std::uint64_t>(b));
        const auto trace =
            policy_.generate(built.prompt_ids, built.image, sampling, gen, opts_.max_new_tokens);
        if (trace.tokens.empty()) continue;

        Rollout r;
        r.sample_idx = idx;
        r.response = trace.tokens;
        r.response_text = trace.text;
        r.logp_old = trace.logp;
        r.values_old = trace.value;

        const auto ref_logp = response_logps(ref_, built.prompt_ids, built.image, r.response);
        const double terminal =
            scorer_(samples_[idx], built.prompt_text, built.image, r.response_text);
        const std::size_t len = r.response.size();
        r.rewards.resize(len);
        for (std::size_t t = 0; t < len; ++t) {
            const double kl_t = r.logp_old[t] - ref_logp[t];
            r.rewards[t] = -opts_.kl_beta * kl_t;
            r.kl_sum += kl_t;
        }
        r.rewards[len - 1] += terminal;
        r.total_reward = std::accumulate(r.rewards.begin(), r.rewards.end(), 0.0);

        r.adv.resize(len);
        r.returns.resize(len);
        double next_adv = 0.0;
        for (std::size_t t = len; t-- > 0;) {
            const double v_next = (t + 1 < len) ? r.values_old[t + 1] : 0.0;
            const double delta = r.rewards[t] + opts_.gamma * v_next - r.values_old[t];
            next_adv = delta + opts_.gamma * opts_.gae_lambda * next_adv;
            r.adv[t] = next_adv;
            r.returns[t] = next_adv + r.values_old[t];
        }
        rollouts.push_back(std::move(r));
    }
    return rollouts;
}

void PpoTrainer::note_skip(const std::string& why) {
    std::cerr << "warning: ppo step " << (step_ + 1) << ": " << why << "\n";
    consecutive_skips_ += 1;
    if (consecutive_skips_ >= 3) {
        throw std::runtime_error("ppo aborted at step " + std::to_string(step_ + 1) +
                                 " after 3 consecutive failed optimization passes");
    }
}

PpoStepMetrics PpoTrainer::step() {
    PpoStepMetrics out;
    out.step = step_ + 1;
    const Rng step_stream = Rng(opts_.seed).split(static_cast<std::uint64_t>(step_));

    auto rollouts = collect_rollouts(step_stream);
    if (rollouts.empty()) {
        note_skip("no usable rollouts; skipping optimization");
        step_ += 1;
        return out;
    }

    double reward_sum = 0.0;
    double kl_sum = 0.0;
    bool finite = true;
    std::vector<double> all_adv;
    for (const auto& r : rollouts) {
        reward_sum += r.total_reward;
        kl_sum += r.kl_sum;
        for (std::size_t t = 0; t < r.adv.size(); ++t) {
            finite = finite && std::isfinite(r.adv[t]) && std::isfinite(r.returns[t]);
            all_adv.push_back(r.adv[t]);
        }
    }
    out.mean_reward = reward_sum / static_cast<double>(rollouts.size());
    out.kl_total = kl_sum / static_cast<double>(rollouts.size());

    if (!finite) {
        note_skip("non-finite advantage or return; skipping optimization");
        step_ += 1;
        return out;
    }

    whiten(all_adv);
    std::size_t cursor = 0;
    for (auto& r : rollouts) {
        for (double& a : r.adv) a = all_adv[cursor++];
    }

    long clipped_total = 0;
    long tokens_total = 0;
    double value_loss_sum = 0.0;
    double entropy_sum = 0.0;
    int units = 0;
    const int n_roll = static_cast<int>(rollouts.size());
    for (int epoch = 0; epoch < opts_.ppo_epochs; ++epoch) {
        for (int begin = 0; begin < n_roll; begin += opts_.minibatch) {
            const int end = std::min(n_roll, begin + opts_.minibatch);
            const int mb_n = end - begin;
            try {
                policy_opt_.zero_grad();
                value_opt_.zero_grad();
                Tensor mb_loss;
                double mb_value_loss = 0.0;
                double mb_entropy = 0.0;
                int mb_clipped = 0;
                long mb_tokens = 0;
                for (int i = begin; i < end; ++i) {
                    const Rollout& r = rollouts[static_cast<std::size_t>(i)];
                    const BuiltPrompt& built = built_[r.sample_idx];
                    std::vector<int> full = built.prompt_ids;
                    full.insert(full.end(), r.response.begin(), r.response.end());
                    auto fwd = policy_.forward(full, built.image, /*with_values=*/true);

                    const std::int64_t prefix =
                        built.image ? policy_.config().image_prefix_len : 0;
                    const auto p_len = static_cast<std::int64_t>(built.prompt_ids.size());
                    const auto r_len = static_cast<std::int64_t>(r.response.size());
                    const std::int64_t row0 = prefix + p_len - 1;

                    Tensor rows = slice_rows(fwd.logits, row0, row0 + r_len);
                    Tensor new_logp = take_per_row(log_softmax(rows), r.response);
                    int clipped = 0;
                    Tensor surrogate =
                        ppo_surrogate(new_logp, r.logp_old, r.adv, opts_.clip_eps, &clipped);

                    const std::int64_t total_rows = prefix + p_len + r_len;
                    Tensor values =
                        slice_rows(reshape(fwd.values, {total_rows, 1}), row0, row0 + r_len);
                    Tensor targets = Tensor::from_data({r_len, 1}, r.returns);
                    Tensor value_loss = mean(square(sub(values, targets)));
                    Tensor entropy = mean(row_entropy(rows));

                    Tensor seq_loss = add(scale(mean(surrogate), -1.0),
                                          sub(scale(value_loss, opts_.value_coef),
                                              scale(entropy, opts_.entropy_coef)));
                    mb_loss = mb_loss.defined() ? add(mb_loss, seq_loss) : seq_loss;
                    mb_value_loss += value_loss.item();
                    mb_entropy += entropy.item();
                    mb_clipped += clipped;
                    mb_tokens += r_len;
                }
                backward(scale(mb_loss, 1.0 / mb_n));
                policy_opt_.step();
                value_opt_.step();

                clipped_total += mb_clipped;
                tokens_total += mb_tokens;
                value_loss_sum += mb_value_loss / mb_n;
                entropy_sum += mb_entropy / mb_n;
                units += 1;
                consecutive_skips_ = 0;
            } catch (const NumericError& e) {
                tape_clear();
                policy_opt_.zero_grad();
                value_opt_.zero_grad();
                out.skipped_minibatches += 1;
                note_skip(std::string("numeric failure in minibatch (") + e.what() +
                          "); skipping update");
            }
        }
    }

    if (tokens_total > 0) {
        out.clip_fraction = static_cast<double>(clipped_total) / static_cast<double>(tokens_total);
    }
    if (units > 0) {
        out.value_loss = value_loss_sum / units;
        out.entropy = entropy_sum / units;
    }
    step_ += 1;
    return out;
}

PpoResult PpoTrainer::run(RunDir* run_dir) {
    PpoResult result;
    if (run_dir != nullptr && run_dir->stage_done("ppo")) {
        policy_.import_tensors(read_checkpoint(run_dir->checkpoint("ppo_final.mmrl")));
        result.steps = opts_.steps;
        return result;
    }

    const std::uint64_t ref_hash = weight_hash(ref_);

    if (run_dir != nullptr) {
        const std::string state_path = run_dir->checkpoint("ppo_state.mmrl");
        if (std::filesystem::exists(state_path)) {
            TrainerState st = load_trainer_state(state_path, policy_,
                                                 {{"popt", &policy_opt_}, {"vopt", &value_opt_}});
            step_ = st.step;
            run_dir->truncate_metrics_after("ppo", step_);
        }
    }

    int steps_this_run = 0;
    while (step_ < opts_.steps) {
        const auto step_start = std::chrono::steady_clock::now();
        const PpoStepMetrics m = step();
        steps_this_run += 1;
        result.mean_rewards.push_back(m.mean_reward);
        result.kl_totals.push_back(m.kl_total);

        if (run_dir != nullptr) {
            nlohmann::ordered_json row;
            row["stage"] = "ppo";
            row["step"] = m.step;
            row["mean_reward"] = m.mean_reward;
            row["kl_total"] = m.kl_total;
            row["clip_fraction"] = m.clip_fraction;
            row["value_loss"] = m.value_loss;
            row["entropy"] = m.entropy;
            run_dir->append_metrics(row);
            run_dir->append_timing("ppo", m.step, elapsed_ms(step_start));
        }

        const bool interrupt = opts_.interrupt_after >= 0 && steps_this_run >= opts_.interrupt_after;
        const bool periodic = opts_.checkpoint_every > 0 && step_ % opts_.checkpoint_every == 0;
        if (run_dir != nullptr && (interrupt || periodic)) {
            save_trainer_state(run_dir->checkpoint("ppo_state.mmrl"), policy_,
                               {{"popt", &policy_opt_}, {"vopt", &value_opt_}},
                               TrainerState{step_, 0, 0});
        }
        if (interrupt) {
            result.steps = step_;
            result.interrupted = true;
            return result;
        }
    }

    if (weight_hash(ref_) != ref_hash) {
        throw std::runtime_error("ppo: reference model weights changed during training");
    }

    result.steps = step_;
    if (run_dir != nullptr) {
        save_trainer_state(run_dir->checkpoint("ppo_state.mmrl"), policy_,
                           {{"popt", &policy_opt_}, {"vopt", &value_opt_}},
                           TrainerState{step_, 0, 0});
        policy_.save(run_dir->checkpoint("ppo_final.mmrl"));
        run_dir->mark_done("ppo");
    }
    return result;
}

// ---- dpo ----

namespace {

struct DpoPairIds {
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;
    double ref_margin = 0.0;  // ref logp(chosen) - ref logp(rejected)
};

DpoPairIds tokenize_pair(const PreferencePair& pair, const Vocab& vocab) {
    DpoPairIds ids;
    ids.prompt.push_back(Vocab::kBos);
    for (int id : vocab.tokenize(pair.prompt)) ids.prompt.push_back(id);
    ids.chosen = vocab.tokenize(pair.chosen);
    ids.chosen.push_back(Vocab::kEos);
    ids.rejected = vocab.tokenize(pair.rejected);
    ids.rejected.push_back(Vocab::kEos);
    return ids;
}

// Differentiable sum of response-token log-probs under `model`.
Tensor sequence_logp(const PolicyModel& model, const std::vector<int>& prompt_ids,
                     const std::optional<ImageGrid>& image, const std::vector<int>& response) {
    std::vector<int> full = prompt_ids;
    full.insert(full.end(), response.begin(), response.end());
    auto out = model.forward(full, image);
    const std::int64_t prefix = image ? model.config().image_prefix_len : 0;
    const std::int64_t row0 = prefix + static_cast<std::int64_t>(prompt_ids.size()) - 1;
    Tensor rows = slice_rows(out.logits, row0, row0 + static_cast<std::int64_t>(response.size()));
    return sum(take_per_row(log_softmax(rows), response));
}

double logp_sum(const std::vector<double>& logps) {
    return std::accumulate(logps.begin(), logps.end(), 0.0);
}

}  // namespace

DpoPairEval dpo_pair_eval(const PolicyModel& policy, const PolicyModel& ref,
                          const PreferencePair& pair, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("dpo_pair_eval: beta must be positive");
    const auto ids = tokenize_pair(pair, policy.vocab());
    const double policy_margin =
        logp_sum(response_logps(policy, ids.prompt, pair.image, ids.chosen)) -
        logp_sum(response_logps(policy, ids.prompt, pair.image, ids.rejected));
    const double ref_margin = logp_sum(response_logps(ref, ids.prompt, pair.image, ids.chosen)) -
                              logp_sum(response_logps(ref, ids.prompt, pair.image, ids.rejected));
    DpoPairEval eval;
    eval.margin = policy_margin - ref_margin;
    eval.loss = neg_log_sigmoid(beta * eval.margin);
    return eval;
}

DpoResult dpo_train(PolicyModel& policy, const PolicyModel& ref,
                    const std::vector<PreferencePair>& pairs, const DpoOptions& opts,
                    RunDir* run_dir) {
    if (pairs.empty()) throw std::invalid_argument("dpo_train: no pairs");
    if (!(opts.beta > 0.0)) throw std::invalid_argument("dpo_train: beta must be positive");
    if (!(opts.lr > 0.0)) throw std::invalid_argument("dpo_train: lr must be positive");
    if (opts.epochs <= 0) throw std::invalid_argument("dpo_train: epochs must be positive");
    if (opts.batch_size <= 0) throw std::invalid_argument("dpo_train: batch_size must be positive");
    ensure_distinct_models(policy, ref, "dpo");

    const int n = static_cast<int>(pairs.size());
    const int batches_per_epoch = (n + opts.batch_size - 1) / opts.batch_size;

    if (run_dir != nullptr && run_dir->stage_done("dpo")) {
        policy.import_tensors(read_checkpoint(run_dir->checkpoint("dpo_final.mmrl")));
        DpoResult done;
        done.steps = opts.epochs * batches_per_epoch;
        return done;
    }

    const std::uint64_t ref_hash = weight_hash(ref);

    std::vector<DpoPairIds> tokenized;
    tokenized.reserve(pairs.size());
    for (const auto& pair : pairs) {
        auto ids = tokenize_pair(pair, policy.vocab());
        ids.ref_margin = logp_sum(response_logps(ref, ids.prompt, pair.image, ids.chosen)) -
                         logp_sum(response_logps(ref, ids.prompt, pair.image, ids.rejected));
        tokenized.push_back(std::move(ids));
    }

    Adam opt(policy.policy_params(), {.lr = opts.lr});

    TrainerState st;
    if (run_dir != nullptr) {
        const std::string state_path = run_dir->checkpoint("dpo_state.mmrl");
        if (std::filesystem::exists(state_path)) {
            st = load_trainer_state(state_path, policy, {{"opt", &opt}});
            run_dir->truncate_metrics_after("dpo", st.step);
        }
    }

    Rng base(opts.seed);
    DpoResult result;
    result.steps = st.step;
    int steps_this_run = 0;

    for (int epoch = st.epoch; epoch < opts.epochs; ++epoch) {
        const auto order = shuffled_order(pairs.size(), base.split(static_cast<std::uint64_t>(epoch)));

        double epoch_loss_sum = 0.0;
        double epoch_margin_sum = 0.0;
        int epoch_batches = 0;
        const int first_batch = (epoch == st.epoch) ? st.batch_idx : 0;
        for (int b = first_batch; b < batches_per_epoch; ++b) {
            const auto batch_start = std::chrono::steady_clock::now();
            const int begin = b * opts.batch_size;
            const int end = std::min(n, begin + opts.batch_size);
            const int batch_n = end - begin;

            double batch_loss = 0.0;
            double batch_margin = 0.0;
            std::string current_pair = "?";
            try {
                opt.zero_grad();
                for (int i = begin; i < end; ++i) {
                    const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
                    const auto& pair = pairs[idx];
                    const auto& ids = tokenized[idx];
                    current_pair = pair.id;

                    Tensor chosen_logp = sequence_logp(policy, ids.prompt, pair.image, ids.chosen);
                    Tensor rejected_logp =
                        sequence_logp(policy, ids.prompt, pair.image, ids.rejected);
                    Tensor bracket = scale(
                        add_scalar(sub(chosen_logp, rejected_logp), -ids.ref_margin), opts.beta);
                    Tensor loss = scale(log_sigmoid(bracket), -1.0);

                    batch_loss += loss.item() / batch_n;
                    batch_margin +=
                        (chosen_logp.item() - rejected_logp.item() - ids.ref_margin) / batch_n;
                    backward(scale(loss, 1.0 / batch_n));
                }
                opt.step();
            } catch (const NumericError& e) {
                throw std::runtime_error("dpo diverged at step " + std::to_string(st.step + 1) +
                                         " (epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(b) + ", pair " + current_pair +
                                         "): " + e.what());
            }

            st.step += 1;
            steps_this_run += 1;
            epoch_loss_sum += batch_loss;
            epoch_margin_sum += batch_margin;
            epoch_batches += 1;
            result.final_loss = batch_loss;

            if (run_dir != nullptr) {
                nlohmann::ordered_json row;
                row["stage"] = "dpo";
                row["step"] = st.step;
                row["epoch"] = epoch;
                row["loss"] = batch_loss;
                row["margin"] = batch_margin;
                run_dir->append_metrics(row);
                run_dir->append_timing("dpo", st.step, elapsed_ms(batch_start));
            }

            const bool interrupt =
                opts.interrupt_after >= 0 && steps_this_run >= opts.interrupt_after;
            const bool periodic = opts.checkpoint_every > 0 && st.step % opts.checkpoint_every == 0;
            if (run_dir != nullptr && (interrupt || periodic)) {
                TrainerState snap = st;
                snap.epoch = epoch;
                snap.batch_idx = b + 1;
                save_trainer_state(run_dir->checkpoint("dpo_state.mmrl"), policy, {{"opt", &opt}},
                                   snap);
            }
            if (interrupt) {
                if (epoch_batches > 0) {
                    result.epoch_mean_losses.push_back(epoch_loss_sum / epoch_batches);
                    result.epoch_mean_margins.push_back(epoch_margin_sum / epoch_batches);
                }
                result.steps = st.step;
                result.interrupted = true;
                return result;
            }
        }
        if (epoch_batches > 0) {
            result.epoch_mean_losses.push_back(epoch_loss_sum / epoch_batches);
            result.epoch_mean_margins.push_back(epoch_margin_sum / epoch_batches);
        }
    }

    if (weight_hash(ref) != ref_hash) {
        throw std::runtime_error("dpo: reference model weights changed during training");
    }

    result.steps = st.step;
    if (run_dir != nullptr) {
        TrainerState snap = st;
        snap.epoch = opts.epochs;
        snap.batch_idx = 0;
        save_trainer_state(run_dir->checkpoint("dpo_state.mmrl"), policy, {{"opt", &opt}}, snap);
        policy.save(run_dir->checkpoint("dpo_final.mmrl"));
        run_dir->mark_done("dpo");
    }
    return result;
}

}  // namespace prefalign
