#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prefalign/adam.hpp"
#include "prefalign/model.hpp"
#include "prefalign/preference.hpp"
#include "prefalign/sft.hpp"
#include "prefalign/taskgen.hpp"
#include "prefalign/tensor.hpp"

namespace prefalign {

class RunDir;

// FNV-1a over parameter names and raw weight bytes; catches any drift in a
// model that is supposed to stay frozen.
std::uint64_t weight_hash(const PolicyModel& model);

// Teacher-forced log-probability of each response token, gradient-free.
std::vector<double> response_logps(const PolicyModel& model, const std::vector<int>& prompt_ids,
                                   const std::optional<ImageGrid>& image,
                                   const std::vector<int>& response);

// ---- reward model ----

// Policy backbone scored through its scalar value head at the final position
// of [BOS] prompt response [EOS]. A freshly built head is all zeros, so an
// untrained reward model scores every completion exactly 0 and the pairwise
// loss starts at ln 2.
class RewardModel {
public:
    RewardModel(ModelConfig config, std::uint64_t seed);

    // Deep-copies the policy's weights into a fresh backbone.
    static RewardModel from_policy(const PolicyModel& policy);

    PolicyModel& backbone() { return model_; }
    const PolicyModel& backbone() const { return model_; }

    Tensor score_tensor(const std::string& prompt, const std::optional<ImageGrid>& image,
                        const std::string& response) const;
    double score(const std::string& prompt, const std::optional<ImageGrid>& image,
                 const std::string& response) const;

    // Backbone policy parameters plus the value head.
    std::vector<Tensor> trainable_params();

    void save(const std::string& path) const;
    static RewardModel load(const std::string& path);

private:
    PolicyModel model_;
};

// -log sigmoid(score(chosen) - score(rejected)), gradient-free.
double reward_pair_loss(const RewardModel& rm, const PreferencePair& pair);
// Fraction of pairs whose chosen response strictly outscores the rejected one.
double reward_pair_accuracy(const RewardModel& rm, const std::vector<PreferencePair>& pairs);

struct RewardTrainOptions {
    int epochs = 2;
    int batch_size = 8;
    double lr = 1e-4;
    std::uint64_t seed = 0;
    int checkpoint_every = 50;
    int interrupt_after = -1;  // >= 0: stop after that many steps (test hook)
};

struct RewardTrainResult {
    int steps = 0;
    double final_loss = 0.0;
    std::vector<double> epoch_mean_losses;
    std::vector<double> epoch_accuracies;
    bool interrupted = false;
};

RewardTrainResult train_reward(RewardModel& rm, const std::vector<PreferencePair>& pairs,
                               const RewardTrainOptions& opts, RunDir* run_dir = nullptr);

// ---- kl measurement ----

struct KlTrace {
    std::vector<double> per_token;  // logp_policy - logp_ref at each response token
    double total = 0.0;
};

// Sequence-level KL estimate between two models on one response. Identical
// weights give exactly zero.
KlTrace kl_estimate(const PolicyModel& policy, const PolicyModel& ref,
                    const std::vector<int>& prompt_ids, const std::optional<ImageGrid>& image,
                    const std::vector<int>& response);

// Mean total KL across fresh policy samples on n_prompts prompts (cycled from
// `samples`). Prompts whose context is already full contribute nothing.
double measure_kl(const PolicyModel& policy, const PolicyModel& ref,
                  const std::vector<McqSample>& samples, InputSetting setting, int max_new_tokens,
                  std::uint64_t seed, int n_prompts);

// ---- ppo ----

// Terminal reward for one finished rollout.
using RewardScorer = std::function<double(const McqSample& sample, const std::string& prompt,
                                          const std::optional<ImageGrid>& image,
                                          const std::string& response)>;

// Scores rollouts through a frozen reward model; `rm` must outlive the scorer.
RewardScorer make_rm_scorer(const RewardModel& rm);

// Scores rollouts with oracle_response_score against the gold sample. Needs no
// trained reward model, which keeps ablation grids cheap.
RewardScorer make_oracle_scorer();

// In-place normalization to zero mean and unit population std (plus 1e-8 in
// the denominator). Fewer than two values are left untouched.
void whiten(std::vector<double>& values);

struct PpoOptions {
    int steps = 300;
    double lr = 1e-5;
    double value_lr = 1e-3;
    double clip_eps = 0.2;
    double kl_beta = 0.02;
    double gamma = 1.0;
    double gae_lambda = 0.95;
    int ppo_epochs = 4;
    int rollout_batch = 4;
    int minibatch = 2;  // sequences per optimizer update
    int max_new_tokens = 24;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    InputSetting setting = InputSetting::text_image_caption;
    std::uint64_t seed = 0;
    int checkpoint_every = 50;
    int interrupt_after = -1;  // >= 0: stop run() after that many steps (test hook)

    void validate() const;  // throws std::invalid_argument naming the field
};

struct PpoStepMetrics {
    int step = 0;
    double mean_reward = 0.0;  // shaped return per rollout: terminal + kl penalties
    double kl_total = 0.0;     // mean over rollouts of sum(logp_old - logp_ref)
    double clip_fraction = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    int skipped_minibatches = 0;
};

struct PpoResult {
    int steps = 0;  // total steps recorded, counting resumed work
    std::vector<double> mean_rewards;  // steps executed by this call
    std::vector<double> kl_totals;
    bool interrupted = false;
};

// Clipped-surrogate PPO with GAE over per-token KL penalties against a frozen
// reference plus a terminal reward. Rollouts always sample the full
// temperature-1 distribution, so the recorded log-probs are exactly what the
// surrogate ratio compares against.
class PpoTrainer {
public:
    // `ref` must not share weight storage with `policy`.
    PpoTrainer(PolicyModel& policy, const PolicyModel& ref, RewardScorer scorer,
               std::vector<McqSample> samples, PpoOptions opts);

    PpoStepMetrics step();
    PpoResult run(RunDir* run_dir = nullptr);

    int steps_done() const { return step_; }

private:
    struct Rollout {
        std::size_t sample_idx = 0;
        std::vector<int> response;
        std::string response_text;
        std::vector<double> logp_old;
        std::vector<double> values_old;
        std::vector<double> rewards;
        std::vector<double> adv;
        std::vector<double> returns;
        double total_reward = 0.0;
        double kl_sum = 0.0;
    };

    std::vector<Rollout> collect_rollouts(const Rng& step_stream);
    void note_skip(const std::string& why);

    PolicyModel& policy_;
    const PolicyModel& ref_;
    RewardScorer scorer_;
    std::vector<McqSample> samples_;
    std::vector<BuiltPrompt> built_;
    PpoOptions opts_;
    Adam policy_opt_;
    Adam value_opt_;
    int step_ = 0;
    int consecutive_skips_ = 0;
};

// ---- dpo ----

struct DpoOptions {
    double beta = 0.1;
    double lr = 5e-5;
    int epochs = 1;
    int batch_size = 8;
    std::uint64_t seed = 0;
    int checkpoint_every = 100;
    int interrupt_after = -1;  // >= 0: stop after that many steps (test hook)
};

struct DpoPairEval {
    double loss = 0.0;
    double margin = 0.0;  // (logp_c - logp_r) - (ref_c - ref_r), before beta
};

// Gradient-free loss and margin of one pair. With policy weights equal to the
// reference the loss is exactly ln 2.
DpoPairEval dpo_pair_eval(const PolicyModel& policy, const PolicyModel& ref,
                          const PreferencePair& pair, double beta);

struct DpoResult {
    int steps = 0;
    double final_loss = 0.0;
    std::vector<double> epoch_mean_losses;
    std::vector<double> epoch_mean_margins;
    bool interrupted = false;
};

DpoResult dpo_train(PolicyModel& policy, const PolicyModel& ref,
                    const std::vector<PreferencePair>& pairs, const DpoOptions& opts,
                    RunDir* run_dir = nullptr);

}  // namespace prefalign
