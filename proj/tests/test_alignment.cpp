#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "prefalign/alignment.hpp"
#include "prefalign/rng.hpp"
#include "prefalign/rundir.hpp"
#include "prefalign/sft.hpp"
#include "prefalign/taskgen.hpp"

using namespace prefalign;

namespace {

ModelConfig tiny_config() {
    ModelConfig config;
    config.n_layers = 1;
    config.d_model = 32;
    config.n_heads = 2;
    config.d_ff = 64;
    config.max_seq_len = 160;
    config.image_prefix_len = 4;
    return config;
}

ModelConfig micro_config() {
    ModelConfig config = tiny_config();
    config.d_model = 16;
    config.d_ff = 32;
    return config;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::string fresh_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("prefalign_align_" + tag);
    std::filesystem::remove_all(p);
    return p.string();
}

PolicyModel copy_of(const PolicyModel& model) {
    PolicyModel out(model.config(), 0);
    out.copy_weights_from(model);
    return out;
}

// Pairs whose chosen side carries the full "Answer: X." template while the
// rejected side is only the bare explanation, so a surface feature separates
// them perfectly.
std::vector<PreferencePair> separable_pairs(int n, InputSetting setting, std::uint64_t seed = 11) {
    auto samples = generate_dataset(seed, n);
    Vocab vocab;
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < n; ++i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        auto built = build_prompt(s, vocab, setting);
        PreferencePair p;
        p.id = s.id + "/r2";
        p.prompt = built.prompt_text;
        p.image = built.image;
        p.chosen = built.target_text;
        p.rejected = s.explanation;
        p.rejected_rank = 2;
        p.chosen_source = "seed-0";
        p.rejected_source = "seed-1";
        pairs.push_back(std::move(p));
    }
    return pairs;
}

double mean_of(const std::vector<double>& xs) {
    double total = 0.0;
    for (double x : xs) total += x;
    return total / static_cast<double>(xs.size());
}

}  // namespace

TEST_CASE("weight_hash separates equal and nudged models") {
    PolicyModel a(micro_config(), 4);
    PolicyModel b = copy_of(a);
    CHECK(weight_hash(a) == weight_hash(b));

    b.named_params()[0].second.mutable_data()[0] += 1e-12;
    CHECK(weight_hash(a) != weight_hash(b));

    PolicyModel c(micro_config(), 5);
    CHECK(weight_hash(a) != weight_hash(c));
}

TEST_CASE("untrained reward model scores zero and pair loss is exactly ln 2") {
    RewardModel rm(tiny_config(), 3);
    auto pairs = separable_pairs(4, InputSetting::text_image_caption);
    for (const auto& pair : pairs) {
        CHECK(rm.score(pair.prompt, pair.image, pair.chosen) == 0.0);
        CHECK(rm.score(pair.prompt, pair.image, pair.rejected) == 0.0);
        CHECK(std::abs(reward_pair_loss(rm, pair) - std::log(2.0)) <= 1e-9);
        CHECK(reward_pair_loss(rm, pair) > 0.0);
    }
    CHECK(reward_pair_accuracy(rm, pairs) == 0.0);
}

TEST_CASE("reward scores are deterministic and finite, margins antisymmetric") {
    RewardModel rm(tiny_config(), 6);
    // Wake the value head so scores are nonzero.
    for (auto& [name, tensor] : rm.backbone().named_params()) {
        if (name == "value_head.w") {
            Rng rng(9);
            for (double& w : tensor.mutable_data()) w = 0.1 * rng.normal();
        }
    }
    auto pairs = separable_pairs(6, InputSetting::text_caption);
    for (const auto& pair : pairs) {
        const double chosen = rm.score(pair.prompt, pair.image, pair.chosen);
        const double rejected = rm.score(pair.prompt, pair.image, pair.rejected);
        CHECK(std::isfinite(chosen));
        CHECK(std::isfinite(rejected));
        CHECK(rm.score(pair.prompt, pair.image, pair.chosen) == chosen);

        const double margin = chosen - rejected;
        const double swapped = rejected - chosen;
        CHECK(swapped == -margin);
        CHECK(reward_pair_loss(rm, pair) > 0.0);
    }
}

TEST_CASE("reward training separates answer-bearing responses") {
    RewardModel rm(tiny_config(), 1);
    auto pairs = separable_pairs(24, InputSetting::text_caption);

    RewardTrainOptions opts;
    opts.epochs = 3;
    opts.batch_size = 8;
    opts.lr = 5e-3;
    opts.seed = 2;
    auto result = train_reward(rm, pairs, opts);

    CHECK(result.steps == 9);
    CHECK(result.epoch_accuracies.size() == 3);
    CHECK(result.epoch_mean_losses.front() > result.epoch_mean_losses.back());
    CHECK(result.final_loss > 0.0);
    CHECK(reward_pair_accuracy(rm, pairs) >= 0.95);
}

TEST_CASE("reward model save/load round-trips scores bitwise") {
    RewardModel rm(micro_config(), 8);
    auto pairs = separable_pairs(6, InputSetting::text_caption);
    RewardTrainOptions opts;
    opts.epochs = 1;
    opts.batch_size = 6;
    opts.lr = 1e-3;
    train_reward(rm, pairs, opts);

    const std::string path = fresh_dir("rm_roundtrip") + ".mmrl";
    rm.save(path);
    RewardModel loaded = RewardModel::load(path);
    CHECK(weight_hash(rm.backbone()) == weight_hash(loaded.backbone()));
    for (const auto& pair : pairs) {
        CHECK(loaded.score(pair.prompt, pair.image, pair.chosen) ==
              rm.score(pair.prompt, pair.image, pair.chosen));
    }
    std::filesystem::remove(path);
}

TEST_CASE("reward training reports the offending pair when numerics blow up") {
    RewardModel rm(micro_config(), 2);
    for (auto& [name, tensor] : rm.backbone().named_params()) {
        if (name == "layers.0.attn.wq") {
            tensor.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
        }
    }
    auto pairs = separable_pairs(4, InputSetting::text_caption);
    RewardTrainOptions opts;
    opts.epochs = 1;
    opts.batch_size = 4;
    try {
        train_reward(rm, pairs, opts);
        FAIL("expected divergence");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("reward training diverged") != std::string::npos);
        CHECK(msg.find("pair q") != std::string::npos);
    }
}

TEST_CASE("kl of a model against itself is exactly zero") {
    PolicyModel policy(tiny_config(), 12);
    PolicyModel twin = copy_of(policy);
    auto samples = generate_dataset(21, 2);
    auto built = build_prompt(samples[0], policy.vocab(), InputSetting::text_image_caption);

    Rng rng(3);
    const SamplingParams sampling{.temperature = 1.0, .top_k = 0, .greedy = false};
    auto trace = policy.generate(built.prompt_ids, built.image, sampling, rng, 16);
    REQUIRE(!trace.tokens.empty());

    auto self_trace = kl_estimate(policy, policy, built.prompt_ids, built.image, trace.tokens);
    CHECK(self_trace.total == 0.0);
    auto twin_trace = kl_estimate(policy, twin, built.prompt_ids, built.image, trace.tokens);
    CHECK(twin_trace.total == 0.0);
    for (double v : twin_trace.per_token) CHECK(v == 0.0);

    // A genuinely different model shows nonzero, finite divergence.
    PolicyModel other(tiny_config(), 13);
    // Different seeds share the zero-init unembedding, so nudge it.
    other.named_params()[0].second.mutable_data()[0] += 0.5;
    auto diff = kl_estimate(policy, other, built.prompt_ids, built.image, trace.tokens);
    CHECK(std::isfinite(diff.total));

    CHECK(measure_kl(policy, twin, samples, InputSetting::text_image_caption, 8, 7, 3) == 0.0);
    const double kl_a = measure_kl(policy, other, samples, InputSetting::text_image_caption, 8, 7, 3);
    const double kl_b = measure_kl(policy, other, samples, InputSetting::text_image_caption, 8, 7, 3);
    CHECK(kl_a == kl_b);
    CHECK(std::isfinite(kl_a));
}

TEST_CASE("generation log-probs and values match a teacher-forced forward bitwise") {
    PolicyModel policy(tiny_config(), 17);
    auto samples = generate_dataset(5, 1);
    auto built = build_prompt(samples[0], policy.vocab(), InputSetting::text_image_caption);

    Rng rng(4);
    const SamplingParams sampling{.temperature = 1.0, .top_k = 0, .greedy = false};
    auto trace = policy.generate(built.prompt_ids, built.image, sampling, rng, 24);
    REQUIRE(!trace.tokens.empty());

    auto replayed = response_logps(policy, built.prompt_ids, built.image, trace.tokens);
    REQUIRE(replayed.size() == trace.logp.size());
    for (std::size_t i = 0; i < replayed.size(); ++i) CHECK(replayed[i] == trace.logp[i]);

    NoGradGuard guard;
    std::vector<int> full = built.prompt_ids;
    full.insert(full.end(), trace.tokens.begin(), trace.tokens.end());
    auto out = policy.forward(full, built.image, /*with_values=*/true);
    const auto prefix = static_cast<std::size_t>(policy.config().image_prefix_len);
    for (std::size_t j = 0; j < trace.tokens.size(); ++j) {
        const std::size_t row = prefix + built.prompt_ids.size() - 1 + j;
        CHECK(out.values.data()[row] == trace.value[j]);
    }
}

TEST_CASE("whitening centers and scales advantage batches") {
    std::vector<double> xs = {3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0, 6.0};
    whiten(xs);
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    const double stddev = std::sqrt(var / static_cast<double>(xs.size()));
    CHECK(std::abs(mean) <= 1e-9);
    CHECK(std::abs(stddev - 1.0) <= 1e-6);

    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> ys;
        const int n = 2 + static_cast<int>(rng.below(40));
        for (int i = 0; i < n; ++i) ys.push_back(50.0 * rng.normal() - 3.0);
        whiten(ys);
        double m = 0.0;
        for (double y : ys) m += y;
        CHECK(std::abs(m / n) <= 1e-9);
    }

    std::vector<double> constant(5, 2.5);
    whiten(constant);
    for (double v : constant) CHECK(v == 0.0);

    std::vector<double> single = {42.0};
    whiten(single);
    CHECK(single[0] == 42.0);
}

TEST_CASE("first optimization pass after a rollout never clips") {
    PolicyModel policy(micro_config(), 21);
    PolicyModel ref = copy_of(policy);
    auto samples = generate_dataset(9, 3);

    PpoOptions opts;
    opts.steps = 1;
    opts.ppo_epochs = 1;
    opts.rollout_batch = 3;
    opts.minibatch = 3;
    opts.max_new_tokens = 6;
    opts.lr = 1e-3;
    opts.seed = 4;
    auto scorer = [](const McqSample&, const std::string&, const std::optional<ImageGrid>&,
                     const std::string& response) {
        return static_cast<double>(response.size());
    };
    PpoTrainer trainer(policy, ref, scorer, samples, opts);
    auto metrics = trainer.step();
    CHECK(metrics.step == 1);
    CHECK(metrics.clip_fraction == 0.0);
    CHECK(metrics.skipped_minibatches == 0);
    CHECK(std::isfinite(metrics.value_loss));
    CHECK(std::isfinite(metrics.entropy));
}

TEST_CASE("ppo steps leave the reference untouched and report finite metrics") {
    PolicyModel policy(micro_config(), 25);
    PolicyModel ref = copy_of(policy);
    const std::uint64_t ref_hash = weight_hash(ref);
    auto samples = generate_dataset(14, 4);

    PpoOptions opts;
    opts.steps = 3;
    opts.ppo_epochs = 2;
    opts.rollout_batch = 2;
    opts.minibatch = 2;
    opts.max_new_tokens = 5;
    opts.lr = 1e-3;
    opts.seed = 8;
    auto scorer = [](const McqSample&, const std::string&, const std::optional<ImageGrid>&,
                     const std::string& response) {
        return response.find('1') != std::string::npos ? 1.0 : 0.0;
    };
    PpoTrainer trainer(policy, ref, scorer, samples, opts);
    auto result = trainer.run();
    CHECK(result.steps == 3);
    CHECK(trainer.steps_done() == 3);
    CHECK(result.mean_rewards.size() == 3);
    CHECK(result.kl_totals.size() == 3);
    for (double r : result.mean_rewards) CHECK(std::isfinite(r));
    for (double k : result.kl_totals) CHECK(std::isfinite(k));
    CHECK(weight_hash(ref) == ref_hash);
    CHECK(weight_hash(policy) != ref_hash);
}

TEST_CASE("ppo rejects a reference that aliases the policy and bad options") {
    PolicyModel policy(micro_config(), 30);
    auto samples = generate_dataset(2, 2);
    auto scorer = [](const McqSample&, const std::string&, const std::optional<ImageGrid>&,
                     const std::string&) { return 0.0; };

    CHECK_THROWS_AS(PpoTrainer(policy, policy, scorer, samples, PpoOptions{}),
                    std::invalid_argument);

    PolicyModel ref = copy_of(policy);
    PpoOptions bad;
    bad.clip_eps = 1.5;
    CHECK_THROWS_AS(PpoTrainer(policy, ref, scorer, samples, bad), std::invalid_argument);
    bad = PpoOptions{};
    bad.gae_lambda = -0.1;
    CHECK_THROWS_AS(PpoTrainer(policy, ref, scorer, samples, bad), std::invalid_argument);
    bad = PpoOptions{};
    bad.minibatch = 0;
    CHECK_THROWS_AS(PpoTrainer(policy, ref, scorer, samples, bad), std::invalid_argument);
    bad = PpoOptions{};
    bad.kl_beta = -0.01;
    CHECK_THROWS_AS(PpoTrainer(policy, ref, scorer, samples, bad), std::invalid_argument);

    CHECK_THROWS_AS(PpoTrainer(policy, ref, RewardScorer{}, samples, PpoOptions{}),
                    std::invalid_argument);
    CHECK_THROWS_AS(PpoTrainer(policy, ref, scorer, {}, PpoOptions{}), std::invalid_argument);
}

TEST_CASE("non-finite rewards skip optimization and abort after three strikes") {
    PolicyModel policy(micro_config(), 33);
    PolicyModel ref = copy_of(policy);
    const std::uint64_t start_hash = weight_hash(policy);
    auto samples = generate_dataset(6, 2);

    PpoOptions opts;
    opts.steps = 10;
    opts.rollout_batch = 2;
    opts.max_new_tokens = 3;
    opts.seed = 1;
    auto scorer = [](const McqSample&, const std::string&, const std::optional<ImageGrid>&,
                     const std::string&) { return std::numeric_limits<double>::quiet_NaN(); };
    PpoTrainer trainer(policy, ref, scorer, samples, opts);

    trainer.step();
    CHECK(weight_hash(policy) == start_hash);
    trainer.step();
    CHECK(weight_hash(policy) == start_hash);
    CHECK_THROWS_AS(trainer.step(), std::runtime_error);
    CHECK(weight_hash(policy) == start_hash);
}

TEST_CASE("ppo drives a one-token bandit onto the rewarded piece") {
    ModelConfig config = micro_config();
    PolicyModel policy(config, 40);
    PolicyModel ref = copy_of(policy);
    auto samples = generate_dataset(3, 1);
    Vocab vocab;
    const auto target = vocab.tokenize("7");
    REQUIRE(target.size() == 1);

    PpoOptions opts;
    opts.steps = 250;
    opts.lr = 1e-2;
    opts.value_lr = 1e-2;
    opts.kl_beta = 0.0;
    opts.ppo_epochs = 2;
    opts.rollout_batch = 8;
    opts.minibatch = 4;
    opts.max_new_tokens = 1;
    opts.entropy_coef = 0.0;
    opts.seed = 12;
    auto scorer = [](const McqSample&, const std::string&, const std::optional<ImageGrid>&,
                     const std::string& response) { return response == "7" ? 1.0 : 0.0; };
    PpoTrainer trainer(policy, ref, scorer, samples, opts);
    auto result = trainer.run();
    CHECK(result.steps == 250);

    NoGradGuard guard;
    auto built = build_prompt(samples[0], policy.vocab(), InputSetting::text_image_caption);
    auto out = policy.forward(built.prompt_ids, built.image);
    Tensor probs = softmax(out.logits);
    const auto row = static_cast<std::int64_t>(config.image_prefix_len) +
                     static_cast<std::int64_t>(built.prompt_ids.size()) - 1;
    CHECK(probs.at(row, target[0]) > 0.9);

    const double late = mean_of({result.mean_rewards.end() - 25, result.mean_rewards.end()});
    const double early = mean_of({result.mean_rewards.begin(), result.mean_rewards.begin() + 25});
    CHECK(late > early);
}

TEST_CASE("interrupted ppo resumes bit-exactly") {
    auto samples = generate_dataset(19, 4);
    auto scorer = [](const McqSample&, const std::string&, const std::optional<ImageGrid>&,
                     const std::string& response) {
        return response.find("J") != std::string::npos ? 1.0 : 0.1;
    };
    PpoOptions opts;
    opts.steps = 6;
    opts.ppo_epochs = 1;
    opts.rollout_batch = 2;
    opts.minibatch = 1;
    opts.max_new_tokens = 4;
    opts.lr = 1e-3;
    opts.seed = 3;
    opts.checkpoint_every = 100;
    RunConfig config;

    const std::string dir_a = fresh_dir("ppo_full");
    PolicyModel policy_a(micro_config(), 50);
    PolicyModel ref_a = copy_of(policy_a);
    {
        RunDir run(dir_a, config);
        PpoTrainer trainer(policy_a, ref_a, scorer, samples, opts);
        auto result = trainer.run(&run);
        CHECK(result.steps == 6);
        CHECK_FALSE(result.interrupted);
    }

    const std::string dir_b = fresh_dir("ppo_resumed");
    {
        PolicyModel policy(micro_config(), 50);
        PolicyModel ref = copy_of(policy);
        RunDir run(dir_b, config);
        PpoOptions interrupted = opts;
        interrupted.interrupt_after = 3;
        PpoTrainer trainer(policy, ref, scorer, samples, interrupted);
        auto result = trainer.run(&run);
        CHECK(result.interrupted);
        CHECK(result.steps == 3);
    }
    PolicyModel policy_b(micro_config(), 99);  // resume restores real weights from the state file
    {
        PolicyModel ref = copy_of(PolicyModel(micro_config(), 50));
        RunDir run(dir_b, config);
        PpoTrainer trainer(policy_b, ref, scorer, samples, opts);
        auto result = trainer.run(&run);
        CHECK(result.steps == 6);
        CHECK_FALSE(result.interrupted);
    }

    CHECK(slurp(dir_a + "/metrics.jsonl") == slurp(dir_b + "/metrics.jsonl"));
    CHECK(slurp(dir_a + "/checkpoints/ppo_final.mmrl") ==
          slurp(dir_b + "/checkpoints/ppo_final.mmrl"));
    CHECK(slurp(dir_a + "/checkpoints/ppo_state.mmrl") ==
          slurp(dir_b + "/checkpoints/ppo_state.mmrl"));
    CHECK(weight_hash(policy_a) == weight_hash(policy_b));

    // A finished stage is not retrained; the stored weights are restored.
    PolicyModel policy_c(micro_config(), 123);
    {
        PolicyModel ref = copy_of(PolicyModel(micro_config(), 50));
        RunDir run(dir_a, config);
        PpoTrainer trainer(policy_c, ref, scorer, samples, opts);
        auto result = trainer.run(&run);
        CHECK(result.steps == 6);
    }
    CHECK(weight_hash(policy_c) == weight_hash(policy_a));

    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}

TEST_CASE("interrupted reward training resumes bit-exactly") {
    auto pairs = separable_pairs(12, InputSetting::text_caption, 23);
    RewardTrainOptions opts;
    opts.epochs = 2;
    opts.batch_size = 4;
    opts.lr = 1e-3;
    opts.seed = 6;
    opts.checkpoint_every = 100;
    RunConfig config;

    const std::string dir_a = fresh_dir("rm_full");
    RewardModel rm_a(micro_config(), 60);
    {
        RunDir run(dir_a, config);
        auto result = train_reward(rm_a, pairs, opts, &run);
        CHECK(result.steps == 6);
    }

    const std::string dir_b = fresh_dir("rm_resumed");
    {
        RewardModel rm(micro_config(), 60);
        RunDir run(dir_b, config);
        RewardTrainOptions interrupted = opts;
        interrupted.interrupt_after = 4;
        auto result = train_reward(rm, pairs, interrupted, &run);
        CHECK(result.interrupted);
        CHECK(result.steps == 4);
    }
    RewardModel rm_b(micro_config(), 61);
    {
        RunDir run(dir_b, config);
        auto result = train_reward(rm_b, pairs, opts, &run);
        CHECK(result.steps == 6);
        CHECK_FALSE(result.interrupted);
    }

    CHECK(slurp(dir_a + "/metrics.jsonl") == slurp(dir_b + "/metrics.jsonl"));
    CHECK(slurp(dir_a + "/checkpoints/rm_final.mmrl") ==
          slurp(dir_b + "/checkpoints/rm_final.mmrl"));
    CHECK(weight_hash(rm_a.backbone()) == weight_hash(rm_b.backbone()));

    RewardModel rm_c(micro_config(), 62);
    {
        RunDir run(dir_a, config);
        auto result = train_reward(rm_c, pairs, opts, &run);
        CHECK(result.steps == 6);
    }
    CHECK(weight_hash(rm_c.backbone()) == weight_hash(rm_a.backbone()));

    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}

TEST_CASE("dpo at the reference point scores exactly ln 2") {
    PolicyModel ref(tiny_config(), 70);
    PolicyModel policy = copy_of(ref);
    auto pairs = separable_pairs(4, InputSetting::text_caption, 29);
    for (const auto& pair : pairs) {
        auto eval = dpo_pair_eval(policy, ref, pair, 0.1);
        CHECK(eval.margin == 0.0);
        CHECK(std::abs(eval.loss - std::log(2.0)) <= 1e-9);
    }
    CHECK_THROWS_AS(dpo_pair_eval(policy, ref, pairs[0], 0.0), std::invalid_argument);
}

TEST_CASE("dpo margins are antisymmetric under pair swaps") {
    PolicyModel ref(tiny_config(), 72);
    PolicyModel policy(tiny_config(), 73);
    policy.named_params()[0].second.mutable_data()[1] += 0.3;
    auto pairs = separable_pairs(5, InputSetting::text_caption, 31);
    for (const auto& pair : pairs) {
        auto eval = dpo_pair_eval(policy, ref, pair, 0.2);
        PreferencePair swapped = pair;
        std::swap(swapped.chosen, swapped.rejected);
        auto eval_swapped = dpo_pair_eval(policy, ref, swapped, 0.2);
        CHECK(eval_swapped.margin == -eval.margin);
        CHECK(eval.loss > 0.0);
        CHECK(eval_swapped.loss > 0.0);
    }
}

TEST_CASE("dpo training lifts the chosen margin above the reference") {
    PolicyModel ref(tiny_config(), 75);
    PolicyModel policy = copy_of(ref);
    auto pairs = separable_pairs(12, InputSetting::text_caption, 37);

    DpoOptions opts;
    opts.beta = 0.2;
    opts.lr = 2e-3;
    opts.epochs = 3;
    opts.batch_size = 6;
    opts.seed = 9;
    auto result = dpo_train(policy, ref, pairs, opts);

    CHECK(result.steps == 6);
    CHECK(result.epoch_mean_margins.size() == 3);
    CHECK(result.epoch_mean_margins.back() > result.epoch_mean_margins.front());
    CHECK(result.epoch_mean_losses.back() < std::log(2.0));

    double swapped_mean = 0.0;
    double straight_mean = 0.0;
    for (const auto& pair : pairs) {
        auto eval = dpo_pair_eval(policy, ref, pair, opts.beta);
        straight_mean += eval.margin;
        PreferencePair swapped = pair;
        std::swap(swapped.chosen, swapped.rejected);
        swapped_mean += dpo_pair_eval(policy, ref, swapped, opts.beta).margin;
    }
    CHECK(straight_mean > 0.0);
    CHECK(swapped_mean < 0.0);
    CHECK(swapped_mean == doctest::Approx(-straight_mean).epsilon(1e-12));

    // The frozen side never moves.
    CHECK(weight_hash(ref) != weight_hash(policy));
}

TEST_CASE("dpo validates inputs and reports diverging pairs") {
    PolicyModel ref(micro_config(), 80);
    PolicyModel policy = copy_of(ref);
    auto pairs = separable_pairs(4, InputSetting::text_caption, 41);

    CHECK_THROWS_AS(dpo_train(policy, policy, pairs, DpoOptions{}), std::invalid_argument);
    DpoOptions bad;
    bad.beta = 0.0;
    CHECK_THROWS_AS(dpo_train(policy, ref, pairs, bad), std::invalid_argument);
    CHECK_THROWS_AS(dpo_train(policy, ref, {}, DpoOptions{}), std::invalid_argument);

    for (auto& [name, tensor] : policy.named_params()) {
        if (name == "layers.0.attn.wq") {
            tensor.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
        }
    }
    try {
        dpo_train(policy, ref, pairs, DpoOptions{});
        FAIL("expected divergence");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("dpo diverged") != std::string::npos);
        CHECK(msg.find("pair q") != std::string::npos);
    }
}

TEST_CASE("interrupted dpo resumes bit-exactly") {
    auto pairs = separable_pairs(8, InputSetting::text_caption, 43);
    DpoOptions opts;
    opts.beta = 0.1;
    opts.lr = 1e-3;
    opts.epochs = 2;
    opts.batch_size = 4;
    opts.seed = 14;
    opts.checkpoint_every = 100;
    RunConfig config;

    const std::string dir_a = fresh_dir("dpo_full");
    PolicyModel policy_a(micro_config(), 90);
    {
        PolicyModel ref = copy_of(policy_a);
        RunDir run(dir_a, config);
        auto result = dpo_train(policy_a, ref, pairs, opts, &run);
        CHECK(result.steps == 4);
    }

    const std::string dir_b = fresh_dir("dpo_resumed");
    {
        PolicyModel policy(micro_config(), 90);
        PolicyModel ref = copy_of(policy);
        RunDir run(dir_b, config);
        DpoOptions interrupted = opts;
        interrupted.interrupt_after = 3;
        auto result = dpo_train(policy, ref, pairs, interrupted, &run);
        CHECK(result.interrupted);
        CHECK(result.steps == 3);
    }
    PolicyModel policy_b(micro_config(), 91);
    {
        PolicyModel ref = copy_of(PolicyModel(micro_config(), 90));
        RunDir run(dir_b, config);
        auto result = dpo_train(policy_b, ref, pairs, opts, &run);
        CHECK(result.steps == 4);
        CHECK_FALSE(result.interrupted);
    }

    CHECK(slurp(dir_a + "/metrics.jsonl") == slurp(dir_b + "/metrics.jsonl"));
    CHECK(slurp(dir_a + "/checkpoints/dpo_final.mmrl") ==
          slurp(dir_b + "/checkpoints/dpo_final.mmrl"));
    CHECK(weight_hash(policy_a) == weight_hash(policy_b));

    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}

TEST_CASE("rm scorer wraps reward scores for ppo") {
    RewardModel rm(micro_config(), 95);
    for (auto& [name, tensor] : rm.backbone().named_params()) {
        if (name == "value_head.w") {
            Rng rng(5);
            for (double& w : tensor.mutable_data()) w = 0.1 * rng.normal();
        }
    }
    auto scorer = make_rm_scorer(rm);
    auto samples = generate_dataset(47, 1);
    auto built = build_prompt(samples[0], rm.backbone().vocab(), InputSetting::text_image_caption);
    const double direct = rm.score(built.prompt_text, built.image, "Answer: A.");
    CHECK(scorer(samples[0], built.prompt_text, built.image, "Answer: A.") == direct);
    CHECK(direct != 0.0);
}
