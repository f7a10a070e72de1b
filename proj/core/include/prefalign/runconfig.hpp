#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefalign/model.hpp"

namespace prefalign {

// Full pipeline configuration. Precedence: built-in defaults, then the config
// file, then --set overrides. Unknown keys are rejected with their full path
// so typos never silently fall back to defaults.
struct RunConfig {
    struct Data {
        std::uint64_t seed = 1;
        int n = 600;
        double ratio = 0.7;
    } data;

    ModelConfig model;  // defaults live in ModelConfig itself

    struct Sft {
        int epochs = 4;
        int batch_size = 8;
        double lr = 3e-4;
        std::string setting = "TEXT_IMAGE_CAPTION";
        std::uint64_t seed = 0;
        int checkpoint_every = 50;  // optimizer steps between state checkpoints
    } sft;

    struct Preference {
        int k = 5;
        std::string ranker = "oracle";  // oracle | external
        std::string endpoint;           // http://host:port/path for external
        int retries = 2;
        int concurrency = 4;
        int n_prompts = 100;            // prompts drawn from the train split
        double temperature = 0.8;
        int top_k = 20;
        int max_new_tokens = 24;
        std::uint64_t seed = 0;
    } preference;

    struct Reward {
        double lr = 1e-3;
        int epochs = 3;
        int batch_size = 8;
        std::uint64_t seed = 0;
    } reward;

    struct Ppo {
        int steps = 300;
        double lr = 1e-5;
        double value_lr = 1e-3;
        double clip_eps = 0.2;
        double kl_beta = 0.02;
        double gamma = 1.0;
        double gae_lambda = 0.95;
        int ppo_epochs = 4;
        int rollout_batch = 4;
        int minibatch = 2;
        int max_new_tokens = 24;
        double entropy_coef = 0.01;
        double value_coef = 0.5;
        std::uint64_t seed = 0;
        int checkpoint_every = 50;
    } ppo;

    struct Dpo {
        double beta = 0.1;
        double lr = 5e-5;
        int epochs = 1;
        int batch_size = 8;
        std::uint64_t seed = 0;
        int checkpoint_every = 100;
    } dpo;

    struct Eval {
        std::vector<std::string> settings = {"TEXT_IMAGE", "TEXT_CAPTION", "TEXT_IMAGE_CAPTION"};
        std::vector<std::uint64_t> seeds = {0, 1, 2};
        std::string alignment = "dpo";  // aligned grid cells: dpo | ppo | none
        int max_new_tokens = 16;
    } eval;

    void validate() const;  // throws std::invalid_argument naming the key path

    nlohmann::ordered_json to_json() const;
    static RunConfig from_json(const nlohmann::ordered_json& j);  // strict keys
};

// defaults -> file (optional) -> --set overrides, then validate.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);
RunConfig config_from_text(const std::string& text, const std::vector<std::string>& overrides,
                           const std::string& origin);

// Sorted list of dotted key paths whose values differ between the two configs.
std::vector<std::string> config_diff(const nlohmann::ordered_json& a,
                                     const nlohmann::ordered_json& b);

}  // namespace prefalign
