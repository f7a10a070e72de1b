#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prefalign/rng.hpp"
#include "prefalign/tensor.hpp"
#include "prefalign/vocab.hpp"

namespace prefalign {

struct NamedTensor;  // checkpoint.hpp

// 8x8 grid of floats in [0,1], row-major. Validation happens at use sites.
using ImageGrid = std::vector<double>;
constexpr std::size_t kImageCells = 64;

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;  // 0 = take the fixed task vocabulary's size
    int max_seq_len = 160;
    int image_prefix_len = 4;
    int lora_rank = 0;       // 0 = no adapters (full fine-tuning)
    double lora_alpha = 8.0;

    void validate() const;  // throws std::invalid_argument on bad combinations
};

// Low-rank adapter on one projection matrix: effective update (alpha/r)*B*A
// with A (r, d_in) and B (d_out, r). B starts at zero, so an adapted layer is
// exactly the base layer until training moves B.
struct LoraAdapter {
    std::string target;
    int rank = 0;
    double alpha = 0.0;
    Tensor a;
    Tensor b;
};

struct SamplingParams {
    double temperature = 0.8;
    int top_k = 20;       // 0 = full distribution
    bool greedy = false;  // argmax chain; rng unused
};

struct ForwardResult {
    Tensor logits;  // (P + T, vocab_size); rows for image-prefix positions included
    Tensor values;  // (P + T,) when with_values was requested, else undefined
};

struct GenerationTrace {
    std::vector<int> tokens;    // response token ids; includes EOS when it fired
    std::string text;           // detokenized (specials rendered empty)
    bool hit_eos = false;
    std::vector<double> logp;   // log-prob of each emitted token under the full
                                // temperature-1 softmax (what training optimizes)
    std::vector<double> value;  // value-head output at each emitting position
};

// Tiny pre-LN causal decoder with an image-prefix channel, optional LoRA
// adapters on the attention projections, and a scalar value head for PPO.
class PolicyModel {
public:
    PolicyModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const Vocab& vocab() const { return vocab_; }

    // Deterministic linear projection of the flattened grid into
    // image_prefix_len rows of d_model. An all-zero grid returns the bias rows.
    Tensor encode_image(const ImageGrid& image) const;

    // Causal forward over [image prefix] + tokens. Logits at row i depend only
    // on rows 0..i. Throws on overlength input or out-of-range ids.
    ForwardResult forward(const std::vector<int>& tokens,
                          const std::optional<ImageGrid>& image,
                          bool with_values = false) const;

    // Autoregressive sampling; never emits PAD/BOS/IMG. Runs with gradients
    // disabled. Same rng state -> same output, bit-exact.
    GenerationTrace generate(const std::vector<int>& prompt_ids,
                             const std::optional<ImageGrid>& image,
                             const SamplingParams& sampling, Rng& rng,
                             int max_new_tokens) const;

    // All weights in a fixed deterministic order (base, adapters, value head).
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    // What a policy-training stage optimizes: adapters when attached, else all
    // base weights. Never includes the value head.
    std::vector<Tensor> policy_params() const;
    std::vector<Tensor> value_params() const;
    std::int64_t param_count(bool trainable_only) const;

    bool has_adapters() const { return !adapters_.empty(); }
    const std::vector<LoraAdapter>& adapters() const { return adapters_; }

    // Folds every adapter's (alpha/r)*B*A into its base matrix and drops the
    // adapters. Without adapters this warns on stderr and changes nothing.
    void merge_lora();

    void save(const std::string& path) const;
    static PolicyModel load(const std::string& path);

    // Checkpoint plumbing shared with trainer state files: config scalars plus
    // every weight, under the names of named_params().
    std::vector<NamedTensor> export_tensors() const;
    // Overwrites this model's weights from `tensors`; the embedded config must
    // match this model's exactly.
    void import_tensors(const std::vector<NamedTensor>& tensors);

    // Copies every weight from `other` (same architecture required).
    void copy_weights_from(const PolicyModel& other);

private:
    struct Layer {
        Tensor wq, wk, wv, wo;      // (d_model, d_model)
        Tensor ff_w1, ff_b1;        // (d_model, d_ff), (d_ff)
        Tensor ff_w2, ff_b2;        // (d_ff, d_model), (d_model)
    };

    Tensor projected(const Tensor& x, const Tensor& base, int layer, const char* name) const;
    const LoraAdapter* adapter_for(int layer, const char* name) const;

    ModelConfig config_;
    Vocab vocab_;
    Tensor tok_embedding_;   // (vocab_size, d_model)
    Tensor pos_embedding_;   // (max_seq_len, d_model)
    Tensor img_proj_w_;      // (64, image_prefix_len * d_model)
    Tensor img_proj_b_;      // (image_prefix_len * d_model)
    std::vector<Layer> layers_;
    Tensor unembed_;         // (d_model, vocab_size), zero-init
    Tensor value_w_;         // (d_model, 1), zero-init
    Tensor value_b_;         // (1)
    std::vector<LoraAdapter> adapters_;
};

}  // namespace prefalign
