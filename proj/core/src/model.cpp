#include "prefalign/model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <stdexcept>

#include "prefalign/checkpoint.hpp"

namespace prefalign {

void ModelConfig::validate() const {
    if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_ff < 1) {
        throw std::invalid_argument("ModelConfig: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("ModelConfig: d_model (" + std::to_string(d_model) +
                                    ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    if (max_seq_len < 8) throw std::invalid_argument("ModelConfig: max_seq_len too small");
    if (image_prefix_len < 1) throw std::invalid_argument("ModelConfig: image_prefix_len must be >= 1");
    if (lora_rank < 0) throw std::invalid_argument("ModelConfig: lora_rank must be >= 0");
    if (lora_rank > 0 && lora_alpha <= 0.0) {
        throw std::invalid_argument("ModelConfig: lora_alpha must be positive when adapters are on");
    }
}

namespace {

constexpr double kEmbedStd = 0.02;

Tensor init_matrix(Rng stream, std::int64_t rows, std::int64_t cols, double stddev) {
    return Tensor::randn({rows, cols}, stream, stddev, true);
}

}  // namespace

PolicyModel::PolicyModel(ModelConfig config, std::uint64_t seed) : config_(config) {
    if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
    config_.validate();
    if (config_.vocab_size < vocab_.size()) {
        throw std::invalid_argument("ModelConfig: vocab_size smaller than the task vocabulary");
    }

    const std::int64_t d = config_.d_model;
    const std::int64_t v = config_.vocab_size;
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));

    // Every tensor draws from its own child stream so initialization is a pure
    // function of (seed, tensor slot), independent of construction order.
    Rng root(seed);
    std::uint64_t slot = 0;
    auto next = [&]() { return root.split(slot++); };

    tok_embedding_ = init_matrix(next(), v, d, kEmbedStd);
    pos_embedding_ = init_matrix(next(), config_.max_seq_len, d, kEmbedStd);
    img_proj_w_ = init_matrix(next(), static_cast<std::int64_t>(kImageCells),
                              config_.image_prefix_len * d, proj_std);
    {
        Rng s = next();
        img_proj_b_ = Tensor::randn({config_.image_prefix_len * d}, s, kEmbedStd, true);
    }
    layers_.resize(static_cast<std::size_t>(config_.n_layers));
    for (auto& layer : layers_) {
        layer.wq = init_matrix(next(), d, d, proj_std);
        layer.wk = init_matrix(next(), d, d, proj_std);
        layer.wv = init_matrix(next(), d, d, proj_std);
        layer.wo = init_matrix(next(), d, d, proj_std);
        layer.ff_w1 = init_matrix(next(), d, config_.d_ff, proj_std);
        layer.ff_b1 = Tensor::zeros({config_.d_ff}, true);
        layer.ff_w2 = init_matrix(next(), config_.d_ff, d,
                                  1.0 / std::sqrt(static_cast<double>(config_.d_ff)));
        layer.ff_b2 = Tensor::zeros({d}, true);
    }
    // Zero-init head: untrained cross-entropy is exactly ln(vocab_size).
    unembed_ = Tensor::zeros({d, v}, true);
    value_w_ = Tensor::zeros({d, 1}, true);
    value_b_ = Tensor::zeros({1}, true);

    if (config_.lora_rank > 0) {
        const int r = config_.lora_rank;
        for (int li = 0; li < config_.n_layers; ++li) {
            for (const char* target : {"wq", "wk", "wv", "wo"}) {
                LoraAdapter ad;
                ad.target = "layers." + std::to_string(li) + ".attn." + target;
                ad.rank = r;
                ad.alpha = config_.lora_alpha;
                Rng s = next();
                ad.a = Tensor::randn({r, d}, s, proj_std, true);
                ad.b = Tensor::zeros({d, r}, true);
                adapters_.push_back(std::move(ad));
            }
        }
    }
}

Tensor PolicyModel::encode_image(const ImageGrid& image) const {
    if (image.size() != kImageCells) {
        throw std::invalid_argument("encode_image: expected 64 grid values, got " +
                                    std::to_string(image.size()));
    }
    for (double v : image) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::invalid_argument("encode_image: grid value " + std::to_string(v) +
                                        " outside [0,1]");
        }
    }
    Tensor flat = Tensor::from_data({1, static_cast<std::int64_t>(kImageCells)},
                                    std::vector<double>(image.begin(), image.end()));
    Tensor proj = add(matmul(flat, img_proj_w_), img_proj_b_);
    return reshape(proj, {config_.image_prefix_len, config_.d_model});
}

const LoraAdapter* PolicyModel::adapter_for(int layer, const char* name) const {
    if (adapters_.empty()) return nullptr;
    const std::string target = "layers." + std::to_string(layer) + ".attn." + name;
    for (const auto& ad : adapters_) {
        if (ad.target == target) return &ad;
    }
    return nullptr;
}

Tensor PolicyModel::projected(const Tensor& x, const Tensor& base, int layer,
                              const char* name) const {
    Tensor out = matmul(x, base);
    if (const LoraAdapter* ad = adapter_for(layer, name)) {
        // x (T,d_in) @ A^T (d_in,r) @ B^T (r,d_out), scaled alpha/r.
        Tensor low = matmul(x, ad->a, false, true);
        Tensor delta = scale(matmul(low, ad->b, false, true),
                             ad->alpha / static_cast<double>(ad->rank));
        out = add(out, delta);
    }
    return out;
}

ForwardResult PolicyModel::forward(const std::vector<int>& tokens,
                                   const std::optional<ImageGrid>& image,
                                   bool with_values) const {
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    const int prefix = image ? config_.image_prefix_len : 0;
    const std::int64_t total = prefix + static_cast<std::int64_t>(tokens.size());
    if (total > config_.max_seq_len) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(total) +
                                    " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }

    Tensor tok = embedding_lookup(tok_embedding_, tokens);
    Tensor x = image ? concat_rows({encode_image(*image), tok}) : tok;

    std::vector<int> positions(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i) positions[static_cast<std::size_t>(i)] = static_cast<int>(i);
    x = add(x, gather_rows(pos_embedding_, positions));

    const std::int64_t dh = config_.d_model / config_.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int li = 0; li < config_.n_layers; ++li) {
        const Layer& layer = layers_[static_cast<std::size_t>(li)];
        // Attention block, pre-LN.
        Tensor n1 = layer_norm(x);
        Tensor q = projected(n1, layer.wq, li, "wq");
        Tensor k = projected(n1, layer.wk, li, "wk");
        Tensor v = projected(n1, layer.wv, li, "wv");
        std::vector<Tensor> heads;
        heads.reserve(static_cast<std::size_t>(config_.n_heads));
        for (int h = 0; h < config_.n_heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
            Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
            Tensor scores = scale(matmul(qh, kh, false, true), inv_sqrt_dh);
            Tensor attn = causal_softmax(scores);
            heads.push_back(matmul(attn, vh));
        }
        Tensor attn_out = projected(concat_cols(heads), layer.wo, li, "wo");
        x = add(x, attn_out);

        // Feed-forward block, pre-LN.
        Tensor n2 = layer_norm(x);
        Tensor hidden = gelu(add(matmul(n2, layer.ff_w1), layer.ff_b1));
        Tensor ff = add(matmul(hidden, layer.ff_w2), layer.ff_b2);
        x = add(x, ff);
    }

    Tensor final_h = layer_norm(x);
    ForwardResult result;
    result.logits = matmul(final_h, unembed_);
    if (with_values) {
        Tensor v = add(matmul(final_h, value_w_), value_b_);
        result.values = reshape(v, {total});
    }
    return result;
}

GenerationTrace PolicyModel::generate(const std::vector<int>& prompt_ids,
                                      const std::optional<ImageGrid>& image,
                                      const SamplingParams& sampling, Rng& rng,
                                      int max_new_tokens) const {
    if (max_new_tokens < 1) throw std::invalid_argument("generate: max_new_tokens must be >= 1");
    if (!sampling.greedy && sampling.temperature <= 0.0) {
        throw std::invalid_argument("generate: temperature must be positive unless greedy");
    }
    NoGradGuard guard;
    GenerationTrace trace;
    std::vector<int> ids = prompt_ids;
    const int prefix = image ? config_.image_prefix_len : 0;

    while (static_cast<int>(trace.tokens.size()) < max_new_tokens) {
        if (prefix + static_cast<std::int64_t>(ids.size()) >= config_.max_seq_len) break;
        ForwardResult fr = forward(ids, image, true);
        const std::int64_t last = fr.logits.dim(0) - 1;
        std::vector<double> row(static_cast<std::size_t>(config_.vocab_size));
        for (std::int64_t c = 0; c < config_.vocab_size; ++c) row[static_cast<std::size_t>(c)] = fr.logits.at(last, c);

        // Log-prob of the eventual choice under the full temperature-1 softmax;
        // this is the quantity the policy-gradient stages compare against.
        double mx = row[0];
        for (double z : row) mx = std::max(mx, z);
        double lse = 0.0;
        for (double z : row) lse += std::exp(z - mx);
        lse = mx + std::log(lse);

        int chosen;
        if (sampling.greedy) {
            chosen = -1;
            for (int c = 0; c < config_.vocab_size; ++c) {
                if (c == Vocab::kPad || c == Vocab::kBos || c == Vocab::kImg) continue;
                if (chosen < 0 || row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(chosen)]) chosen = c;
            }
        } else {
            // Temperature + top-k over allowed tokens, sampled without tensors.
            std::vector<std::pair<double, int>> scored;
            scored.reserve(row.size());
            for (int c = 0; c < config_.vocab_size; ++c) {
                if (c == Vocab::kPad || c == Vocab::kBos || c == Vocab::kImg) continue;
                scored.emplace_back(row[static_cast<std::size_t>(c)] / sampling.temperature, c);
            }
            if (sampling.top_k > 0 && sampling.top_k < static_cast<int>(scored.size())) {
                std::partial_sort(scored.begin(), scored.begin() + sampling.top_k, scored.end(),
                                  [](const auto& a, const auto& b) {
                                      // Stable tie handling: higher score first,
                                      // lower id first on exact ties.
                                      if (a.first != b.first) return a.first > b.first;
                                      return a.second < b.second;
                                  });
                scored.resize(static_cast<std::size_t>(sampling.top_k));
            }
            double smax = scored[0].first;
            for (const auto& [s, c] : scored) smax = std::max(smax, s);
            double denom = 0.0;
            for (auto& [s, c] : scored) {
                s = std::exp(s - smax);
                denom += s;
            }
            double u = rng.uniform() * denom;
            chosen = scored.back().second;
            for (const auto& [s, c] : scored) {
                if (u < s) {
                    chosen = c;
                    break;
                }
                u -= s;
            }
        }

        trace.tokens.push_back(chosen);
        trace.logp.push_back(row[static_cast<std::size_t>(chosen)] - lse);
        trace.value.push_back(fr.values.data()[static_cast<std::size_t>(last)]);
        ids.push_back(chosen);
        if (chosen == Vocab::kEos) {
            trace.hit_eos = true;
            break;
        }
    }
    trace.text = vocab_.detokenize(trace.tokens);
    return trace;
}

std::vector<std::pair<std::string, Tensor>> PolicyModel::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embedding", tok_embedding_);
    out.emplace_back("pos_embedding", pos_embedding_);
    out.emplace_back("img_proj.w", img_proj_w_);
    out.emplace_back("img_proj.b", img_proj_b_);
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const std::string p = "layers." + std::to_string(li) + ".";
        const Layer& layer = layers_[li];
        out.emplace_back(p + "attn.wq", layer.wq);
        out.emplace_back(p + "attn.wk", layer.wk);
        out.emplace_back(p + "attn.wv", layer.wv);
        out.emplace_back(p + "attn.wo", layer.wo);
        out.emplace_back(p + "ff.w1", layer.ff_w1);
        out.emplace_back(p + "ff.b1", layer.ff_b1);
        out.emplace_back(p + "ff.w2", layer.ff_w2);
        out.emplace_back(p + "ff.b2", layer.ff_b2);
    }
    out.emplace_back("unembed", unembed_);
    for (const auto& ad : adapters_) {
        out.emplace_back(ad.target + ".lora_a", ad.a);
        out.emplace_back(ad.target + ".lora_b", ad.b);
    }
    out.emplace_back("value_head.w", value_w_);
    out.emplace_back("value_head.b", value_b_);
    return out;
}

std::vector<Tensor> PolicyModel::policy_params() const {
    std::vector<Tensor> out;
    if (!adapters_.empty()) {
        for (const auto& ad : adapters_) {
            out.push_back(ad.a);
            out.push_back(ad.b);
        }
        return out;
    }
    for (const auto& [name, t] : named_params()) {
        if (name.rfind("value_head.", 0) == 0) continue;
        out.push_back(t);
    }
    return out;
}

std::vector<Tensor> PolicyModel::value_params() const { return {value_w_, value_b_}; }

std::int64_t PolicyModel::param_count(bool trainable_only) const {
    std::int64_t n = 0;
    if (trainable_only) {
        for (const auto& t : policy_params()) n += t.size();
        return n;
    }
    for (const auto& [name, t] : named_params()) n += t.size();
    return n;
}

void PolicyModel::merge_lora() {
    if (adapters_.empty()) {
        std::cerr << "merge_lora: no adapters attached; nothing to merge\n";
        return;
    }
    NoGradGuard guard;
    for (const auto& ad : adapters_) {
        Tensor delta = scale(matmul(ad.b, ad.a), ad.alpha / static_cast<double>(ad.rank));
        // Base stores (d_in, d_out); delta is (d_out, d_in).
        for (auto& [name, base] : named_params()) {
            if (name != ad.target) continue;
            auto w = base.mutable_data();
            const std::int64_t din = base.dim(0);
            const std::int64_t dout = base.dim(1);
            for (std::int64_t i = 0; i < din; ++i) {
                for (std::int64_t j = 0; j < dout; ++j) {
                    w[static_cast<std::size_t>(i * dout + j)] += delta.at(j, i);
                }
            }
        }
    }
    adapters_.clear();
    config_.lora_rank = 0;
}

namespace {

const char* kConfigFields[] = {"n_layers", "d_model",     "n_heads",          "d_ff",
                               "vocab_size", "max_seq_len", "image_prefix_len", "lora_rank",
                               "lora_alpha"};

double config_field(const ModelConfig& c, const std::string& f) {
    if (f == "n_layers") return c.n_layers;
    if (f == "d_model") return c.d_model;
    if (f == "n_heads") return c.n_heads;
    if (f == "d_ff") return c.d_ff;
    if (f == "vocab_size") return c.vocab_size;
    if (f == "max_seq_len") return c.max_seq_len;
    if (f == "image_prefix_len") return c.image_prefix_len;
    if (f == "lora_rank") return c.lora_rank;
    if (f == "lora_alpha") return c.lora_alpha;
    throw std::logic_error("unknown config field " + f);
}

void set_config_field(ModelConfig& c, const std::string& f, double v) {
    if (f == "n_layers") c.n_layers = static_cast<int>(v);
    else if (f == "d_model") c.d_model = static_cast<int>(v);
    else if (f == "n_heads") c.n_heads = static_cast<int>(v);
    else if (f == "d_ff") c.d_ff = static_cast<int>(v);
    else if (f == "vocab_size") c.vocab_size = static_cast<int>(v);
    else if (f == "max_seq_len") c.max_seq_len = static_cast<int>(v);
    else if (f == "image_prefix_len") c.image_prefix_len = static_cast<int>(v);
    else if (f == "lora_rank") c.lora_rank = static_cast<int>(v);
    else if (f == "lora_alpha") c.lora_alpha = v;
    else throw std::runtime_error("checkpoint has unknown config field '" + f + "'");
}

}  // namespace

std::vector<NamedTensor> PolicyModel::export_tensors() const {
    std::vector<NamedTensor> tensors;
    for (const char* f : kConfigFields) {
        tensors.push_back({std::string("config.") + f, {}, {config_field(config_, f)}});
    }
    for (const auto& [name, t] : named_params()) {
        tensors.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    }
    return tensors;
}

void PolicyModel::import_tensors(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;

    for (const char* f : kConfigFields) {
        auto it = by_name.find(std::string("config.") + f);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint missing config." + std::string(f));
        }
        if (it->second->data.at(0) != config_field(config_, f)) {
            throw std::runtime_error("checkpoint config." + std::string(f) +
                                     " does not match this model's architecture");
        }
    }
    for (auto& [name, t] : named_params()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint missing tensor '" + name + "'");
        }
        const NamedTensor& src = *it->second;
        if (src.shape != t.shape()) {
            throw std::runtime_error("checkpoint tensor '" + name + "' has mismatched shape");
        }
        std::copy(src.data.begin(), src.data.end(), t.mutable_data().begin());
    }
}

void PolicyModel::save(const std::string& path) const {
    write_checkpoint(path, export_tensors());
}

PolicyModel PolicyModel::load(const std::string& path) {
    auto tensors = read_checkpoint(path);
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;

    ModelConfig config;
    for (const char* f : kConfigFields) {
        auto it = by_name.find(std::string("config.") + f);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint '" + path + "' missing config." + f);
        }
        set_config_field(config, f, it->second->data.at(0));
    }

    PolicyModel model(config, 0);
    model.import_tensors(tensors);
    return model;
}

void PolicyModel::copy_weights_from(const PolicyModel& other) {
    auto mine = named_params();
    auto theirs = other.named_params();
    if (mine.size() != theirs.size()) {
        throw std::invalid_argument("copy_weights_from: architectures differ");
    }
    for (std::size_t i = 0; i < mine.size(); ++i) {
        if (mine[i].first != theirs[i].first || mine[i].second.shape() != theirs[i].second.shape()) {
            throw std::invalid_argument("copy_weights_from: parameter mismatch at " + mine[i].first);
        }
        auto dst = mine[i].second.mutable_data();
        auto src = theirs[i].second.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

}  // namespace prefalign
