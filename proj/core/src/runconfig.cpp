#include "prefalign/runconfig.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace prefalign {

namespace {

using nlohmann::ordered_json;

[[noreturn]] void key_error(const std::string& path, const std::string& what) {
    throw std::invalid_argument("config key '" + path + "': " + what);
}

bool types_compatible(const ordered_json& tpl, const ordered_json& val) {
    if (tpl.is_number() && val.is_number()) return true;
    if (tpl.is_string() && val.is_string()) return true;
    if (tpl.is_boolean() && val.is_boolean()) return true;
    if (tpl.is_array() && val.is_array()) return true;
    return false;
}

// Overlays `input` onto `merged` (which starts as the defaults), rejecting
// keys the schema does not define and values of the wrong type.
void merge_strict(ordered_json& merged, const ordered_json& input, const std::string& prefix) {
    if (!input.is_object()) {
        throw std::invalid_argument("config" + (prefix.empty() ? "" : " section '" + prefix + "'") +
                                    " must be a JSON object");
    }
    for (const auto& [key, val] : input.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!merged.contains(key)) key_error(path, "unknown key");
        ordered_json& slot = merged[key];
        if (slot.is_object()) {
            merge_strict(slot, val, path);
        } else {
            if (!types_compatible(slot, val)) {
                key_error(path, std::string("expected ") + slot.type_name() + ", got " +
                                    val.type_name());
            }
            slot = val;
        }
    }
}

void apply_override(ordered_json& merged, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw std::invalid_argument("--set expects section.key=value, got '" + spec + "'");
    }
    const std::string path = spec.substr(0, eq);
    const std::string raw = spec.substr(eq + 1);

    ordered_json parsed = ordered_json::parse(raw, nullptr, false);
    if (parsed.is_discarded()) parsed = raw;  // bare strings need no quotes

    std::vector<std::string> parts;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) key_error(path, "empty key path");

    ordered_json* slot = &merged;
    std::string walked;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        walked = walked.empty() ? parts[i] : walked + "." + parts[i];
        if (!slot->is_object() || !slot->contains(parts[i])) key_error(walked, "unknown key");
        slot = &(*slot)[parts[i]];
    }
    if (slot->is_object()) key_error(path, "is a section, not a value");
    if (!types_compatible(*slot, parsed)) {
        key_error(path, std::string("expected ") + slot->type_name() + ", got " +
                            parsed.type_name());
    }
    *slot = parsed;
}

double get_num(const ordered_json& j, const char* key) { return j.at(key).get<double>(); }
int get_int(const ordered_json& j, const char* key) { return j.at(key).get<int>(); }
std::uint64_t get_u64(const ordered_json& j, const char* key) {
    return j.at(key).get<std::uint64_t>();
}
std::string get_str(const ordered_json& j, const char* key) {
    return j.at(key).get<std::string>();
}

void require(bool ok, const std::string& path, const std::string& what) {
    if (!ok) key_error(path, what);
}

}  // namespace

nlohmann::ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["data"] = {{"seed", data.seed}, {"n", data.n}, {"ratio", data.ratio}};
    j["model"] = {{"n_layers", model.n_layers},
                  {"d_model", model.d_model},
                  {"n_heads", model.n_heads},
                  {"d_ff", model.d_ff},
                  {"vocab_size", model.vocab_size},
                  {"max_seq_len", model.max_seq_len},
                  {"image_prefix_len", model.image_prefix_len},
                  {"lora_rank", model.lora_rank},
                  {"lora_alpha", model.lora_alpha}};
    j["sft"] = {{"epochs", sft.epochs},
                {"batch_size", sft.batch_size},
                {"lr", sft.lr},
                {"setting", sft.setting},
                {"seed", sft.seed},
                {"checkpoint_every", sft.checkpoint_every}};
    j["preference"] = {{"k", preference.k},
                       {"ranker", preference.ranker},
                       {"endpoint", preference.endpoint},
                       {"retries", preference.retries},
                       {"concurrency", preference.concurrency},
                       {"n_prompts", preference.n_prompts},
                       {"temperature", preference.temperature},
                       {"top_k", preference.top_k},
                       {"max_new_tokens", preference.max_new_tokens},
                       {"seed", preference.seed}};
    j["reward"] = {{"lr", reward.lr},
                   {"epochs", reward.epochs},
                   {"batch_size", reward.batch_size},
                   {"seed", reward.seed}};
    j["ppo"] = {{"steps", ppo.steps},
                {"lr", ppo.lr},
                {"value_lr", ppo.value_lr},
                {"clip_eps", ppo.clip_eps},
                {"kl_beta", ppo.kl_beta},
                {"gamma", ppo.gamma},
                {"gae_lambda", ppo.gae_lambda},
                {"ppo_epochs", ppo.ppo_epochs},
                {"rollout_batch", ppo.rollout_batch},
                {"minibatch", ppo.minibatch},
                {"max_new_tokens", ppo.max_new_tokens},
                {"entropy_coef", ppo.entropy_coef},
                {"value_coef", ppo.value_coef},
                {"seed", ppo.seed},
                {"checkpoint_every", ppo.checkpoint_every}};
    j["dpo"] = {{"beta", dpo.beta},
                {"lr", dpo.lr},
                {"epochs", dpo.epochs},
                {"batch_size", dpo.batch_size},
                {"seed", dpo.seed},
                {"checkpoint_every", dpo.checkpoint_every}};
    j["eval"] = {{"settings", eval.settings},
                 {"seeds", eval.seeds},
                 {"alignment", eval.alignment},
                 {"max_new_tokens", eval.max_new_tokens}};
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::ordered_json& j) {
    RunConfig c;
    const auto& d = j.at("data");
    c.data.seed = get_u64(d, "seed");
    c.data.n = get_int(d, "n");
    c.data.ratio = get_num(d, "ratio");

    const auto& m = j.at("model");
    c.model.n_layers = get_int(m, "n_layers");
    c.model.d_model = get_int(m, "d_model");
    c.model.n_heads = get_int(m, "n_heads");
    c.model.d_ff = get_int(m, "d_ff");
    c.model.vocab_size = get_int(m, "vocab_size");
    c.model.max_seq_len = get_int(m, "max_seq_len");
    c.model.image_prefix_len = get_int(m, "image_prefix_len");
    c.model.lora_rank = get_int(m, "lora_rank");
    c.model.lora_alpha = get_num(m, "lora_alpha");

    const auto& s = j.at("sft");
    c.sft.epochs = get_int(s, "epochs");
    c.sft.batch_size = get_int(s, "batch_size");
    c.sft.lr = get_num(s, "lr");
    c.sft.setting = get_str(s, "setting");
    c.sft.seed = get_u64(s, "seed");
    c.sft.checkpoint_every = get_int(s, "checkpoint_every");

    const auto& p = j.at("preference");
    c.preference.k = get_int(p, "k");
    c.preference.ranker = get_str(p, "ranker");
    c.preference.endpoint = get_str(p, "endpoint");
    c.preference.retries = get_int(p, "retries");
    c.preference.concurrency = get_int(p, "concurrency");
    c.preference.n_prompts = get_int(p, "n_prompts");
    c.preference.temperature = get_num(p, "temperature");
    c.preference.top_k = get_int(p, "top_k");
    c.preference.max_new_tokens = get_int(p, "max_new_tokens");
    c.preference.seed = get_u64(p, "seed");

    const auto& r = j.at("reward");
    c.reward.lr = get_num(r, "lr");
    c.reward.epochs = get_int(r, "epochs");
    c.reward.batch_size = get_int(r, "batch_size");
    c.reward.seed = get_u64(r, "seed");

    const auto& q = j.at("ppo");
    c.ppo.steps = get_int(q, "steps");
    c.ppo.lr = get_num(q, "lr");
    c.ppo.value_lr = get_num(q, "value_lr");
    c.ppo.clip_eps = get_num(q, "clip_eps");
    c.ppo.kl_beta = get_num(q, "kl_beta");
    c.ppo.gamma = get_num(q, "gamma");
    c.ppo.gae_lambda = get_num(q, "gae_lambda");
    c.ppo.ppo_epochs = get_int(q, "ppo_epochs");
    c.ppo.rollout_batch = get_int(q, "rollout_batch");
    c.ppo.minibatch = get_int(q, "minibatch");
    c.ppo.max_new_tokens = get_int(q, "max_new_tokens");
    c.ppo.entropy_coef = get_num(q, "entropy_coef");
    c.ppo.value_coef = get_num(q, "value_coef");
    c.ppo.seed = get_u64(q, "seed");
    c.ppo.checkpoint_every = get_int(q, "checkpoint_every");

    const auto& o = j.at("dpo");
    c.dpo.beta = get_num(o, "beta");
    c.dpo.lr = get_num(o, "lr");
    c.dpo.epochs = get_int(o, "epochs");
    c.dpo.batch_size = get_int(o, "batch_size");
    c.dpo.seed = get_u64(o, "seed");
    c.dpo.checkpoint_every = get_int(o, "checkpoint_every");

    const auto& e = j.at("eval");
    c.eval.settings = e.at("settings").get<std::vector<std::string>>();
    c.eval.seeds = e.at("seeds").get<std::vector<std::uint64_t>>();
    c.eval.alignment = get_str(e, "alignment");
    c.eval.max_new_tokens = get_int(e, "max_new_tokens");
    return c;
}

void RunConfig::validate() const {
    require(data.n >= 1, "data.n", "must be >= 1");
    require(data.ratio > 0.0 && data.ratio < 1.0, "data.ratio", "must lie in (0,1)");
    model.validate();

    require(sft.epochs >= 1, "sft.epochs", "must be >= 1");
    require(sft.batch_size >= 1, "sft.batch_size", "must be >= 1");
    require(sft.lr > 0.0, "sft.lr", "must be positive");
    require(sft.setting == "TEXT_IMAGE" || sft.setting == "TEXT_CAPTION" ||
                sft.setting == "TEXT_IMAGE_CAPTION",
            "sft.setting", "must be TEXT_IMAGE, TEXT_CAPTION, or TEXT_IMAGE_CAPTION");
    require(sft.checkpoint_every >= 1, "sft.checkpoint_every", "must be >= 1");

    require(preference.k >= 1, "preference.k", "must be >= 1");
    require(preference.ranker == "oracle" || preference.ranker == "external",
            "preference.ranker", "must be oracle or external");
    require(preference.ranker != "external" || !preference.endpoint.empty(),
            "preference.endpoint", "required when ranker is external");
    require(preference.retries >= 0, "preference.retries", "must be >= 0");
    require(preference.concurrency >= 1, "preference.concurrency", "must be >= 1");
    require(preference.n_prompts >= 1, "preference.n_prompts", "must be >= 1");
    require(preference.temperature > 0.0, "preference.temperature", "must be positive");
    require(preference.top_k >= 0, "preference.top_k", "must be >= 0");
    require(preference.max_new_tokens >= 1, "preference.max_new_tokens", "must be >= 1");

    require(reward.lr > 0.0, "reward.lr", "must be positive");
    require(reward.epochs >= 1, "reward.epochs", "must be >= 1");
    require(reward.batch_size >= 1, "reward.batch_size", "must be >= 1");

    require(ppo.steps >= 1, "ppo.steps", "must be >= 1");
    require(ppo.lr > 0.0, "ppo.lr", "must be positive");
    require(ppo.value_lr > 0.0, "ppo.value_lr", "must be positive");
    require(ppo.clip_eps > 0.0 && ppo.clip_eps < 1.0, "ppo.clip_eps", "must lie in (0,1)");
    require(ppo.kl_beta >= 0.0, "ppo.kl_beta", "must be >= 0");
    require(ppo.gamma > 0.0 && ppo.gamma <= 1.0, "ppo.gamma", "must lie in (0,1]");
    require(ppo.gae_lambda >= 0.0 && ppo.gae_lambda <= 1.0, "ppo.gae_lambda",
            "must lie in [0,1]");
    require(ppo.ppo_epochs >= 1, "ppo.ppo_epochs", "must be >= 1");
    require(ppo.rollout_batch >= 1, "ppo.rollout_batch", "must be >= 1");
    require(ppo.minibatch >= 1, "ppo.minibatch", "must be >= 1");
    require(ppo.max_new_tokens >= 1, "ppo.max_new_tokens", "must be >= 1");
    require(ppo.entropy_coef >= 0.0, "ppo.entropy_coef", "must be >= 0");
    require(ppo.value_coef >= 0.0, "ppo.value_coef", "must be >= 0");
    require(ppo.checkpoint_every >= 1, "ppo.checkpoint_every", "must be >= 1");

    require(dpo.beta > 0.0, "dpo.beta", "must be positive");
    require(dpo.lr > 0.0, "dpo.lr", "must be positive");
    require(dpo.epochs >= 1, "dpo.epochs", "must be >= 1");
    require(dpo.batch_size >= 1, "dpo.batch_size", "must be >= 1");
    require(dpo.checkpoint_every >= 1, "dpo.checkpoint_every", "must be >= 1");

    require(!eval.settings.empty(), "eval.settings", "must not be empty");
    for (const auto& s : eval.settings) {
        require(s == "TEXT_IMAGE" || s == "TEXT_CAPTION" || s == "TEXT_IMAGE_CAPTION",
                "eval.settings", "invalid setting '" + s + "'");
    }
    require(!eval.seeds.empty(), "eval.seeds", "must not be empty");
    require(eval.alignment == "dpo" || eval.alignment == "ppo" || eval.alignment == "none",
            "eval.alignment", "must be dpo, ppo, or none");
    require(eval.max_new_tokens >= 1, "eval.max_new_tokens", "must be >= 1");
}

RunConfig config_from_text(const std::string& text, const std::vector<std::string>& overrides,
                           const std::string& origin) {
    ordered_json merged = RunConfig{}.to_json();
    if (!text.empty()) {
        ordered_json input = ordered_json::parse(text, nullptr, false);
        if (input.is_discarded()) {
            throw std::invalid_argument("config '" + origin + "' is not valid JSON");
        }
        merge_strict(merged, input, "");
    }
    for (const auto& spec : overrides) apply_override(merged, spec);
    RunConfig c = RunConfig::from_json(merged);
    c.validate();
    return c;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config '" + path + "'");
    std::ostringstream os;
    os << is.rdbuf();
    return config_from_text(os.str(), overrides, path);
}

std::vector<std::string> config_diff(const nlohmann::ordered_json& a,
                                     const nlohmann::ordered_json& b) {
    std::vector<std::string> out;
    std::function<void(const ordered_json&, const ordered_json&, const std::string&)> walk =
        [&](const ordered_json& x, const ordered_json& y, const std::string& prefix) {
            std::vector<std::string> keys;
            for (const auto& [k, v] : x.items()) keys.push_back(k);
            for (const auto& [k, v] : y.items()) {
                if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
            }
            for (const auto& k : keys) {
                const std::string path = prefix.empty() ? k : prefix + "." + k;
                if (!x.contains(k) || !y.contains(k)) {
                    out.push_back(path);
                } else if (x.at(k).is_object() && y.at(k).is_object()) {
                    walk(x.at(k), y.at(k), path);
                } else if (x.at(k) != y.at(k)) {
                    out.push_back(path);
                }
            }
        };
    walk(a, b, "");
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace prefalign
