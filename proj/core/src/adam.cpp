#include "prefalign/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace prefalign {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    if (!(config_.beta1 > 0.0 && config_.beta1 < 1.0) ||
        !(config_.beta2 > 0.0 && config_.beta2 < 1.0)) {
        throw std::invalid_argument("Adam: beta1/beta2 must lie in (0,1)");
    }
    if (config_.eps <= 0.0) throw std::invalid_argument("Adam: eps must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
}

void Adam::step() {
    // Validate first: a NaN gradient must not leave half-updated state behind.
    for (const auto& p : params_) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
            if (!std::isfinite(g)) throw NumericError("Adam: non-finite gradient");
        }
    }
    t_ += 1;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool has = p.has_grad();
        auto g = p.grad();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace prefalign
