#pragma once

#include <cstdint>
#include <vector>

#include "prefalign/tensor.hpp"

namespace prefalign {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction over a fixed list of parameter tensors. Moment
// buffers mirror the parameter shapes; `t` increments by exactly 1 per step.
// step() validates every gradient for NaN/Inf before mutating anything, so a
// blown-up backward pass never corrupts optimizer state.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig config = {});

    void step();
    void zero_grad();

    std::int64_t t() const { return t_; }
    const AdamConfig& config() const { return config_; }
    const std::vector<Tensor>& params() const { return params_; }

    // Checkpoint access: moment buffers and step counter are plain state.
    std::vector<std::vector<double>>& moments1() { return m_; }
    std::vector<std::vector<double>>& moments2() { return v_; }
    void set_t(std::int64_t t) { t_ = t; }

private:
    std::vector<Tensor> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t t_ = 0;
};

}  // namespace prefalign
