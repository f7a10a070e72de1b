#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prefalign/tensor.hpp"

namespace prefalign {

struct BlockReport {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    std::int64_t checked = 0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<BlockReport> blocks;
    double max_rel_err = 0.0;
    bool pass = true;
};

// Compares autodiff gradients of `fn` (a deterministic closure over `params`
// that rebuilds the forward pass and returns a scalar loss) against central
// finite differences (fn(p+h) - fn(p-h)) / 2h.
//
// Error metric per coordinate: |fd - ad| / max(|fd|, |ad|) when either
// magnitude exceeds 1e-6, else the absolute difference — near-zero gradients
// would otherwise inflate the ratio with pure float noise.
//
// `max_coords_per_block` limits how many coordinates are perturbed per block
// (0 = all); sampled coordinates are drawn without replacement from `rng`,
// which is required when sampling is active. `fn` is evaluated twice up front
// and a bitwise mismatch raises std::invalid_argument: internal randomness
// breaks the finite-difference contract.
GradCheckReport finite_diff_check(const std::function<Tensor()>& fn,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double h = 1e-5, double tol = 1e-4,
                                  std::int64_t max_coords_per_block = 0, Rng* rng = nullptr);

}  // namespace prefalign
