#include "prefalign/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace prefalign {

namespace {

double eval_scalar(const std::function<Tensor()>& fn) {
    NoGradGuard guard;
    Tensor out = fn();
    return out.item();
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& fn,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double h, double tol, std::int64_t max_coords_per_block,
                                  Rng* rng) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
    if (max_coords_per_block > 0 && rng == nullptr) {
        throw std::invalid_argument("finite_diff_check: coordinate sampling needs an rng");
    }

    const double probe_a = eval_scalar(fn);
    const double probe_b = eval_scalar(fn);
    if (probe_a != probe_b) {
        throw std::invalid_argument("finite_diff_check: fn is not deterministic");
    }

    // One autodiff pass; keep copies of the gradients before any perturbation.
    for (const auto& [name, p] : params) {
        (void)name;
        const_cast<Tensor&>(p).zero_grad();
    }
    tape_clear();
    Tensor loss = fn();
    backward(loss);
    std::vector<std::vector<double>> auto_grads;
    auto_grads.reserve(params.size());
    for (const auto& [name, p] : params) {
        (void)name;
        if (p.has_grad()) auto_grads.emplace_back(p.grad().begin(), p.grad().end());
        else auto_grads.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }

    GradCheckReport report;
    for (std::size_t bi = 0; bi < params.size(); ++bi) {
        const auto& name = params[bi].first;
        Tensor p = params[bi].second;
        auto data = p.mutable_data();
        const std::int64_t n = p.size();

        std::vector<std::int64_t> coords;
        if (max_coords_per_block <= 0 || n <= max_coords_per_block) {
            coords.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            // Partial Fisher-Yates over an index array: first k entries are a
            // uniform sample without replacement.
            std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
            for (std::int64_t i = 0; i < max_coords_per_block; ++i) {
                const std::int64_t j = i + static_cast<std::int64_t>(rng->below(
                    static_cast<std::uint64_t>(n - i)));
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
            }
            coords.assign(idx.begin(), idx.begin() + max_coords_per_block);
        }

        BlockReport block;
        block.name = name;
        block.checked = static_cast<std::int64_t>(coords.size());
        for (std::int64_t c : coords) {
            const double saved = data[static_cast<std::size_t>(c)];
            data[static_cast<std::size_t>(c)] = saved + h;
            const double fp = eval_scalar(fn);
            data[static_cast<std::size_t>(c)] = saved - h;
            const double fm = eval_scalar(fn);
            data[static_cast<std::size_t>(c)] = saved;

            const double fd = (fp - fm) / (2.0 * h);
            const double ad = auto_grads[bi][static_cast<std::size_t>(c)];
            const double mag = std::max(std::abs(fd), std::abs(ad));
            const double err = (mag > 1e-6) ? std::abs(fd - ad) / mag : std::abs(fd - ad);
            if (err > block.max_rel_err) {
                block.max_rel_err = err;
                block.worst_index = c;
            }
        }
        block.pass = block.max_rel_err <= tol;
        report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
        report.pass = report.pass && block.pass;
        report.blocks.push_back(std::move(block));
    }
    return report;
}

}  // namespace prefalign
