#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefalign/rng.hpp"

namespace prefalign {

// Thrown when operand shapes or indices do not conform.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when an op produces NaN/Inf or the tape is misused.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

struct TensorImpl;

// Dense f64 row-major tensor. Copying a Tensor copies the handle; the storage
// is shared. Ops record backward closures on a thread-local tape whenever
// gradients are enabled and an input requires them.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t size() const;
    std::int64_t dim(int i) const;
    int rank() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);

    std::span<const double> data() const;
    std::span<double> mutable_data();

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();  // allocates a zeroed buffer on first use
    void zero_grad();

    double item() const;
    double at(std::int64_t r, std::int64_t c) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    Tensor clone() const;  // deep copy, detached from the tape

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---- tape control ----

bool grad_enabled();

// Disables gradient recording for its scope (nestable).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

std::size_t tape_size();
void tape_clear();

// Runs reverse-mode accumulation from a scalar loss, then clears the tape.
// Calling it again without a fresh forward pass throws NumericError.
void backward(const Tensor& loss);

// ---- primitives ----
// Every op validates shapes, checks its output for NaN/Inf, and registers an
// exact hand-derived backward when recording is active.

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor add(const Tensor& a, const Tensor& b);  // equal shapes, (N,D)+(D) row broadcast, or scalar rhs
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor softmax(const Tensor& x);      // rows of the last dim
Tensor log_softmax(const Tensor& x);
Tensor causal_softmax(const Tensor& scores);  // (T,T); row i is supported on columns 0..i only
Tensor layer_norm(const Tensor& x, double eps = 1e-8);  // per row, no affine
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor gelu(const Tensor& x);  // exact erf form

// (N,V) logits + N target ids -> (N,) per-row negative log-likelihood.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
Tensor take_per_row(const Tensor& x, const std::vector<int>& ids);  // (N,V)+(N) -> (N,)

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end);
Tensor slice_cols(const Tensor& x, std::int64_t begin, std::int64_t end);
Tensor reshape(const Tensor& x, Shape new_shape);

Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar
Tensor square(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);  // numerically stable on both tails

// Shannon entropy of each softmax row, (N,V) -> (N,).
Tensor row_entropy(const Tensor& logits);

// Clipped-ratio policy objective per token: min(rho*A, clip(rho)*A) with
// rho = exp(new_logp - old_logp). The gradient flows only through branches
// where the clamp is inactive. `clipped_out`, when given, receives the count
// of tokens whose clipped branch was taken with an active clamp.
Tensor ppo_surrogate(const Tensor& new_logp, const std::vector<double>& old_logp,
                     const std::vector<double>& adv, double clip_eps, int* clipped_out = nullptr);

}  // namespace prefalign
