#include "prefalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

namespace prefalign {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
};

namespace {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

void check_finite(const TensorImpl& t, const char* op) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

std::vector<double>& grad_buf(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

struct TapeRecord {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> backfn;
};

struct Tape {
    std::vector<TapeRecord> records;
};

thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;

void record_op(std::shared_ptr<TensorImpl> out, std::function<void()> backfn) {
    g_tape.records.push_back({std::move(out), std::move(backfn)});
}

// Output of an op requires grad only when recording is on and an input does.
bool track(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

Tensor make_result(Shape shape, std::vector<double> data, bool req, const char* op) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = req;
    check_finite(*impl, op);
    return Tensor(std::move(impl));
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
    }
}

enum class BroadcastKind { Same, Row, Scalar };

BroadcastKind broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return BroadcastKind::Same;
    if (b.size() == 1) return BroadcastKind::Scalar;
    if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) return BroadcastKind::Row;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not conform");
}

}  // namespace

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    check_finite(*impl, "from_data");
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = rng.normal() * stddev;
    return from_data(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(impl_->data.size()); }
std::int64_t Tensor::dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    if (!value) impl_->grad.clear();
    return *this;
}

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
    return grad_buf(*impl_);
}

void Tensor::zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
    require_rank2(*this, "at");
    return impl_->data[static_cast<std::size_t>(r * dim(1) + c)];
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

// ---- tape ----

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::size_t tape_size() { return g_tape.records.size(); }
void tape_clear() { g_tape.records.clear(); }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ShapeError("backward: loss must be a scalar tensor");
    }
    if (g_tape.records.empty()) {
        throw NumericError("backward: tape is empty (no forward recorded since last backward)");
    }
    grad_buf(*loss.impl())[0] += 1.0;
    for (auto it = g_tape.records.rbegin(); it != g_tape.records.rend(); ++it) {
        if (it->out->grad.empty()) continue;  // not on a path to the loss
        it->backfn();
    }
    g_tape.records.clear();
}

// ---- primitives ----

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::int64_t m = trans_a ? a.dim(1) : a.dim(0);
    const std::int64_t k = trans_a ? a.dim(0) : a.dim(1);
    const std::int64_t kb = trans_b ? b.dim(1) : b.dim(0);
    const std::int64_t n = trans_b ? b.dim(0) : b.dim(1);
    if (k != kb) {
        throw ShapeError("matmul: inner dims of " + shape_str(a.shape()) + (trans_a ? "^T" : "") +
                         " and " + shape_str(b.shape()) + (trans_b ? "^T" : "") + " differ");
    }

    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    const std::int64_t lda = a.dim(1);
    const std::int64_t ldb = b.dim(1);

    // Accumulation order is fixed (i, then p, then j) for determinism.
    for (std::int64_t i = 0; i < m; ++i) {
        double* po = out.data() + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = trans_a ? pa[p * lda + i] : pa[i * lda + p];
            if (!trans_b) {
                const double* pbrow = pb + p * ldb;
                for (std::int64_t j = 0; j < n; ++j) po[j] += av * pbrow[j];
            } else {
                for (std::int64_t j = 0; j < n; ++j) po[j] += av * pb[j * ldb + p];
            }
        }
    }

    bool req = track({&a, &b});
    Tensor result = make_result({m, n}, std::move(out), req, "matmul");
    if (req) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = result.impl();
        record_op(oi, [ai, bi, oi, trans_a, trans_b, m, n, k]() {
            const double* g = oi->grad.data();
            const std::int64_t lda = ai->shape[1];
            const std::int64_t ldb = bi->shape[1];
            if (ai->requires_grad) {
                double* ga = grad_buf(*ai).data();
                const double* pb = bi->data.data();
                // dA = G B^T (or transposed variants)
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        if (!trans_b) {
                            const double* pbrow = pb + p * ldb;
                            const double* grow = g + i * n;
                            for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * pbrow[j];
                        } else {
                            const double* grow = g + i * n;
                            for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * pb[j * ldb + p];
                        }
                        if (!trans_a) ga[i * lda + p] += acc;
                        else ga[p * lda + i] += acc;
                    }
                }
            }
            if (bi->requires_grad) {
                double* gb = grad_buf(*bi).data();
                const double* pa = ai->data.data();
                for (std::int64_t p = 0; p < k; ++p) {
                    for (std::int64_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < m; ++i) {
                            const double av = trans_a ? pa[p * lda + i] : pa[i * lda + p];
                            acc += av * g[i * n + j];
                        }
                        if (!trans_b) gb[p * ldb + j] += acc;
                        else gb[j * ldb + p] += acc;
                    }
                }
            }
        });
    }
    return result;
}

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, bool is_mul, double b_sign = 1.0) {
    BroadcastKind kind = broadcast_kind(a, b, op);
    std::vector<double> out(a.data().begin(), a.data().end());
    const double* pb = b.data().data();
    const std::int64_t n = a.size();

    switch (kind) {
        case BroadcastKind::Same:
            for (std::int64_t i = 0; i < n; ++i) {
                if (is_mul) out[static_cast<std::size_t>(i)] *= pb[i];
                else out[static_cast<std::size_t>(i)] += b_sign * pb[i];
            }
            break;
        case BroadcastKind::Scalar: {
            const double bv = pb[0];
            for (auto& v : out) {
                if (is_mul) v *= bv;
                else v += b_sign * bv;
            }
            break;
        }
        case BroadcastKind::Row: {
            const std::int64_t cols = a.dim(1);
            for (std::int64_t i = 0; i < n; ++i) {
                if (is_mul) out[static_cast<std::size_t>(i)] *= pb[i % cols];
                else out[static_cast<std::size_t>(i)] += b_sign * pb[i % cols];
            }
            break;
        }
    }

    bool req = track({&a, &b});
    Tensor result = make_result(a.shape(), std::move(out), req, op);
    if (req) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = result.impl();
        record_op(oi, [ai, bi, oi, kind, is_mul, b_sign]() {
            const double* g = oi->grad.data();
            const std::int64_t n = static_cast<std::int64_t>(oi->data.size());
            const std::int64_t cols = (kind == BroadcastKind::Row) ? ai->shape[1] : 0;
            if (ai->requires_grad) {
                double* ga = grad_buf(*ai).data();
                if (is_mul) {
                    const double* pb = bi->data.data();
                    for (std::int64_t i = 0; i < n; ++i) {
                        double bv = (kind == BroadcastKind::Same) ? pb[i]
                                  : (kind == BroadcastKind::Scalar) ? pb[0] : pb[i % cols];
                        ga[i] += g[i] * bv;
                    }
                } else {
                    for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
                }
            }
            if (bi->requires_grad) {
                double* gb = grad_buf(*bi).data();
                const double* pa = ai->data.data();
                for (std::int64_t i = 0; i < n; ++i) {
                    std::int64_t bidx = (kind == BroadcastKind::Same) ? i
                                      : (kind == BroadcastKind::Scalar) ? 0 : (i % cols);
                    if (is_mul) gb[bidx] += g[i] * pa[i];
                    else gb[bidx] += b_sign * g[i];
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "add", false, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "sub", false, -1.0); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "mul", true); }

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= s;
    bool req = track({&a});
    Tensor result = make_result(a.shape(), std::move(out), req, "scale");
    if (req) {
        auto ai = a.impl();
        auto oi = result.impl();
        record_op(oi, [ai, oi, s]() {
            double* ga = grad_buf(*ai).data();
            const double* g = oi->grad.data();
            for (std::size_t i = 0; i < oi->data.size(); ++i) ga[i] += s * g[i];
        });
    }
    return result;
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += s;
    bool req = track({&a});
    Tensor result = make_result(a.shape(), std::move(out), req, "add_scalar");
    if (req) {
        auto ai = a.impl();
        auto oi = result.impl();
        record_op(oi, [ai, oi]() {
            double* ga = grad_buf(*ai).data();
            const double* g = oi->grad.data();
            for (std::size_t i = 0; i < oi->data.size(); ++i) ga[i] += g[i];
        });
    }
    return result;
}

namespace {

// Rows of the last dim for rank-1 (one row) or rank-2 tensors.
void row_view(const Tensor& x, const char* op, std::int64_t& rows, std::int64_t& cols) {
    if (x.rank() == 1) {
        rows = 1;
        cols = x.dim(0);
    } else if (x.rank() == 2) {
        rows = x.dim(0);
        cols = x.dim(1);
    } else {
        throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(x.shape()));
    }
    if (cols == 0) throw ShapeError(std::string(op) + ": zero-width rows");
}

}  // namespace

Tensor softmax(const Tensor& x) {
    std::int64_t rows, cols;
    row_view(x, "softmax", rows, cols);
    std::vector<double> out(static_cast<std::size_t>(rows * cols));
    const double* px = x.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * cols;
        double* orow = out.data() + r * cols;
        double mx = xr[0];
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            orow[c] = std::exp(xr[c] - mx);
            denom += orow[c];
        }
        for (std::int64_t c = 0; c < cols; ++c) orow[c] /= denom;
    }
    bool req = track({&x});
    Tensor result = make_result(x.shape(), std::move(out), req, "softmax");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, rows, cols]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* y = oi->data.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = y + r * cols;
                const double* gr = g + r * cols;
                double dot = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                for (std::int64_t c = 0; c < cols; ++c) gx[r * cols + c] += yr[c] * (gr[c] - dot);
            }
        });
    }
    return result;
}

Tensor log_softmax(const Tensor& x) {
    std::int64_t rows, cols;
    row_view(x, "log_softmax", rows, cols);
    std::vector<double> out(static_cast<std::size_t>(rows * cols));
    const double* px = x.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * cols;
        double mx = xr[0];
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
        const double lse = mx + std::log(denom);
        for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(r * cols + c)] = xr[c] - lse;
    }
    bool req = track({&x});
    Tensor result = make_result(x.shape(), std::move(out), req, "log_softmax");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, rows, cols]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* y = oi->data.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = y + r * cols;
                const double* gr = g + r * cols;
                double gsum = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) gsum += gr[c];
                for (std::int64_t c = 0; c < cols; ++c) {
                    gx[r * cols + c] += gr[c] - std::exp(yr[c]) * gsum;
                }
            }
        });
    }
    return result;
}

Tensor causal_softmax(const Tensor& scores) {
    require_rank2(scores, "causal_softmax");
    if (scores.dim(0) != scores.dim(1)) {
        throw ShapeError("causal_softmax: expected square scores, got " + shape_str(scores.shape()));
    }
    const std::int64_t n = scores.dim(0);
    std::vector<double> out(static_cast<std::size_t>(n * n), 0.0);
    const double* px = scores.data().data();
    for (std::int64_t r = 0; r < n; ++r) {
        const double* xr = px + r * n;
        double* orow = out.data() + r * n;
        double mx = xr[0];
        for (std::int64_t c = 1; c <= r; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c <= r; ++c) {
            orow[c] = std::exp(xr[c] - mx);
            denom += orow[c];
        }
        for (std::int64_t c = 0; c <= r; ++c) orow[c] /= denom;
    }
    bool req = track({&scores});
    Tensor result = make_result(scores.shape(), std::move(out), req, "causal_softmax");
    if (req) {
        auto xi = scores.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, n]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* y = oi->data.data();
            for (std::int64_t r = 0; r < n; ++r) {
                const double* yr = y + r * n;
                const double* gr = g + r * n;
                double dot = 0.0;
                for (std::int64_t c = 0; c <= r; ++c) dot += gr[c] * yr[c];
                for (std::int64_t c = 0; c <= r; ++c) gx[r * n + c] += yr[c] * (gr[c] - dot);
            }
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& x, double eps) {
    std::int64_t rows, cols;
    row_view(x, "layer_norm", rows, cols);
    std::vector<double> out(static_cast<std::size_t>(rows * cols));
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    const double* px = x.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * cols;
        double mu = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            const double d = xr[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t c = 0; c < cols; ++c) {
            out[static_cast<std::size_t>(r * cols + c)] = (xr[c] - mu) * is;
        }
    }
    bool req = track({&x});
    Tensor result = make_result(x.shape(), std::move(out), req, "layer_norm");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, rows, cols, inv_std = std::move(inv_std)]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* y = oi->data.data();
            const double inv_n = 1.0 / static_cast<double>(cols);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = y + r * cols;
                const double* gr = g + r * cols;
                double gmean = 0.0, gymean = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) {
                    gmean += gr[c];
                    gymean += gr[c] * yr[c];
                }
                gmean *= inv_n;
                gymean *= inv_n;
                const double is = inv_std[static_cast<std::size_t>(r)];
                for (std::int64_t c = 0; c < cols; ++c) {
                    gx[r * cols + c] += is * (gr[c] - gmean - yr[c] * gymean);
                }
            }
        });
    }
    return result;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    require_rank2(table, "embedding_lookup");
    const std::int64_t vocab = table.dim(0);
    const std::int64_t dim = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw ShapeError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                             std::to_string(vocab) + " rows");
        }
    }
    std::vector<double> out(ids.size() * static_cast<std::size_t>(dim));
    const double* pt = table.data().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(out.data() + i * static_cast<std::size_t>(dim),
                    pt + static_cast<std::size_t>(ids[i]) * static_cast<std::size_t>(dim),
                    sizeof(double) * static_cast<std::size_t>(dim));
    }
    bool req = track({&table});
    Tensor result = make_result({static_cast<std::int64_t>(ids.size()), dim}, std::move(out), req,
                                "embedding_lookup");
    if (req) {
        auto ti = table.impl();
        auto oi = result.impl();
        record_op(oi, [ti, oi, ids, dim]() {
            double* gt = grad_buf(*ti).data();
            const double* g = oi->grad.data();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* dst = gt + static_cast<std::size_t>(ids[i]) * static_cast<std::size_t>(dim);
                const double* src = g + i * static_cast<std::size_t>(dim);
                for (std::int64_t c = 0; c < dim; ++c) dst[c] += src[c];
            }
        });
    }
    return result;
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    bool req = track({&x});
    Tensor result = make_result(x.shape(), std::move(out), req, "gelu");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* px = xi->data.data();
            for (std::size_t i = 0; i < oi->data.size(); ++i) {
                const double v = px[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return result;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    require_rank2(logits, "cross_entropy");
    const std::int64_t rows = logits.dim(0);
    const std::int64_t cols = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || t >= cols) {
            throw ShapeError("cross_entropy: target class " + std::to_string(t) + " outside [0," +
                             std::to_string(cols) + ")");
        }
    }
    std::vector<double> out(static_cast<std::size_t>(rows));
    const double* px = logits.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * cols;
        double mx = xr[0];
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
        out[static_cast<std::size_t>(r)] = mx + std::log(denom) - xr[targets[static_cast<std::size_t>(r)]];
    }
    bool req = track({&logits});
    Tensor result = make_result({rows}, std::move(out), req, "cross_entropy");
    if (req) {
        auto xi = logits.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, targets, rows, cols]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* px = xi->data.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double gr = g[r];
                if (gr == 0.0) continue;
                const double* xr = px + r * cols;
                double mx = xr[0];
                for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
                double denom = 0.0;
                for (std::int64_t c = 0; c < cols; ++c) denom += std::exp(xr[c] - mx);
                for (std::int64_t c = 0; c < cols; ++c) {
                    double p = std::exp(xr[c] - mx) / denom;
                    gx[r * cols + c] += gr * (p - (c == targets[static_cast<std::size_t>(r)] ? 1.0 : 0.0));
                }
            }
        });
    }
    return result;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    require_rank2(x, "gather_rows");
    const std::int64_t nrows = x.dim(0);
    const std::int64_t cols = x.dim(1);
    for (int r : rows) {
        if (r < 0 || r >= nrows) {
            throw ShapeError("gather_rows: row " + std::to_string(r) + " outside [0," +
                             std::to_string(nrows) + ")");
        }
    }
    std::vector<double> out(rows.size() * static_cast<std::size_t>(cols));
    const double* px = x.data().data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::memcpy(out.data() + i * static_cast<std::size_t>(cols),
                    px + static_cast<std::size_t>(rows[i]) * static_cast<std::size_t>(cols),
                    sizeof(double) * static_cast<std::size_t>(cols));
    }
    bool req = track({&x});
    Tensor result = make_result({static_cast<std::int64_t>(rows.size()), cols}, std::move(out), req,
                                "gather_rows");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, rows, cols]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                double* dst = gx + static_cast<std::size_t>(rows[i]) * static_cast<std::size_t>(cols);
                const double* src = g + i * static_cast<std::size_t>(cols);
                for (std::int64_t c = 0; c < cols; ++c) dst[c] += src[c];
            }
        });
    }
    return result;
}

Tensor take_per_row(const Tensor& x, const std::vector<int>& ids) {
    require_rank2(x, "take_per_row");
    const std::int64_t rows = x.dim(0);
    const std::int64_t cols = x.dim(1);
    if (static_cast<std::int64_t>(ids.size()) != rows) {
        throw ShapeError("take_per_row: " + std::to_string(ids.size()) + " picks for " +
                         std::to_string(rows) + " rows");
    }
    for (int c : ids) {
        if (c < 0 || c >= cols) {
            throw ShapeError("take_per_row: column " + std::to_string(c) + " outside [0," +
                             std::to_string(cols) + ")");
        }
    }
    std::vector<double> out(static_cast<std::size_t>(rows));
    const double* px = x.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        out[static_cast<std::size_t>(r)] = px[r * cols + ids[static_cast<std::size_t>(r)]];
    }
    bool req = track({&x});
    Tensor result = make_result({rows}, std::move(out), req, "take_per_row");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, ids, cols]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            for (std::size_t r = 0; r < ids.size(); ++r) {
                gx[static_cast<std::int64_t>(r) * cols + ids[r]] += g[r];
            }
        });
    }
    return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::int64_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.dim(1) != cols) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
        }
        rows += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(rows * cols));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

    bool req = false;
    for (const auto& p : parts) {
        if (track({&p})) req = true;
    }
    Tensor result = make_result({rows, cols}, std::move(out), req, "concat_rows");
    if (req) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const auto& p : parts) impls.push_back(p.impl());
        auto oi = result.impl();
        record_op(oi, [impls, oi]() {
            const double* g = oi->grad.data();
            std::size_t offset = 0;
            for (auto& pi : impls) {
                const std::size_t n = pi->data.size();
                if (pi->requires_grad) {
                    double* gp = grad_buf(*pi).data();
                    for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
                }
                offset += n;
            }
        });
    }
    return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::int64_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : -1;
    std::int64_t cols = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        }
        cols += p.dim(1);
    }
    std::vector<double> out(static_cast<std::size_t>(rows * cols));
    std::int64_t col_off = 0;
    for (const auto& p : parts) {
        const std::int64_t pc = p.dim(1);
        const double* pp = p.data().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(out.data() + r * cols + col_off, pp + r * pc,
                        sizeof(double) * static_cast<std::size_t>(pc));
        }
        col_off += pc;
    }
    bool req = false;
    for (const auto& p : parts) {
        if (track({&p})) req = true;
    }
    Tensor result = make_result({rows, cols}, std::move(out), req, "concat_cols");
    if (req) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const auto& p : parts) impls.push_back(p.impl());
        auto oi = result.impl();
        record_op(oi, [impls, oi, rows, cols]() {
            const double* g = oi->grad.data();
            std::int64_t col_off = 0;
            for (auto& pi : impls) {
                const std::int64_t pc = pi->shape[1];
                if (pi->requires_grad) {
                    double* gp = grad_buf(*pi).data();
                    for (std::int64_t r = 0; r < rows; ++r) {
                        for (std::int64_t c = 0; c < pc; ++c) {
                            gp[r * pc + c] += g[r * cols + col_off + c];
                        }
                    }
                }
                col_off += pc;
            }
        });
    }
    return result;
}

namespace {

Tensor slice_impl(const Tensor& x, std::int64_t begin, std::int64_t end, bool rows_axis, const char* op) {
    require_rank2(x, op);
    const std::int64_t limit = rows_axis ? x.dim(0) : x.dim(1);
    if (begin < 0 || end > limit || begin >= end) {
        throw ShapeError(std::string(op) + ": range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") invalid for extent " + std::to_string(limit));
    }
    const std::int64_t rows = x.dim(0);
    const std::int64_t cols = x.dim(1);
    Shape oshape = rows_axis ? Shape{end - begin, cols} : Shape{rows, end - begin};
    std::vector<double> out(static_cast<std::size_t>((end - begin) * (rows_axis ? cols : rows)));
    const double* px = x.data().data();
    if (rows_axis) {
        std::memcpy(out.data(), px + begin * cols,
                    sizeof(double) * static_cast<std::size_t>((end - begin) * cols));
    } else {
        const std::int64_t w = end - begin;
        for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(out.data() + r * w, px + r * cols + begin, sizeof(double) * static_cast<std::size_t>(w));
        }
    }
    bool req = track({&x});
    Tensor result = make_result(std::move(oshape), std::move(out), req, op);
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, begin, end, rows_axis, rows, cols]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            if (rows_axis) {
                const std::size_t n = static_cast<std::size_t>((end - begin) * cols);
                double* dst = gx + begin * cols;
                for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
            } else {
                const std::int64_t w = end - begin;
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t c = 0; c < w; ++c) gx[r * cols + begin + c] += g[r * w + c];
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor slice_rows(const Tensor& x, std::int64_t begin, std::int64_t end) {
    return slice_impl(x, begin, end, true, "slice_rows");
}

Tensor slice_cols(const Tensor& x, std::int64_t begin, std::int64_t end) {
    return slice_impl(x, begin, end, false, "slice_cols");
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel(new_shape) != x.size()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                         " changes element count");
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    bool req = track({&x});
    Tensor result = make_result(std::move(new_shape), std::move(out), req, "reshape");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            for (std::size_t i = 0; i < oi->data.size(); ++i) gx[i] += g[i];
        });
    }
    return result;
}

namespace {

Tensor reduce_impl(const Tensor& x, bool take_mean, const char* op) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double denom = take_mean ? static_cast<double>(x.size()) : 1.0;
    if (take_mean && x.size() == 0) throw ShapeError("mean: empty tensor");
    bool req = track({&x});
    Tensor result = make_result({}, {acc / denom}, req, op);
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, denom]() {
            double* gx = grad_buf(*xi).data();
            const double g = oi->grad[0] / denom;
            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g;
        });
    }
    return result;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_impl(x, false, "sum"); }
Tensor mean(const Tensor& x) { return reduce_impl(x, true, "mean"); }

Tensor square(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= v;
    bool req = track({&x});
    Tensor result = make_result(x.shape(), std::move(out), req, "square");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* px = xi->data.data();
            for (std::size_t i = 0; i < oi->data.size(); ++i) gx[i] += 2.0 * px[i] * g[i];
        });
    }
    return result;
}

Tensor log_sigmoid(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) {
        // log sigma(v) = -softplus(-v), computed without overflow on either tail
        v = (v >= 0.0) ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
    }
    bool req = track({&x});
    Tensor result = make_result(x.shape(), std::move(out), req, "log_sigmoid");
    if (req) {
        auto xi = x.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* px = xi->data.data();
            for (std::size_t i = 0; i < oi->data.size(); ++i) {
                const double v = px[i];
                // d/dv log sigma(v) = sigma(-v)
                const double s = (v >= 0.0) ? std::exp(-v) / (1.0 + std::exp(-v))
                                            : 1.0 / (1.0 + std::exp(v));
                gx[i] += g[i] * s;
            }
        });
    }
    return result;
}

Tensor row_entropy(const Tensor& logits) {
    std::int64_t rows, cols;
    row_view(logits, "row_entropy", rows, cols);
    std::vector<double> out(static_cast<std::size_t>(rows));
    std::vector<double> probs(static_cast<std::size_t>(rows * cols));
    const double* px = logits.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * cols;
        double* pr = probs.data() + r * cols;
        double mx = xr[0];
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            pr[c] = std::exp(xr[c] - mx);
            denom += pr[c];
        }
        double h = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            pr[c] /= denom;
            if (pr[c] > 0.0) h -= pr[c] * std::log(pr[c]);
        }
        out[static_cast<std::size_t>(r)] = h;
    }
    bool req = track({&logits});
    Tensor result = make_result({rows}, std::move(out), req, "row_entropy");
    if (req) {
        auto xi = logits.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, rows, cols, probs = std::move(probs)]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            const double* h = oi->data.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double gr = g[r];
                if (gr == 0.0) continue;
                const double* pr = probs.data() + r * cols;
                for (std::int64_t c = 0; c < cols; ++c) {
                    const double p = pr[c];
                    const double logp = (p > 0.0) ? std::log(p) : 0.0;
                    gx[r * cols + c] += gr * (-p * (logp + h[r]));
                }
            }
        });
    }
    return result;
}

Tensor ppo_surrogate(const Tensor& new_logp, const std::vector<double>& old_logp,
                     const std::vector<double>& adv, double clip_eps, int* clipped_out) {
    if (new_logp.rank() != 1) {
        throw ShapeError("ppo_surrogate: expected rank-1 logprobs, got " + shape_str(new_logp.shape()));
    }
    const std::size_t n = static_cast<std::size_t>(new_logp.size());
    if (old_logp.size() != n || adv.size() != n) {
        throw ShapeError("ppo_surrogate: length mismatch between logprobs and advantages");
    }
    std::vector<double> out(n);
    std::vector<double> dnew(n);  // d surr / d new_logp
    int clipped = 0;
    const double* pn = new_logp.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double rho = std::exp(pn[i] - old_logp[i]);
        if (!std::isfinite(rho)) throw NumericError("ppo_surrogate: non-finite probability ratio");
        const double a = adv[i];
        const double unclipped = rho * a;
        const double rho_c = std::clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps);
        const double clipped_v = rho_c * a;
        if (unclipped <= clipped_v) {
            out[i] = unclipped;
            dnew[i] = rho * a;  // d(rho)/d(new_logp) = rho
        } else {
            out[i] = clipped_v;
            // constant branch unless the clamp is inactive (then rho_c == rho)
            dnew[i] = (rho_c == rho) ? rho * a : 0.0;
            if (rho_c != rho) ++clipped;
        }
    }
    if (clipped_out) *clipped_out = clipped;
    bool req = track({&new_logp});
    Tensor result = make_result({static_cast<std::int64_t>(n)}, std::move(out), req, "ppo_surrogate");
    if (req) {
        auto xi = new_logp.impl();
        auto oi = result.impl();
        record_op(oi, [xi, oi, dnew = std::move(dnew)]() {
            double* gx = grad_buf(*xi).data();
            const double* g = oi->grad.data();
            for (std::size_t i = 0; i < dnew.size(); ++i) gx[i] += g[i] * dnew[i];
        });
    }
    return result;
}

// Rng::normal lives here to keep rng.hpp header-only-light without a separate TU.
double Rng::normal() {
    constexpr double two_pi = 6.283185307179586;
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(two_pi * u2);
}

}  // namespace prefalign
