#pragma once

// Reverse-mode tape autodiff over dense row-major tensors.
//
// The graph is dynamic: every op allocates a node holding its forward value
// and a backward closure, and the whole graph is rebuilt each step. Nodes own
// their inputs through shared_ptr, so releasing the loss handle frees the
// tape. Closures capture raw node pointers only (ownership lives in the
// `inputs` list), which keeps the graph cycle-free.
//
// Scalar type T is float or double. All reductions run in a fixed
// left-to-right order so results are bit-reproducible for a given binary.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "melforge/common.hpp"
#include "melforge/random.hpp"

namespace melforge {

#ifndef NDEBUG
#define MELFORGE_CHECK_FINITE 1
#else
#define MELFORGE_CHECK_FINITE 0
#endif

template <class T>
struct TensorNode {
    Shape dims;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void()> backward;

    std::size_t numel() const { return value.size(); }
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape dims, bool requires_grad = false) { return full(std::move(dims), T(0), requires_grad); }

    static Tensor full(Shape dims, T v, bool requires_grad = false) {
        const std::size_t n = shape_numel(dims);
        return from_data(std::vector<T>(n, v), std::move(dims), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from_data({v}, Shape{1}, requires_grad); }

    static Tensor from_data(std::vector<T> data, Shape dims, bool requires_grad = false) {
        if (data.size() != shape_numel(dims))
            throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(dims));
        auto n = std::make_shared<TensorNode<T>>();
        n->dims = std::move(dims);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor randn(Shape dims, RngStream& rng, T stddev = T(1), bool requires_grad = false) {
        std::vector<T> d(shape_numel(dims));
        for (auto& v : d) v = static_cast<T>(rng.normal()) * stddev;
        return from_data(std::move(d), std::move(dims), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& dims() const { return node_->dims; }
    std::size_t dim(std::size_t i) const { return node_->dims[i]; }
    std::size_t rank() const { return node_->dims.size(); }
    std::size_t numel() const { return node_->value.size(); }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor of shape " + shape_str(dims()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    T* grad() { return node_->grad.data(); }
    const T* grad() const { return node_->grad.data(); }
    std::vector<T>& grad_values() { return node_->grad; }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    }

    bool all_finite() const {
        for (T v : node_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Reverse-mode sweep from a scalar root.
    void backward() const {
        if (numel() != 1) throw ShapeError("backward() requires a scalar root, got shape " + shape_str(dims()));
        std::vector<TensorNode<T>*> order = topo_order();
        for (TensorNode<T>* n : order)
            if (n->requires_grad && n->grad.empty()) n->grad.assign(n->value.size(), T(0));
        node_->grad.assign(1, T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<T>* n = *it;
            if (n->requires_grad && n->backward) n->backward();
        }
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }
    TensorNode<T>* raw() const { return node_.get(); }

    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

private:
    std::vector<TensorNode<T>*> topo_order() const {
        std::vector<TensorNode<T>*> order;
        std::unordered_set<TensorNode<T>*> seen;
        // Iterative post-order DFS; graphs run to tens of thousands of nodes.
        std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, i] = stack.back();
            if (i < n->inputs.size()) {
                TensorNode<T>* child = n->inputs[i++].get();
                if (seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<TensorNode<T>> node_;
};

// Thread-local switch: while disabled, ops record neither inputs nor backward
// closures (pure value computation, e.g. flow inversion and sampling).
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <class T>
inline void check_finite(const TensorNode<T>& n, const char* op) {
#if MELFORGE_CHECK_FINITE
    for (T v : n.value)
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericalError(std::string("non-finite value produced by op '") + op + "'");
#else
    (void)n;
    (void)op;
#endif
}

template <class T, class Backward>
Tensor<T> make_op(const char* name, Shape dims, std::vector<T> value, std::vector<Tensor<T>> inputs, Backward&& bw) {
    auto n = std::make_shared<TensorNode<T>>();
    n->dims = std::move(dims);
    n->value = std::move(value);
    if (grad_mode()) {
        n->inputs.reserve(inputs.size());
        for (auto& t : inputs) {
            n->requires_grad = n->requires_grad || t.requires_grad();
            n->inputs.push_back(t.node());
        }
        if (n->requires_grad) {
            TensorNode<T>* out = n.get();
            n->backward = [out, bw = std::forward<Backward>(bw)]() { bw(*out); };
        }
    }
    check_finite(*n, name);
    return Tensor<T>(std::move(n));
}

// Adds `src` into the grad buffer of input slot `k` if that input wants it.
template <class T>
inline void accumulate(TensorNode<T>& out, std::size_t k, const T* src, std::size_t n) {
    TensorNode<T>* in = out.inputs[k].get();
    if (!in->requires_grad) return;
    if (in->grad.empty()) in->grad.assign(in->value.size(), T(0));
    T* g = in->grad.data();
    for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

template <class T>
inline T* grad_of(TensorNode<T>& out, std::size_t k) {
    TensorNode<T>* in = out.inputs[k].get();
    if (!in->requires_grad) return nullptr;
    if (in->grad.empty()) in->grad.assign(in->value.size(), T(0));
    return in->grad.data();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Builds the message lazily; shape checks sit on hot paths.
template <class MsgFn>
inline void require_lazy(bool cond, MsgFn&& msg) {
    if (!cond) [[unlikely]]
        throw ShapeError(msg());
}

template <class T>
inline void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    require_lazy(a.dims() == b.dims(), [&] {
        return std::string(op) + ": shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims());
    });
}

template <class T>
inline void require_matrix(const char* op, const Tensor<T>& a) {
    require_lazy(a.rank() == 2,
                 [&] { return std::string(op) + ": expected a rank-2 tensor, got shape " + shape_str(a.dims()); });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a, b);
    std::vector<T> v(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + pb[i];
    return detail::make_op<T>("add", a.dims(), std::move(v), {a, b}, [](TensorNode<T>& o) {
        detail::accumulate(o, 0, o.grad.data(), o.grad.size());
        detail::accumulate(o, 1, o.grad.data(), o.grad.size());
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<T> v(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] - pb[i];
    return detail::make_op<T>("sub", a.dims(), std::move(v), {a, b}, [](TensorNode<T>& o) {
        detail::accumulate(o, 0, o.grad.data(), o.grad.size());
        if (T* g = detail::grad_of(o, 1))
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<T> v(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * pb[i];
    return detail::make_op<T>("mul", a.dims(), std::move(v), {a, b}, [](TensorNode<T>& o) {
        const T* pa = o.inputs[0]->value.data();
        const T* pb = o.inputs[1]->value.data();
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pb[i];
        if (T* g = detail::grad_of(o, 1))
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pa[i];
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    const T* pa = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * c;
    return detail::make_op<T>("scale", a.dims(), std::move(v), {a}, [c](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * c;
    });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    const T* pa = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + c;
    return detail::make_op<T>("add_scalar", a.dims(), std::move(v), {a}, [](TensorNode<T>& o) {
        detail::accumulate(o, 0, o.grad.data(), o.grad.size());
    });
}

template <class T, class F, class DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, F f, DF df) {
    std::vector<T> v(a.numel());
    const T* pa = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(pa[i]);
    return detail::make_op<T>(name, a.dims(), std::move(v), {a}, [df](TensorNode<T>& o) {
        const T* x = o.inputs[0]->value.data();
        const T* y = o.value.data();
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * df(x[i], y[i]);
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return unary_op<T>(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh_op(const Tensor<T>& a) {
    return unary_op<T>(
        "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return unary_op<T>(
        "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& a) {
    return unary_op<T>(
        "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log_op(const Tensor<T>& a) {
    return unary_op<T>(
        "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> log_abs(const Tensor<T>& a) {
    return unary_op<T>(
        "log_abs", a, [](T x) { return std::log(std::abs(x)); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> abs_op(const Tensor<T>& a) {
    return unary_op<T>(
        "abs", a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
    return unary_op<T>(
        "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

// ---------------------------------------------------------------------------
// row-broadcast (x: N x C, v: C)
// ---------------------------------------------------------------------------

template <class T>
void check_rowvec(const char* op, const Tensor<T>& x, const Tensor<T>& v) {
    detail::require_matrix(op, x);
    detail::require(v.rank() == 1 || (v.rank() == 2 && v.dim(0) == 1),
                    std::string(op) + ": expected a vector, got shape " + shape_str(v.dims()));
    detail::require(v.numel() == x.dim(1), std::string(op) + ": vector length " + std::to_string(v.numel()) +
                                               " does not match row width of " + shape_str(x.dims()));
}

template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    check_rowvec("add_rowvec", x, v);
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(n * c);
    const T* px = x.data();
    const T* pv = v.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = px[r * c + j] + pv[j];
    return detail::make_op<T>("add_rowvec", x.dims(), std::move(out), {x, v}, [n, c](TensorNode<T>& o) {
        detail::accumulate(o, 0, o.grad.data(), o.grad.size());
        if (T* gv = detail::grad_of(o, 1))
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) gv[j] += o.grad[r * c + j];
    });
}

template <class T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    check_rowvec("mul_rowvec", x, v);
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(n * c);
    const T* px = x.data();
    const T* pv = v.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = px[r * c + j] * pv[j];
    return detail::make_op<T>("mul_rowvec", x.dims(), std::move(out), {x, v}, [n, c](TensorNode<T>& o) {
        const T* px = o.inputs[0]->value.data();
        const T* pv = o.inputs[1]->value.data();
        if (T* gx = detail::grad_of(o, 0))
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += o.grad[r * c + j] * pv[j];
        if (T* gv = detail::grad_of(o, 1))
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) gv[j] += o.grad[r * c + j] * px[r * c + j];
    });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

namespace detail {

// bt (k x m) <- transpose of b (m x k), tiled for cache.
template <class T>
inline void transpose_into(const T* b, T* bt, std::size_t m, std::size_t k) {
    constexpr std::size_t kTile = 32;
    for (std::size_t j0 = 0; j0 < m; j0 += kTile) {
        const std::size_t j1 = std::min(m, j0 + kTile);
        for (std::size_t l0 = 0; l0 < k; l0 += kTile) {
            const std::size_t l1 = std::min(k, l0 + kTile);
            for (std::size_t j = j0; j < j1; ++j)
                for (std::size_t l = l0; l < l1; ++l) bt[l * m + j] = b[j * k + l];
        }
    }
}

// C (n x m) += A (n x k) * B (k x m). The k-blocked outer structure streams
// each B row once while C stays cache-resident; A is packed transposed so
// its column reads are contiguous. Two k-steps per C pass halve the C
// load/store traffic, which is what bounds the vectorized axpy.
template <class T>
inline void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    std::vector<T> at(k * n);
    transpose_into(a, at.data(), n, k);
    std::size_t l = 0;
    for (; l + 1 < k; l += 2) {
        const T* brow0 = b + l * m;
        const T* brow1 = brow0 + m;
        const T* arow0 = at.data() + l * n;
        const T* arow1 = arow0 + n;
        for (std::size_t i = 0; i < n; ++i) {
            const T a0 = arow0[i];
            const T a1 = arow1[i];
            T* crow = c + i * m;
            if (a0 != T(0) && a1 != T(0)) {
                for (std::size_t j = 0; j < m; ++j) crow[j] += a0 * brow0[j] + a1 * brow1[j];
            } else if (a0 != T(0)) {
                for (std::size_t j = 0; j < m; ++j) crow[j] += a0 * brow0[j];
            } else if (a1 != T(0)) {
                for (std::size_t j = 0; j < m; ++j) crow[j] += a1 * brow1[j];
            }
        }
    }
    for (; l < k; ++l) {
        const T* brow = b + l * m;
        const T* arow = at.data() + l * n;
        for (std::size_t i = 0; i < n; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (n x m) += A (n x k) * B^T (B is m x k). Transposes B into a scratch so
// the inner loop is an axpy over contiguous rows (dot-product reductions do
// not vectorize under strict FP semantics; independent accumulations do).
template <class T>
inline void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    std::vector<T> bt(k * m);
    transpose_into(b, bt.data(), m, k);
    gemm_nn(a, bt.data(), c, n, k, m);
}

// C (n x m) += A^T (A is k x n) * B (k x m).
template <class T>
inline void gemm_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    std::size_t l = 0;
    for (; l + 1 < k; l += 2) {
        const T* arow0 = a + l * n;
        const T* arow1 = arow0 + n;
        const T* brow0 = b + l * m;
        const T* brow1 = brow0 + m;
        for (std::size_t i = 0; i < n; ++i) {
            const T a0 = arow0[i];
            const T a1 = arow1[i];
            T* crow = c + i * m;
            if (a0 != T(0) || a1 != T(0))
                for (std::size_t j = 0; j < m; ++j) crow[j] += a0 * brow0[j] + a1 * brow1[j];
        }
    }
    for (; l < k; ++l) {
        const T* arow = a + l * n;
        const T* brow = b + l * m;
        for (std::size_t i = 0; i < n; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix("matmul", a);
    detail::require_matrix("matmul", b);
    detail::require(a.dim(1) == b.dim(0),
                    "matmul: inner dimensions disagree, " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<T> out(n * m, T(0));
    detail::gemm_nn(a.data(), b.data(), out.data(), n, k, m);
    return detail::make_op<T>("matmul", Shape{n, m}, std::move(out), {a, b}, [n, k, m](TensorNode<T>& o) {
        const T* pa = o.inputs[0]->value.data();
        const T* pb = o.inputs[1]->value.data();
        if (T* ga = detail::grad_of(o, 0)) detail::gemm_nt(o.grad.data(), pb, ga, n, m, k);
        if (T* gb = detail::grad_of(o, 1)) detail::gemm_tn(pa, o.grad.data(), gb, k, n, m);
    });
}

// a (n x k) * b^T with b (m x k); the layout used by Linear and attention.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix("matmul_nt", a);
    detail::require_matrix("matmul_nt", b);
    detail::require(a.dim(1) == b.dim(1),
                    "matmul_nt: inner dimensions disagree, " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
    std::vector<T> out(n * m, T(0));
    detail::gemm_nt(a.data(), b.data(), out.data(), n, k, m);
    return detail::make_op<T>("matmul_nt", Shape{n, m}, std::move(out), {a, b}, [n, k, m](TensorNode<T>& o) {
        const T* pa = o.inputs[0]->value.data();
        const T* pb = o.inputs[1]->value.data();
        if (T* ga = detail::grad_of(o, 0)) detail::gemm_nn(o.grad.data(), pb, ga, n, m, k);
        if (T* gb = detail::grad_of(o, 1)) detail::gemm_tn(o.grad.data(), pa, gb, m, n, k);
    });
}

// ---------------------------------------------------------------------------
// reductions and row ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    const T* pa = a.data();
    for (std::size_t i = 0; i < a.numel(); ++i) s += pa[i];
    return detail::make_op<T>("sum_all", Shape{1}, {s}, {a}, [](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < o.inputs[0]->numel(); ++i) g[i] += o.grad[0];
    });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    const T inv = T(1) / static_cast<T>(a.numel());
    T s = T(0);
    const T* pa = a.data();
    for (std::size_t i = 0; i < a.numel(); ++i) s += pa[i];
    return detail::make_op<T>("mean_all", Shape{1}, {s * inv}, {a}, [inv](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < o.inputs[0]->numel(); ++i) g[i] += o.grad[0] * inv;
    });
}

// Column means over rows: (N x C) -> (C).
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    detail::require_matrix("mean_rows", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    const T inv = T(1) / static_cast<T>(n);
    std::vector<T> out(c, T(0));
    const T* px = x.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) out[j] += px[r * c + j];
    for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
    return detail::make_op<T>("mean_rows", Shape{c}, std::move(out), {x}, [n, c, inv](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[j] * inv;
    });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    detail::require_matrix("softmax_rows", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(n * c);
    const T* px = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = px + r * c;
        T m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        T z = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            out[r * c + j] = std::exp(row[j] - m);
            z += out[r * c + j];
        }
        const T inv = T(1) / z;
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] *= inv;
    }
    return detail::make_op<T>("softmax_rows", x.dims(), std::move(out), {x}, [n, c](TensorNode<T>& o) {
        const T* y = o.value.data();
        if (T* g = detail::grad_of(o, 0)) {
            for (std::size_t r = 0; r < n; ++r) {
                const T* yr = y + r * c;
                const T* gr = o.grad.data() + r * c;
                T dot = T(0);
                for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                for (std::size_t j = 0; j < c; ++j) g[r * c + j] += yr[j] * (gr[j] - dot);
            }
        }
    });
}

template <class T>
Tensor<T> logsumexp_rows(const Tensor<T>& x) {
    detail::require_matrix("logsumexp_rows", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(n);
    const T* px = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = px + r * c;
        T m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        T z = T(0);
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
        out[r] = m + std::log(z);
    }
    return detail::make_op<T>("logsumexp_rows", Shape{n}, std::move(out), {x}, [n, c](TensorNode<T>& o) {
        const T* px = o.inputs[0]->value.data();
        const T* y = o.value.data();
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[r] * std::exp(px[r * c + j] - y[r]);
    });
}

// out[r] = x[r, idx[r]].
template <class T>
Tensor<T> pick_rows(const Tensor<T>& x, std::vector<std::size_t> idx) {
    detail::require_matrix("pick_rows", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    detail::require(idx.size() == n, "pick_rows: index count " + std::to_string(idx.size()) +
                                         " does not match row count of " + shape_str(x.dims()));
    std::vector<T> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        detail::require(idx[r] < c, "pick_rows: index " + std::to_string(idx[r]) + " out of range for row width " +
                                        std::to_string(c));
        out[r] = x.data()[r * c + idx[r]];
    }
    return detail::make_op<T>("pick_rows", Shape{n}, std::move(out), {x}, [idx = std::move(idx), c](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t r = 0; r < idx.size(); ++r) g[r * c + idx[r]] += o.grad[r];
    });
}

// Per-row L2 normalization; rejects zero rows.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    detail::require_matrix("l2_normalize_rows", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(n * c);
    std::vector<T> norms(n);
    const T* px = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        T ss = T(0);
        for (std::size_t j = 0; j < c; ++j) ss += px[r * c + j] * px[r * c + j];
        T nrm = std::sqrt(ss);
        if (!(nrm > T(0))) throw ValidationError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
        norms[r] = nrm;
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = px[r * c + j] / nrm;
    }
    return detail::make_op<T>("l2_normalize_rows", x.dims(), std::move(out), {x},
                              [n, c, norms = std::move(norms)](TensorNode<T>& o) {
                                  const T* y = o.value.data();
                                  if (T* g = detail::grad_of(o, 0)) {
                                      for (std::size_t r = 0; r < n; ++r) {
                                          const T* yr = y + r * c;
                                          const T* gr = o.grad.data() + r * c;
                                          T dot = T(0);
                                          for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                                          for (std::size_t j = 0; j < c; ++j)
                                              g[r * c + j] += (gr[j] - yr[j] * dot) / norms[r];
                                      }
                                  }
                              });
}

// Per-row standardization x_hat = (x - mean) / sqrt(var + eps), population
// variance over the last dimension.
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps) {
    detail::require_matrix("normalize_rows", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out(n * c);
    std::vector<T> inv_std(n);
    const T* px = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = px + r * c;
        T mu = T(0);
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = (row[j] - mu) * is;
    }
    return detail::make_op<T>("normalize_rows", x.dims(), std::move(out), {x},
                              [n, c, inv_std = std::move(inv_std)](TensorNode<T>& o) {
                                  const T* y = o.value.data();
                                  if (T* g = detail::grad_of(o, 0)) {
                                      const T invc = T(1) / static_cast<T>(c);
                                      for (std::size_t r = 0; r < n; ++r) {
                                          const T* yr = y + r * c;
                                          const T* gr = o.grad.data() + r * c;
                                          T gmean = T(0), gymean = T(0);
                                          for (std::size_t j = 0; j < c; ++j) {
                                              gmean += gr[j];
                                              gymean += gr[j] * yr[j];
                                          }
                                          gmean *= invc;
                                          gymean *= invc;
                                          for (std::size_t j = 0; j < c; ++j)
                                              g[r * c + j] += inv_std[r] * (gr[j] - gmean - yr[j] * gymean);
                                      }
                                  }
                              });
}

// Per-vector mean and standard deviation over the last dimension (population
// std, i.e. divide by n). Plain statistics, not part of the tape.
template <class T>
std::pair<Tensor<T>, Tensor<T>> layer_norm_stats(const Tensor<T>& x) {
    detail::require_matrix("layer_norm_stats", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    detail::require(c >= 1, "layer_norm_stats: empty last dimension");
    std::vector<T> mu(n), sigma(n);
    const T* px = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = px + r * c;
        T m = T(0);
        for (std::size_t j = 0; j < c; ++j) m += row[j];
        m /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
        var /= static_cast<T>(c);
        mu[r] = m;
        sigma[r] = std::sqrt(var);
    }
    return {Tensor<T>::from_data(std::move(mu), Shape{n}), Tensor<T>::from_data(std::move(sigma), Shape{n})};
}

// ---------------------------------------------------------------------------
// structure ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape dims) {
    detail::require(shape_numel(dims) == x.numel(), "reshape: cannot view " + shape_str(x.dims()) + " as " +
                                                        shape_str(dims) + " (element counts differ)");
    std::vector<T> v(x.values());
    return detail::make_op<T>("reshape", std::move(dims), std::move(v), {x}, [](TensorNode<T>& o) {
        detail::accumulate(o, 0, o.grad.data(), o.grad.size());
    });
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix("concat_cols", a);
    detail::require_matrix("concat_cols", b);
    detail::require(a.dim(0) == b.dim(0),
                    "concat_cols: row counts disagree, " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    std::vector<T> out(n * (ca + cb));
    for (std::size_t r = 0; r < n; ++r) {
        std::memcpy(out.data() + r * (ca + cb), a.data() + r * ca, ca * sizeof(T));
        std::memcpy(out.data() + r * (ca + cb) + ca, b.data() + r * cb, cb * sizeof(T));
    }
    return detail::make_op<T>("concat_cols", Shape{n, ca + cb}, std::move(out), {a, b},
                              [n, ca, cb](TensorNode<T>& o) {
                                  const std::size_t c = ca + cb;
                                  if (T* ga = detail::grad_of(o, 0))
                                      for (std::size_t r = 0; r < n; ++r)
                                          for (std::size_t j = 0; j < ca; ++j) ga[r * ca + j] += o.grad[r * c + j];
                                  if (T* gb = detail::grad_of(o, 1))
                                      for (std::size_t r = 0; r < n; ++r)
                                          for (std::size_t j = 0; j < cb; ++j)
                                              gb[r * cb + j] += o.grad[r * c + ca + j];
                              });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
    detail::require_matrix("slice_cols", x);
    detail::require(c0 < c1 && c1 <= x.dim(1), "slice_cols: range [" + std::to_string(c0) + ", " +
                                                   std::to_string(c1) + ") invalid for shape " + shape_str(x.dims()));
    const std::size_t n = x.dim(0), c = x.dim(1), w = c1 - c0;
    std::vector<T> out(n * w);
    for (std::size_t r = 0; r < n; ++r) std::memcpy(out.data() + r * w, x.data() + r * c + c0, w * sizeof(T));
    return detail::make_op<T>("slice_cols", Shape{n, w}, std::move(out), {x}, [n, c, c0, w](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < w; ++j) g[r * c + c0 + j] += o.grad[r * w + j];
    });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
    detail::require_matrix("slice_rows", x);
    detail::require(r0 < r1 && r1 <= x.dim(0), "slice_rows: range [" + std::to_string(r0) + ", " +
                                                   std::to_string(r1) + ") invalid for shape " + shape_str(x.dims()));
    const std::size_t c = x.dim(1), h = r1 - r0;
    std::vector<T> out(h * c);
    std::memcpy(out.data(), x.data() + r0 * c, h * c * sizeof(T));
    return detail::make_op<T>("slice_rows", Shape{h, c}, std::move(out), {x}, [r0, c, h](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < h * c; ++i) g[r0 * c + i] += o.grad[i];
    });
}

// Repeats row i counts[i] times, preserving order (the length regulator core).
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& x, const std::vector<int>& counts) {
    detail::require_matrix("repeat_rows", x);
    detail::require(counts.size() == x.dim(0), "repeat_rows: " + std::to_string(counts.size()) +
                                                   " counts for shape " + shape_str(x.dims()));
    std::size_t total = 0;
    for (int d : counts) {
        detail::require(d >= 0, "repeat_rows: negative count");
        total += static_cast<std::size_t>(d);
    }
    detail::require(total > 0, "repeat_rows: all counts are zero");
    const std::size_t c = x.dim(1);
    std::vector<T> out(total * c);
    std::size_t t = 0;
    for (std::size_t i = 0; i < counts.size(); ++i)
        for (int k = 0; k < counts[i]; ++k, ++t) std::memcpy(out.data() + t * c, x.data() + i * c, c * sizeof(T));
    return detail::make_op<T>("repeat_rows", Shape{total, c}, std::move(out), {x}, [counts, c](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0)) {
            std::size_t t = 0;
            for (std::size_t i = 0; i < counts.size(); ++i)
                for (int k = 0; k < counts[i]; ++k, ++t)
                    for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[t * c + j];
        }
    });
}

// Mean-pools rows within [boundaries[i], boundaries[i+1]); the last segment
// runs to the end.
template <class T>
Tensor<T> segment_mean(const Tensor<T>& x, const std::vector<int>& boundaries) {
    detail::require_matrix("segment_mean", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (boundaries.empty()) throw ValidationError("segment_mean: empty boundary list");
    if (boundaries.front() != 0) throw ValidationError("segment_mean: first boundary must be 0");
    for (std::size_t i = 0; i + 1 < boundaries.size(); ++i)
        if (boundaries[i] >= boundaries[i + 1])
            throw ValidationError("segment_mean: boundaries must be strictly increasing (" +
                                  std::to_string(boundaries[i]) + " then " + std::to_string(boundaries[i + 1]) + ")");
    if (static_cast<std::size_t>(boundaries.back()) >= n)
        throw ValidationError("segment_mean: boundary " + std::to_string(boundaries.back()) +
                              " out of range for " + std::to_string(n) + " rows");
    const std::size_t s = boundaries.size();
    std::vector<T> out(s * c, T(0));
    std::vector<std::size_t> len(s);
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t b0 = static_cast<std::size_t>(boundaries[i]);
        const std::size_t b1 = (i + 1 < s) ? static_cast<std::size_t>(boundaries[i + 1]) : n;
        len[i] = b1 - b0;
        for (std::size_t r = b0; r < b1; ++r)
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] += x.data()[r * c + j];
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= static_cast<T>(len[i]);
    }
    return detail::make_op<T>("segment_mean", Shape{s, c}, std::move(out), {x},
                              [boundaries, n, c, len = std::move(len)](TensorNode<T>& o) {
                                  if (T* g = detail::grad_of(o, 0)) {
                                      const std::size_t s = boundaries.size();
                                      for (std::size_t i = 0; i < s; ++i) {
                                          const std::size_t b0 = static_cast<std::size_t>(boundaries[i]);
                                          const std::size_t b1 =
                                              (i + 1 < s) ? static_cast<std::size_t>(boundaries[i + 1]) : n;
                                          const T inv = T(1) / static_cast<T>(len[i]);
                                          for (std::size_t r = b0; r < b1; ++r)
                                              for (std::size_t j = 0; j < c; ++j)
                                                  g[r * c + j] += o.grad[i * c + j] * inv;
                                      }
                                  }
                              });
}

// Stacks B row vectors (each 1 x C or C) into a B x C matrix.
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    detail::require(!rows.empty(), "stack_rows: empty input");
    const std::size_t c = rows[0].numel();
    std::vector<T> out;
    out.reserve(rows.size() * c);
    for (const auto& r : rows) {
        detail::require(r.numel() == c, "stack_rows: row sizes disagree (" + std::to_string(c) + " vs " +
                                            std::to_string(r.numel()) + ")");
        out.insert(out.end(), r.values().begin(), r.values().end());
    }
    return detail::make_op<T>("stack_rows", Shape{rows.size(), c}, std::move(out), rows, [c](TensorNode<T>& o) {
        for (std::size_t r = 0; r < o.inputs.size(); ++r) detail::accumulate(o, r, o.grad.data() + r * c, c);
    });
}

// Appends n_pad copies of the last row.
template <class T>
Tensor<T> pad_rows_repeat_last(const Tensor<T>& x, std::size_t n_pad) {
    detail::require_matrix("pad_rows_repeat_last", x);
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<T> out((n + n_pad) * c);
    std::memcpy(out.data(), x.data(), n * c * sizeof(T));
    for (std::size_t p = 0; p < n_pad; ++p)
        std::memcpy(out.data() + (n + p) * c, x.data() + (n - 1) * c, c * sizeof(T));
    return detail::make_op<T>("pad_rows_repeat_last", Shape{n + n_pad, c}, std::move(out), {x},
                              [n, c, n_pad](TensorNode<T>& o) {
                                  if (T* g = detail::grad_of(o, 0)) {
                                      for (std::size_t i = 0; i < n * c; ++i) g[i] += o.grad[i];
                                      for (std::size_t p = 0; p < n_pad; ++p)
                                          for (std::size_t j = 0; j < c; ++j)
                                              g[(n - 1) * c + j] += o.grad[(n + p) * c + j];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// lookup, dropout, grad plumbing
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> embedding(const std::vector<int>& ids, const Tensor<T>& table) {
    detail::require_matrix("embedding", table);
    const std::size_t v = table.dim(0), c = table.dim(1);
    std::vector<T> out(ids.size() * c);
    for (std::size_t l = 0; l < ids.size(); ++l) {
        if (ids[l] < 0 || static_cast<std::size_t>(ids[l]) >= v)
            throw ValidationError("embedding: id " + std::to_string(ids[l]) + " at position " + std::to_string(l) +
                                  " outside table of size " + std::to_string(v));
        std::memcpy(out.data() + l * c, table.data() + static_cast<std::size_t>(ids[l]) * c, c * sizeof(T));
    }
    return detail::make_op<T>("embedding", Shape{ids.size(), c}, std::move(out), {table}, [ids, c](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t l = 0; l < ids.size(); ++l)
                for (std::size_t j = 0; j < c; ++j)
                    g[static_cast<std::size_t>(ids[l]) * c + j] += o.grad[l * c + j];
    });
}

// Inverted dropout. Identity (the same tensor) outside training.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, RngStream* rng, bool training) {
    if (!training || rate == 0.0) return x;
    if (!(rate >= 0.0 && rate < 1.0))
        throw ValidationError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (!rng) throw ValidationError("dropout: training mode requires an RngStream");
    const T keep_inv = T(1.0 / (1.0 - rate));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = (rng->uniform() >= rate) ? keep_inv : T(0);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    return detail::make_op<T>("dropout", x.dims(), std::move(out), {x}, [mask = std::move(mask)](TensorNode<T>& o) {
        if (T* g = detail::grad_of(o, 0))
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * mask[i];
    });
}

// Cuts the tape: value copy with no gradient path.
template <class T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>::from_data(x.values(), x.dims(), false);
}

// Forward takes `values`, backward routes the gradient to x unchanged.
template <class T>
Tensor<T> straight_through(std::vector<T> values, const Tensor<T>& x) {
    detail::require(values.size() == x.numel(), "straight_through: value count mismatch");
    return detail::make_op<T>("straight_through", x.dims(), std::move(values), {x}, [](TensorNode<T>& o) {
        detail::accumulate(o, 0, o.grad.data(), o.grad.size());
    });
}

// Value-zero node whose gradient path is x's: total + grad_only(x) leaves the
// loss value untouched while still training x's subgraph.
template <class T>
Tensor<T> grad_only(const Tensor<T>& x) {
    detail::require(x.numel() == 1, "grad_only expects a scalar");
    return detail::make_op<T>("grad_only", Shape{1}, {T(0)}, {x}, [](TensorNode<T>& o) {
        detail::accumulate(o, 0, o.grad.data(), o.grad.size());
    });
}

// ---------------------------------------------------------------------------
// conv1d: x (T x Cin), weight (Cout x K x Cin), bias (Cout), same padding
// ---------------------------------------------------------------------------

namespace detail {

// col (T x K*Cin): row t holds the K input slices feeding output frame t
// (zeros where the window leaves the signal).
template <class T>
std::vector<T> conv_im2col(const T* px, std::size_t t_len, std::size_t cin, std::size_t k, int dilation,
                           long pad_left) {
    std::vector<T> col(t_len * k * cin, T(0));
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const long src = static_cast<long>(t) + static_cast<long>(kk) * dilation - pad_left;
            if (src < 0 || src >= static_cast<long>(t_len)) continue;
            std::memcpy(col.data() + (t * k + kk) * cin, px + static_cast<std::size_t>(src) * cin, cin * sizeof(T));
        }
    return col;
}

}  // namespace detail

template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int dilation = 1) {
    detail::require_matrix("conv1d", x);
    detail::require_lazy(weight.rank() == 3, [&] {
        return "conv1d: weight must be rank 3 (Cout x K x Cin), got shape " + shape_str(weight.dims());
    });
    detail::require(dilation >= 1, "conv1d: dilation must be >= 1");
    const std::size_t t_len = x.dim(0), cin = x.dim(1);
    const std::size_t cout = weight.dim(0), k = weight.dim(1);
    detail::require_lazy(weight.dim(2) == cin, [&] {
        return "conv1d: weight expects " + std::to_string(weight.dim(2)) + " input channels but x has shape " +
               shape_str(x.dims());
    });
    detail::require_lazy(bias.numel() == cout, [&] {
        return "conv1d: bias length " + std::to_string(bias.numel()) + " does not match " + std::to_string(cout) +
               " output channels";
    });
    const long pad_left = (static_cast<long>(k - 1) * dilation) / 2;
    const T* pb = bias.data();
    // im2col + gemm; the weight is used as a (Cout x K*Cin) matrix.
    std::vector<T> col = detail::conv_im2col(x.data(), t_len, cin, k, dilation, pad_left);
    std::vector<T> out(t_len * cout);
    for (std::size_t t = 0; t < t_len; ++t) std::memcpy(out.data() + t * cout, pb, cout * sizeof(T));
    detail::gemm_nt(col.data(), weight.data(), out.data(), t_len, k * cin, cout);
    return detail::make_op<T>(
        "conv1d", Shape{t_len, cout}, std::move(out), {x, weight, bias},
        [t_len, cin, cout, k, dilation, pad_left](TensorNode<T>& o) {
            const T* px = o.inputs[0]->value.data();
            const T* pw = o.inputs[1]->value.data();
            T* gx = detail::grad_of(o, 0);
            T* gw = detail::grad_of(o, 1);
            T* gb = detail::grad_of(o, 2);
            const T* go = o.grad.data();
            if (gb)
                for (std::size_t t = 0; t < t_len; ++t)
                    for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += go[t * cout + oc];
            if (gw) {
                std::vector<T> col = detail::conv_im2col(px, t_len, cin, k, dilation, pad_left);
                detail::gemm_tn(go, col.data(), gw, cout, t_len, k * cin);
            }
            if (gx) {
                std::vector<T> dcol(t_len * k * cin, T(0));
                detail::gemm_nn(go, pw, dcol.data(), t_len, cout, k * cin);
                for (std::size_t t = 0; t < t_len; ++t)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const long src = static_cast<long>(t) + static_cast<long>(kk) * dilation - pad_left;
                        if (src < 0 || src >= static_cast<long>(t_len)) continue;
                        const T* drow = dcol.data() + (t * k + kk) * cin;
                        T* gxr = gx + static_cast<std::size_t>(src) * cin;
                        for (std::size_t i = 0; i < cin; ++i) gxr[i] += drow[i];
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// log|det| of a square matrix via LU with partial pivoting
// ---------------------------------------------------------------------------

namespace detail {

// Factorizes a copy of `a` (n x n); returns false when singular. On success
// lu holds the packed factors, piv the pivot rows.
template <class T>
bool lu_factor(std::vector<T>& lu, std::vector<int>& piv, std::size_t n) {
    piv.resize(n);
    int sign = 1;
    for (std::size_t i = 0; i < n; ++i) piv[i] = static_cast<int>(i);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t p = col;
        T best = std::abs(lu[col * n + col]);
        for (std::size_t r = col + 1; r < n; ++r) {
            T v = std::abs(lu[r * n + col]);
            if (v > best) {
                best = v;
                p = r;
            }
        }
        if (!(best > T(0))) return false;
        if (p != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(lu[col * n + j], lu[p * n + j]);
            std::swap(piv[col], piv[p]);
            sign = -sign;
        }
        const T d = lu[col * n + col];
        for (std::size_t r = col + 1; r < n; ++r) {
            const T f = lu[r * n + col] / d;
            lu[r * n + col] = f;
            for (std::size_t j = col + 1; j < n; ++j) lu[r * n + j] -= f * lu[col * n + j];
        }
    }
    (void)sign;
    return true;
}

template <class T>
void lu_solve(const std::vector<T>& lu, const std::vector<int>& piv, std::size_t n, const T* b, T* x) {
    std::vector<T> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = b[static_cast<std::size_t>(piv[i])];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) y[i] -= lu[i * n + j] * y[j];
    for (std::size_t i = n; i-- > 0;) {
        for (std::size_t j = i + 1; j < n; ++j) y[i] -= lu[i * n + j] * y[j];
        y[i] /= lu[i * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) x[i] = y[i];
}

// Dense inverse through the LU factors.
template <class T>
std::vector<T> lu_inverse(const std::vector<T>& lu, const std::vector<int>& piv, std::size_t n) {
    std::vector<T> inv(n * n, T(0));
    std::vector<T> e(n, T(0)), col(n);
    for (std::size_t j = 0; j < n; ++j) {
        std::fill(e.begin(), e.end(), T(0));
        e[j] = T(1);
        lu_solve(lu, piv, n, e.data(), col.data());
        for (std::size_t i = 0; i < n; ++i) inv[i * n + j] = col[i];
    }
    return inv;
}

}  // namespace detail

template <class T>
Tensor<T> logabsdet(const Tensor<T>& w) {
    detail::require_matrix("logabsdet", w);
    detail::require(w.dim(0) == w.dim(1), "logabsdet: matrix must be square, got shape " + shape_str(w.dims()));
    const std::size_t n = w.dim(0);
    std::vector<T> lu(w.values());
    std::vector<int> piv;
    if (!detail::lu_factor(lu, piv, n)) throw NumericalError("logabsdet: singular matrix");
    T lad = T(0);
    for (std::size_t i = 0; i < n; ++i) lad += std::log(std::abs(lu[i * n + i]));
    return detail::make_op<T>("logabsdet", Shape{1}, {lad}, {w},
                              [n, lu = std::move(lu), piv = std::move(piv)](TensorNode<T>& o) {
                                  if (T* g = detail::grad_of(o, 0)) {
                                      // d log|det W| / dW = W^{-T}
                                      std::vector<T> inv = detail::lu_inverse(lu, piv, n);
                                      for (std::size_t i = 0; i < n; ++i)
                                          for (std::size_t j = 0; j < n; ++j)
                                              g[i * n + j] += o.grad[0] * inv[j * n + i];
                                  }
                              });
}

// Composite losses.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> d = sub(a, b);
    return mean_all(mul(d, d));
}

template <class T>
Tensor<T> mae_loss(const Tensor<T>& a, const Tensor<T>& b) {
    return mean_all(abs_op(sub(a, b)));
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
    return mul(a, b);
}

}  // namespace melforge
