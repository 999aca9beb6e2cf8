#pragma once

// Small module layer over the tensor ops: parameter containers with explicit
// registration (checkpointing walks the same list as the optimizer, so
// ordering is deterministic).

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "melforge/random.hpp"
#include "melforge/tensor.hpp"

namespace melforge {

template <class T>
struct ParamMap {
    std::vector<std::pair<std::string, Tensor<T>>> items;

    void add(std::string name, const Tensor<T>& t) { items.emplace_back(std::move(name), t); }

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }
};

// Per-head attention capture for inspection in tests and debugging.
template <class T>
struct AttentionCapture {
    struct Matrix {
        std::size_t rows = 0, cols = 0;
        std::vector<T> probs;
        std::vector<T> scores;
    };
    std::vector<Matrix> heads;
};

template <class T>
struct ModelContext {
    bool training = false;
    RngStream* rng = nullptr;
    AttentionCapture<T>* capture = nullptr;
};

template <class T>
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, RngStream& rng, bool with_bias = true, T init_scale = T(-1)) {
        const T s = init_scale >= T(0) ? init_scale : T(1) / std::sqrt(static_cast<T>(in));
        weight_ = Tensor<T>::randn({out, in}, rng, s, true);
        if (with_bias) bias_ = Tensor<T>::zeros({out}, true);
    }

    static Linear zero_init(std::size_t in, std::size_t out, bool with_bias = true) {
        Linear l;
        l.weight_ = Tensor<T>::zeros({out, in}, true);
        if (with_bias) l.bias_ = Tensor<T>::zeros({out}, true);
        return l;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> y = matmul_nt(x, weight_);
        if (bias_.defined()) y = add_rowvec(y, bias_);
        return y;
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        pm.add(prefix + ".weight", weight_);
        if (bias_.defined()) pm.add(prefix + ".bias", bias_);
    }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    std::size_t out_features() const { return weight_.dim(0); }

private:
    Tensor<T> weight_;
    Tensor<T> bias_;
};

template <class T>
class Conv1dLayer {
public:
    Conv1dLayer() = default;
    Conv1dLayer(std::size_t in, std::size_t out, std::size_t kernel, RngStream& rng, int dilation = 1)
        : dilation_(dilation) {
        const T s = T(1) / std::sqrt(static_cast<T>(in * kernel));
        weight_ = Tensor<T>::randn({out, kernel, in}, rng, s, true);
        bias_ = Tensor<T>::zeros({out}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv1d(x, weight_, bias_, dilation_); }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        pm.add(prefix + ".weight", weight_);
        pm.add(prefix + ".bias", bias_);
    }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }

private:
    Tensor<T> weight_;
    Tensor<T> bias_;
    int dilation_ = 1;
};

template <class T>
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim, T eps = T(1e-5)) : eps_(eps) {
        gamma_ = Tensor<T>::full({dim}, T(1), true);
        beta_ = Tensor<T>::zeros({dim}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return add_rowvec(mul_rowvec(normalize_rows(x, eps_), gamma_), beta_);
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        pm.add(prefix + ".gamma", gamma_);
        pm.add(prefix + ".beta", beta_);
    }

private:
    Tensor<T> gamma_, beta_;
    T eps_ = T(1e-5);
};

template <class T>
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(std::size_t vocab, std::size_t dim, RngStream& rng, T scale = T(0.3)) {
        table_ = Tensor<T>::randn({vocab, dim}, rng, scale, true);
    }

    Tensor<T> forward(const std::vector<int>& ids) const { return embedding(ids, table_); }

    void register_params(ParamMap<T>& pm, const std::string& prefix) { pm.add(prefix + ".table", table_); }

    Tensor<T>& table() { return table_; }
    std::size_t vocab() const { return table_.dim(0); }

private:
    Tensor<T> table_;
};

// Standard transformer sinusoidal position table (constant, not trained).
template <class T>
Tensor<T> sinusoidal_positions(std::size_t len, std::size_t dim) {
    std::vector<T> pe(len * dim);
    for (std::size_t pos = 0; pos < len; ++pos)
        for (std::size_t i = 0; i < dim; ++i) {
            const double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * (i / 2) / static_cast<double>(dim));
            pe[pos * dim + i] = static_cast<T>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return Tensor<T>::from_data(std::move(pe), {len, dim});
}

template <class T>
Tensor<T> add_positional_encoding(const Tensor<T>& x) {
    return add(x, sinusoidal_positions<T>(x.dim(0), x.dim(1)));
}

}  // namespace melforge
