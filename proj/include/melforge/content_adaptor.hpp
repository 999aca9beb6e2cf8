#pragma once

// Generalizable content adaptor: mix-style layer normalization that perturbs
// style scale/bias during training, duration prediction, length regulation,
// and the style-agnostic pitch predictor.

#include <vector>

#include "melforge/nn.hpp"
#include "melforge/pitch_cwt.hpp"

namespace melforge {

struct MixStyleConfig {
    double alpha = 0.2;  // Beta distribution parameter for the mixing weight
    double p = 0.2;      // probability of applying the mix on a training step

    void validate() const {
        if (!(alpha > 0.0)) throw ValidationError("mixstyle: alpha must be > 0");
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("mixstyle: p must be in [0, 1]");
    }
};

// Style-conditioned scale/bias: gamma(w) and beta(w) from two linear maps.
template <class T>
class ConditionalScaleBias {
public:
    ConditionalScaleBias() = default;
    ConditionalScaleBias(std::size_t style_dim, std::size_t hidden, RngStream& rng, bool with_bias = true) {
        gamma_map_ = Linear<T>(style_dim, hidden, rng, with_bias, T(0.01));
        beta_map_ = Linear<T>(style_dim, hidden, rng, with_bias, T(0.01));
        if (with_bias) {
            // Start near the plain layer norm: gamma ~ 1, beta ~ 0.
            auto& gb = gamma_map_.bias();
            std::fill(gb.values().begin(), gb.values().end(), T(1));
        }
    }

    // w is a 1 x style_dim row; returns (gamma, beta) as 1 x hidden rows.
    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& w) const {
        return {gamma_map_.forward(w), beta_map_.forward(w)};
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        gamma_map_.register_params(pm, prefix + ".gamma_map");
        beta_map_.register_params(pm, prefix + ".beta_map");
    }

private:
    Linear<T> gamma_map_, beta_map_;
};

template <class T>
class MixStyleLayerNorm {
public:
    MixStyleLayerNorm() = default;
    MixStyleLayerNorm(std::size_t style_dim, std::size_t hidden, MixStyleConfig cfg, RngStream& rng)
        : cfg_(cfg), maps_(style_dim, hidden, rng) {
        cfg_.validate();
    }

    // Conditional layer norm: gamma(w) * normalize(x) + beta(w).
    Tensor<T> cln(const Tensor<T>& x, const Tensor<T>& w) const {
        auto [gamma, beta] = maps_.forward(w);
        return add_rowvec(mul_rowvec(normalize_rows(x, T(kEps)), gamma), beta);
    }

    // Deterministic core: normalize each sequence, then apply per-utterance
    // convex mixtures of its own and a permuted partner's scale/bias.
    std::vector<Tensor<T>> apply_mixed(const std::vector<Tensor<T>>& xs, const std::vector<Tensor<T>>& ws,
                                       const std::vector<T>& lambdas, const std::vector<std::size_t>& perm) const {
        const std::size_t b = xs.size();
        if (ws.size() != b)
            throw ValidationError("mix_style_layer_norm: batch has " + std::to_string(b) + " sequences but " +
                                  std::to_string(ws.size()) + " style vectors");
        if (lambdas.size() != b || perm.size() != b)
            throw ValidationError("mix_style_layer_norm: lambda/permutation size mismatch");
        std::vector<Tensor<T>> gammas(b), betas(b);
        for (std::size_t i = 0; i < b; ++i) {
            auto [g, be] = maps_.forward(ws[i]);
            gammas[i] = g;
            betas[i] = be;
        }
        std::vector<Tensor<T>> out(b);
        for (std::size_t i = 0; i < b; ++i) {
            const T lam = lambdas[i];
            Tensor<T> gm = add(scale(gammas[i], lam), scale(gammas[perm[i]], T(1) - lam));
            Tensor<T> bm = add(scale(betas[i], lam), scale(betas[perm[i]], T(1) - lam));
            out[i] = add_rowvec(mul_rowvec(normalize_rows(xs[i], T(kEps)), gm), bm);
        }
        return out;
    }

    // The training-time stochastic wrapper. Outside training (or when the
    // gate draw exceeds p) the inputs pass through untouched.
    std::vector<Tensor<T>> forward_batch(const std::vector<Tensor<T>>& xs, const std::vector<Tensor<T>>& ws,
                                         const ModelContext<T>& ctx) const {
        if (xs.size() != ws.size())
            throw ValidationError("mix_style_layer_norm: batch has " + std::to_string(xs.size()) +
                                  " sequences but " + std::to_string(ws.size()) + " style vectors");
        if (!ctx.training) return xs;
        if (!ctx.rng) throw ValidationError("mix_style_layer_norm: training mode requires an rng");
        if (ctx.rng->uniform() > cfg_.p) return xs;
        const std::size_t b = xs.size();
        std::vector<T> lambdas(b);
        for (auto& l : lambdas) l = static_cast<T>(sample_beta(cfg_.alpha, *ctx.rng));
        std::vector<std::size_t> perm = ctx.rng->permutation(b);
        return apply_mixed(xs, ws, lambdas, perm);
    }

    std::pair<Tensor<T>, Tensor<T>> scale_bias(const Tensor<T>& w) const { return maps_.forward(w); }

    const MixStyleConfig& config() const { return cfg_; }

    void register_params(ParamMap<T>& pm, const std::string& prefix) { maps_.register_params(pm, prefix); }

    static constexpr double kEps = 1e-5;

private:
    MixStyleConfig cfg_;
    ConditionalScaleBias<T> maps_;
};

// Two conv layers (kernel 3) with relu, layer norm and dropout, then a linear
// head; the variance-predictor pattern shared by duration and pitch.
template <class T>
class PredictorBody {
public:
    PredictorBody() = default;
    PredictorBody(std::size_t in, std::size_t filter, std::size_t kernel, double drop, RngStream& rng)
        : conv1_(in, filter, kernel, rng), ln1_(filter), conv2_(filter, filter, kernel, rng), ln2_(filter),
          drop_(drop) {}

    Tensor<T> forward(const Tensor<T>& x, const ModelContext<T>& ctx) const {
        Tensor<T> h = dropout(ln1_.forward(relu(conv1_.forward(x))), drop_, ctx.rng, ctx.training);
        return dropout(ln2_.forward(relu(conv2_.forward(h))), drop_, ctx.rng, ctx.training);
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        conv1_.register_params(pm, prefix + ".conv1");
        ln1_.register_params(pm, prefix + ".ln1");
        conv2_.register_params(pm, prefix + ".conv2");
        ln2_.register_params(pm, prefix + ".ln2");
    }

private:
    Conv1dLayer<T> conv1_;
    LayerNorm<T> ln1_;
    Conv1dLayer<T> conv2_;
    LayerNorm<T> ln2_;
    double drop_ = 0.5;
};

template <class T>
class DurationPredictor {
public:
    DurationPredictor() = default;
    DurationPredictor(std::size_t hidden, std::size_t filter, RngStream& rng)
        : body_(hidden, filter, 3, 0.5, rng), head_(Linear<T>::zero_init(filter, 1)) {}

    // Returns per-phoneme predicted log durations as a length-L vector. The
    // style vector conditions the prediction by broadcast addition.
    Tensor<T> forward(const Tensor<T>& h, const Tensor<T>& w, const ModelContext<T>& ctx) const {
        Tensor<T> x = add_rowvec(h, w);
        Tensor<T> out = head_.forward(body_.forward(x, ctx));
        return reshape(out, {out.dim(0)});
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        body_.register_params(pm, prefix + ".body");
        head_.register_params(pm, prefix + ".head");
    }

private:
    PredictorBody<T> body_;
    Linear<T> head_;
};

// Expands row i of h durations[i] times; total length is the sum.
template <class T>
Tensor<T> length_regulate(const Tensor<T>& h, const std::vector<int>& durations) {
    if (durations.size() != h.dim(0))
        throw ValidationError("length_regulate: " + std::to_string(durations.size()) + " durations for " +
                              std::to_string(h.dim(0)) + " rows");
    long total = 0;
    for (int d : durations) {
        if (d < 0) throw ValidationError("length_regulate: negative duration");
        total += d;
    }
    if (total == 0) throw ValidationError("length_regulate: all durations are zero");
    return repeat_rows(h, durations);
}

// Rounds predicted log durations to frame counts, at least one frame each.
template <class T>
std::vector<int> durations_from_log(const Tensor<T>& log_d) {
    std::vector<int> out(log_d.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double frames = std::exp(static_cast<double>(log_d.data()[i]));
        out[i] = std::max(1, static_cast<int>(std::lround(frames)));
    }
    return out;
}

// Pitch predictor shared by the style-agnostic and style-specific paths:
// per-frame wavelet coefficients plus an utterance-level (mean, std) head.
template <class T>
class PitchPredictor {
public:
    PitchPredictor() = default;
    PitchPredictor(std::size_t hidden, std::size_t filter, std::size_t n_scales, RngStream& rng)
        : body_(hidden, filter, 3, 0.5, rng), coeff_head_(Linear<T>::zero_init(filter, n_scales)),
          stats_head_(Linear<T>::zero_init(filter, 2)) {}

    PitchSpec<T> forward(const Tensor<T>& x, const ModelContext<T>& ctx) const {
        Tensor<T> h = body_.forward(x, ctx);
        PitchSpec<T> out;
        out.coeffs = coeff_head_.forward(h);
        out.stats = stats_head_.forward(reshape(mean_rows(h), {1, h.dim(1)}));
        return out;
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        body_.register_params(pm, prefix + ".body");
        coeff_head_.register_params(pm, prefix + ".coeff_head");
        stats_head_.register_params(pm, prefix + ".stats_head");
    }

private:
    PredictorBody<T> body_;
    Linear<T> coeff_head_;
    Linear<T> stats_head_;
};

}  // namespace melforge
