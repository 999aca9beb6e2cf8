#pragma once

// Glow-family conditional post-net. Training runs mel -> latent with an exact
// log-likelihood (accumulated log-determinants); inference samples the prior
// and runs the chain of bijections in reverse.

#include <cassert>
#include <numbers>
#include <vector>

#include "melforge/nn.hpp"

namespace melforge {

enum class FlowSharing {
    Strided,  // steps {k, k+u, k+2u, ...} share one parameter set
    Blocked,  // consecutive runs of steps share one parameter set
};

struct FlowConfig {
    std::size_t steps = 12;
    std::size_t shared_groups = 3;
    std::size_t wn_layers = 3;
    std::size_t wn_kernel = 3;
    std::size_t wn_channels = 192;
    std::size_t squeeze = 2;
    std::size_t mel_bins = 80;
    std::size_t cond_channels = 96;  // width of the squeezed condition after projection
    FlowSharing sharing = FlowSharing::Strided;

    std::size_t channels() const { return mel_bins * squeeze; }
    std::size_t unique_steps() const { return (steps + shared_groups - 1) / shared_groups; }

    void validate() const {
        if (steps == 0 || shared_groups == 0 || squeeze == 0) throw ValidationError("flow: zero-sized config");
        if (steps % shared_groups != 0)
            throw ValidationError("flow: steps " + std::to_string(steps) + " not divisible by shared groups " +
                                  std::to_string(shared_groups));
        if (channels() % 2 != 0) throw ValidationError("flow: squeezed channel count must be even");
    }
};

template <class T>
class ActNorm {
public:
    ActNorm() = default;
    explicit ActNorm(std::size_t channels)
        : scale_(Tensor<T>::full({channels}, T(1), true)), bias_(Tensor<T>::zeros({channels}, true)) {}

    // y = s (x + b); logdet contribution is rows * sum(log|s|).
    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x) const {
        check_scale();
        Tensor<T> y = mul_rowvec(add_rowvec(x, bias_), scale_);
        Tensor<T> logdet = scale(sum_all(log_abs(scale_)), static_cast<T>(x.dim(0)));
        return {y, logdet};
    }

    std::vector<T> inverse(const std::vector<T>& y, std::size_t rows, std::size_t channels) const {
        check_scale();
        std::vector<T> x(y.size());
        const T* s = scale_.data();
        const T* b = bias_.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < channels; ++c) x[r * channels + c] = y[r * channels + c] / s[c] - b[c];
        return x;
    }

    // Data-dependent init: per-channel zero mean, unit variance over the
    // given stack of rows. `scale_floor` bounds 1/sd when a caller needs to
    // keep reapplication under parameter tying from inflating activations.
    void initialize_from(const std::vector<T>& stack, std::size_t rows, std::size_t channels,
                         double scale_floor = 1e-6) {
        std::vector<double> mean(channels, 0.0), var(channels, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < channels; ++c) mean[c] += static_cast<double>(stack[r * channels + c]);
        for (auto& m : mean) m /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < channels; ++c) {
                const double d = static_cast<double>(stack[r * channels + c]) - mean[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < channels; ++c) {
            const double sd = std::max(scale_floor, std::sqrt(var[c] / static_cast<double>(rows)));
            scale_.data()[c] = static_cast<T>(1.0 / sd);
            bias_.data()[c] = static_cast<T>(-mean[c]);
        }
        initialized_ = true;
    }

    bool initialized() const { return initialized_; }
    void mark_initialized(bool v = true) { initialized_ = v; }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        pm.add(prefix + ".scale", scale_);
        pm.add(prefix + ".bias", bias_);
    }

private:
    void check_scale() const {
        for (std::size_t c = 0; c < scale_.numel(); ++c)
            if (std::abs(static_cast<double>(scale_.data()[c])) < 1e-12)
                throw NumericalError("actnorm: scale channel " + std::to_string(c) + " below 1e-12, not invertible");
    }

    Tensor<T> scale_, bias_;
    bool initialized_ = false;
};

template <class T>
class InvConv1x1 {
public:
    InvConv1x1() = default;
    InvConv1x1(std::size_t channels, RngStream& rng) {
        // Random orthogonal init via Gram-Schmidt on a Gaussian matrix, so
        // |det| = 1 and the initial logdet contribution is 0.
        const std::size_t c = channels;
        std::vector<T> m(c * c);
        for (auto& v : m) v = static_cast<T>(rng.normal());
        for (std::size_t col = 0; col < c; ++col) {
            for (std::size_t prev = 0; prev < col; ++prev) {
                T dot = T(0);
                for (std::size_t r = 0; r < c; ++r) dot += m[r * c + col] * m[r * c + prev];
                for (std::size_t r = 0; r < c; ++r) m[r * c + col] -= dot * m[r * c + prev];
            }
            T norm = T(0);
            for (std::size_t r = 0; r < c; ++r) norm += m[r * c + col] * m[r * c + col];
            norm = std::sqrt(norm);
            for (std::size_t r = 0; r < c; ++r) m[r * c + col] /= norm;
        }
        weight_ = Tensor<T>::from_data(std::move(m), {c, c}, true);
    }

    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x) const {
        Tensor<T> y = matmul(x, weight_);
        Tensor<T> logdet = scale(logabsdet(weight_), static_cast<T>(x.dim(0)));
        return {y, logdet};
    }

    std::vector<T> inverse(const std::vector<T>& y, std::size_t rows, std::size_t channels) const {
        std::vector<T> lu(weight_.values());
        std::vector<int> piv;
        if (!detail::lu_factor(lu, piv, channels)) throw NumericalError("inv1x1: singular weight matrix");
        std::vector<T> inv = detail::lu_inverse(lu, piv, channels);
        std::vector<T> x(y.size(), T(0));
        detail::gemm_nn(y.data(), inv.data(), x.data(), rows, channels, channels);
        return x;
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) { pm.add(prefix + ".weight", weight_); }

    Tensor<T>& weight() { return weight_; }
    const Tensor<T>& weight_ref() const { return weight_; }

private:
    Tensor<T> weight_;
};

// Conditioner producing (raw scale, translation) for the coupled half. The
// final projection starts at zero so a fresh coupling is the identity.
template <class T>
class CondWaveNet {
public:
    CondWaveNet() = default;
    CondWaveNet(std::size_t in_channels, std::size_t cond_channels, std::size_t out_channels, const FlowConfig& cfg,
                RngStream& rng)
        : start_(in_channels, cfg.wn_channels, rng), channels_(cfg.wn_channels) {
        for (std::size_t i = 0; i < cfg.wn_layers; ++i) {
            gates_.emplace_back(cfg.wn_channels, 2 * cfg.wn_channels, cfg.wn_kernel, rng, 1 << i);
            cond_proj_.emplace_back(cond_channels, 2 * cfg.wn_channels, rng);
            res_.emplace_back(cfg.wn_channels, cfg.wn_channels, rng);
        }
        end_ = Linear<T>::zero_init(cfg.wn_channels, out_channels);
    }

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& cond) const {
        Tensor<T> h = start_.forward(x);
        for (std::size_t i = 0; i < gates_.size(); ++i) {
            Tensor<T> g = add(gates_[i].forward(h), cond_proj_[i].forward(cond));
            Tensor<T> z = mul(tanh_op(slice_cols(g, 0, channels_)), sigmoid(slice_cols(g, channels_, 2 * channels_)));
            h = add(h, res_[i].forward(z));
        }
        return end_.forward(h);
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        start_.register_params(pm, prefix + ".start");
        for (std::size_t i = 0; i < gates_.size(); ++i) {
            gates_[i].register_params(pm, prefix + ".gate" + std::to_string(i));
            cond_proj_[i].register_params(pm, prefix + ".cond" + std::to_string(i));
            res_[i].register_params(pm, prefix + ".res" + std::to_string(i));
        }
        end_.register_params(pm, prefix + ".end");
    }

private:
    Linear<T> start_;
    std::vector<Conv1dLayer<T>> gates_;
    std::vector<Linear<T>> cond_proj_;
    std::vector<Linear<T>> res_;
    Linear<T> end_;
    std::size_t channels_ = 0;
};

template <class T>
class AffineCoupling {
public:
    AffineCoupling() = default;
    AffineCoupling(std::size_t channels, std::size_t cond_channels, const FlowConfig& cfg, RngStream& rng)
        : net_(channels / 2, cond_channels, channels, cfg, rng), half_(channels / 2) {}

    // y_a = x_a; y_b = s * x_b + t with (raw_s, t) = net(x_a, cond) and
    // s = sigmoid(raw_s + 2) / sigmoid(2), exactly 1 at zero init.
    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x, const Tensor<T>& cond) const {
        Tensor<T> xa = slice_cols(x, 0, half_);
        Tensor<T> xb = slice_cols(x, half_, 2 * half_);
        auto [s, t] = scale_translate(xa, cond);
        Tensor<T> yb = add(mul(s, xb), t);
        Tensor<T> logdet = sum_all(log_op(s));
        return {concat_cols(xa, yb), logdet};
    }

    std::vector<T> inverse(const std::vector<T>& y, const Tensor<T>& cond, std::size_t rows) const {
        const std::size_t c = 2 * half_;
        std::vector<T> ya(rows * half_), yb(rows * half_);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < half_; ++j) {
                ya[r * half_ + j] = y[r * c + j];
                yb[r * half_ + j] = y[r * c + half_ + j];
            }
        NoGradGuard ng;
        Tensor<T> xa = Tensor<T>::from_data(ya, {rows, half_});
        auto [s, t] = scale_translate(xa, cond);
        std::vector<T> x(rows * c);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < half_; ++j) {
                x[r * c + j] = ya[r * half_ + j];
                x[r * c + half_ + j] = (yb[r * half_ + j] - t.data()[r * half_ + j]) / s.data()[r * half_ + j];
            }
        return x;
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) { net_.register_params(pm, prefix + ".net"); }

private:
    std::pair<Tensor<T>, Tensor<T>> scale_translate(const Tensor<T>& xa, const Tensor<T>& cond) const {
        Tensor<T> out = net_.forward(xa, cond);
        Tensor<T> raw_s = slice_cols(out, 0, half_);
        Tensor<T> t = slice_cols(out, half_, 2 * half_);
        const T inv_sig2 = T(1) / (T(1) / (T(1) + std::exp(T(-2))));
        Tensor<T> s = scale(sigmoid(add_scalar(raw_s, T(2))), inv_sig2);
        return {s, t};
    }

    CondWaveNet<T> net_;
    std::size_t half_ = 0;
};

template <class T>
struct FlowStep {
    ActNorm<T> actnorm;
    InvConv1x1<T> conv;
    AffineCoupling<T> coupling;

    FlowStep() = default;
    FlowStep(std::size_t channels, std::size_t cond_channels, const FlowConfig& cfg, RngStream& rng)
        : actnorm(channels), conv(channels, rng), coupling(channels, cond_channels, cfg, rng) {}

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        actnorm.register_params(pm, prefix + ".actnorm");
        conv.register_params(pm, prefix + ".inv1x1");
        coupling.register_params(pm, prefix + ".coupling");
    }
};

template <class T>
struct FlowResult {
    Tensor<T> z;
    Tensor<T> nll;      // negative log-likelihood per dimension
    Tensor<T> logdet;   // accumulated log|det J|
};

template <class T>
class FlowPostNet {
public:
    FlowPostNet() = default;
    FlowPostNet(const FlowConfig& cfg, RngStream& rng) : cfg_(cfg) {
        cfg_.validate();
        for (std::size_t i = 0; i < cfg_.unique_steps(); ++i)
            unique_.emplace_back(cfg_.channels(), cfg_.cond_channels, cfg_, rng);
    }

    const FlowConfig& config() const { return cfg_; }

    // Maps step index onto its parameter set according to the sharing mode.
    std::size_t param_index(std::size_t step) const {
        const std::size_t u = cfg_.unique_steps();
        return cfg_.sharing == FlowSharing::Strided ? step % u : step / cfg_.shared_groups;
    }

    FlowStep<T>& step_params(std::size_t step) { return unique_[param_index(step)]; }
    std::vector<FlowStep<T>>& unique_steps() { return unique_; }

    std::size_t pad_frames(std::size_t t) const {
        const std::size_t f = cfg_.squeeze;
        return (f - t % f) % f;
    }

    // One log|det W| node per unique weight; shareable across a batch so the
    // backward pass factorizes each weight once, not once per utterance.
    std::vector<Tensor<T>> conv_logabsdets() const {
        std::vector<Tensor<T>> out;
        for (const auto& u : unique_) out.push_back(logabsdet(u.conv.weight_ref()));
        return out;
    }

    // mel: T x bins (graph-capable); cond: squeezed rows x cond_channels.
    FlowResult<T> nll(const Tensor<T>& mel, const Tensor<T>& cond,
                      const std::vector<Tensor<T>>* shared_lads = nullptr) const {
        const std::size_t pad = pad_frames(mel.dim(0));
        Tensor<T> x = pad > 0 ? pad_rows_repeat_last(mel, pad) : mel;
        const std::size_t rows = x.dim(0) / cfg_.squeeze;
        const std::size_t channels = cfg_.channels();
        if (cond.dim(0) != rows)
            throw ShapeError("flow: condition has " + std::to_string(cond.dim(0)) + " rows, expected " +
                             std::to_string(rows));
        Tensor<T> z = reshape(x, {rows, channels});
        Tensor<T> logdet_total = Tensor<T>::zeros({1});
        std::vector<Tensor<T>> conv_logdets = shared_lads ? *shared_lads
                                                          : std::vector<Tensor<T>>(unique_.size());
        for (std::size_t i = 0; i < cfg_.steps; ++i) {
            const FlowStep<T>& p = unique_[param_index(i)];
            auto [y1, ld1] = p.actnorm.forward(z);
            if (!conv_logdets[param_index(i)].defined()) conv_logdets[param_index(i)] = logabsdet(p.conv.weight_ref());
            Tensor<T> y2 = matmul(y1, p.conv.weight_ref());
            Tensor<T> ld2 = scale(conv_logdets[param_index(i)], static_cast<T>(rows));
            auto [y3, ld3] = p.coupling.forward(y2, cond);
            z = y3;
            logdet_total = add(add(logdet_total, ld1), add(ld2, ld3));
            for (std::size_t e = 0; e < z.numel(); ++e)
                if (!std::isfinite(static_cast<double>(z.data()[e])))
                    throw NumericalError("flow: non-finite value after step " + std::to_string(i));
        }
        const T dim_count = static_cast<T>(z.numel());
        Tensor<T> ssq = sum_all(mul(z, z));
        Tensor<T> loglik = add(scale(ssq, T(-0.5)), logdet_total);
        loglik = add_scalar(loglik, T(-0.5) * dim_count * static_cast<T>(std::log(2.0 * std::numbers::pi)));
        FlowResult<T> out;
        out.z = z;
        out.logdet = logdet_total;
        out.nll = scale(loglik, T(-1) / dim_count);
        return out;
    }

    // Draw z ~ N(0, tau^2 I) and run the flow in reverse. Returns the fine
    // mel with padding stripped back to t_frames rows.
    Tensor<T> sample(const Tensor<T>& cond, std::size_t t_frames, T tau, RngStream& rng) const {
        if (tau < T(0)) throw ValidationError("flow sample: temperature must be >= 0");
        const std::size_t rows = cond.dim(0);
        const std::size_t channels = cfg_.channels();
        std::vector<T> z(rows * channels);
        for (auto& v : z) v = tau * static_cast<T>(rng.normal());
        std::vector<T> x = inverse_values(std::move(z), cond, rows);
        std::vector<T> mel((rows * cfg_.squeeze) * cfg_.mel_bins);
        std::memcpy(mel.data(), x.data(), mel.size() * sizeof(T));
        mel.resize(t_frames * cfg_.mel_bins);
        return Tensor<T>::from_data(std::move(mel), {t_frames, cfg_.mel_bins});
    }

    // Value-level inverse of the whole chain (latent rows -> squeezed mel rows).
    std::vector<T> inverse_values(std::vector<T> z, const Tensor<T>& cond, std::size_t rows) const {
        const std::size_t channels = cfg_.channels();
        for (std::size_t i = cfg_.steps; i-- > 0;) {
            const FlowStep<T>& p = unique_[param_index(i)];
            z = p.coupling.inverse(z, cond, rows);
            z = p.conv.inverse(z, rows, channels);
            z = p.actnorm.inverse(z, rows, channels);
        }
        return z;
    }

    // Value-level forward (squeezed mel rows -> latent rows), no tape.
    std::vector<T> forward_values(std::vector<T> x, const Tensor<T>& cond, std::size_t rows) const {
        NoGradGuard ng;
        Tensor<T> z = Tensor<T>::from_data(std::move(x), {rows, cfg_.channels()});
        for (std::size_t i = 0; i < cfg_.steps; ++i) {
            const FlowStep<T>& p = unique_[param_index(i)];
            auto [y1, ld1] = p.actnorm.forward(z);
            Tensor<T> y2 = matmul(y1, p.conv.weight_ref());
            auto [y3, ld3] = p.coupling.forward(y2, cond);
            z = y3;
        }
        return z.values();
    }

    bool actnorm_initialized() const {
        for (const auto& u : unique_)
            if (!u.actnorm.initialized()) return false;
        return true;
    }

    void mark_actnorm_initialized(bool v) {
        for (auto& u : unique_) u.actnorm.mark_initialized(v);
    }

    // Data-dependent actnorm init over a batch of squeezed inputs (values)
    // and their conditions. Each unique actnorm is initialized from the
    // batch statistics at its first depth. With parameters tied across
    // depths the later applications cannot be normalized simultaneously, so
    // the per-channel scale is floored: near-constant channels would
    // otherwise receive scales that inflate the already-normalized
    // activations at reuse depths. The optimizer absorbs the remainder
    // within the first few steps.
    void initialize_actnorm(const std::vector<std::vector<T>>& batch, const std::vector<Tensor<T>>& conds,
                            const std::vector<std::size_t>& rows) {
        NoGradGuard ng;
        const std::size_t channels = cfg_.channels();
        // With tying, any scale above 1 re-inflates the depths where the set
        // is reapplied; shrink-only scaling keeps the initial latent bounded.
        const double floor = cfg_.shared_groups > 1 ? 1.0 : 1e-6;
        std::vector<std::vector<T>> zs = batch;
        for (std::size_t i = 0; i < cfg_.steps; ++i) {
            FlowStep<T>& p = unique_[param_index(i)];
            if (!p.actnorm.initialized()) {
                std::vector<T> stack;
                std::size_t total_rows = 0;
                for (std::size_t b = 0; b < zs.size(); ++b) {
                    stack.insert(stack.end(), zs[b].begin(), zs[b].end());
                    total_rows += rows[b];
                }
                p.actnorm.initialize_from(stack, total_rows, channels, floor);
            }
            for (std::size_t b = 0; b < zs.size(); ++b) {
                Tensor<T> z = Tensor<T>::from_data(std::move(zs[b]), {rows[b], channels});
                auto [y1, ld1] = p.actnorm.forward(z);
                Tensor<T> y2 = matmul(y1, p.conv.weight_ref());
                auto [y3, ld3] = p.coupling.forward(y2, conds[b]);
                zs[b] = y3.values();
            }
        }
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        for (std::size_t i = 0; i < unique_.size(); ++i)
            unique_[i].register_params(pm, prefix + ".step" + std::to_string(i));
    }

private:
    FlowConfig cfg_;
    std::vector<FlowStep<T>> unique_;
};

}  // namespace melforge
