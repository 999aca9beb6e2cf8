#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "melforge/tensor.hpp"

namespace melforge {

template <class T>
struct AdamHyper {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.98);
    T eps = T(1e-9);
};

// Moments for one parameter tensor.
template <class T>
struct AdamSlot {
    std::vector<T> m;
    std::vector<T> v;
};

// One Adam update with bias correction. `t` is the step count after this
// update (pass 1 on the first call). Kept free-standing so tests can drive
// the recurrence directly.
template <class T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamSlot<T>& slot, long t, const AdamHyper<T>& hp) {
    if (param.size() != grad.size())
        throw ShapeError("adam_step: parameter has " + std::to_string(param.size()) + " elements but gradient has " +
                         std::to_string(grad.size()));
    if (slot.m.empty()) {
        slot.m.assign(param.size(), T(0));
        slot.v.assign(param.size(), T(0));
    }
    const T bc1 = T(1) - std::pow(hp.beta1, static_cast<T>(t));
    const T bc2 = T(1) - std::pow(hp.beta2, static_cast<T>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T g = grad[i];
        if (!std::isfinite(static_cast<double>(g)))
            throw NumericalError("adam_step: non-finite gradient at element " + std::to_string(i));
        slot.m[i] = hp.beta1 * slot.m[i] + (T(1) - hp.beta1) * g;
        slot.v[i] = hp.beta2 * slot.v[i] + (T(1) - hp.beta2) * g * g;
        const T mhat = slot.m[i] / bc1;
        const T vhat = slot.v[i] / bc2;
        param[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
}

// Optimizer over a fixed list of registered parameters.
template <class T>
class Adam {
public:
    explicit Adam(AdamHyper<T> hp = {}) : hp_(hp) {}

    void add_param(Tensor<T> p) {
        params_.push_back(std::move(p));
        slots_.emplace_back();
    }

    void add_params(const std::vector<std::pair<std::string, Tensor<T>>>& named) {
        for (const auto& [name, p] : named) add_param(p);
    }

    std::size_t size() const { return params_.size(); }
    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }
    AdamHyper<T>& hyper() { return hp_; }
    const AdamHyper<T>& hyper() const { return hp_; }

    // Applies one update using each parameter's accumulated gradient, then
    // clears the gradients. Parameters without a gradient buffer are skipped
    // (they did not participate in the step).
    void step(T lr_override = T(-1)) {
        ++t_;
        AdamHyper<T> hp = hp_;
        if (lr_override >= T(0)) hp.lr = lr_override;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& p = params_[i];
            if (!p.has_grad()) continue;
            adam_step<T>(std::span<T>(p.values()), std::span<const T>(p.grad_values()), slots_[i], t_, hp);
            p.zero_grad();
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::vector<Tensor<T>>& params() { return params_; }
    std::vector<AdamSlot<T>>& slots() { return slots_; }

private:
    AdamHyper<T> hp_;
    std::vector<Tensor<T>> params_;
    std::vector<AdamSlot<T>> slots_;
    long t_ = 0;
};

}  // namespace melforge
