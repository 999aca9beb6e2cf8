#pragma once

#include <functional>

#include "melforge/tensor.hpp"

namespace melforge {

// Compares the analytic gradient of a scalar function against central finite
// differences, coordinate by coordinate. `f` must rebuild its graph from the
// current contents of `x` on every call (x is perturbed in place). Returns
// max over coordinates of |analytic - central| / (|analytic| + |central| + eps).
template <class T>
double finite_difference_check(const std::function<Tensor<T>(Tensor<T>&)>& f, Tensor<T>& x, double h) {
    const bool had_rg = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();

    Tensor<T> y = f(x);
    y.backward();
    if (!x.has_grad()) throw ValidationError("finite_difference_check: no gradient reached x");
    std::vector<double> analytic(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) analytic[i] = static_cast<double>(x.grad()[i]);

    double worst = 0.0;
    constexpr double kEps = 1e-12;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const T orig = x.data()[i];
        x.data()[i] = orig + static_cast<T>(h);
        const double fp = static_cast<double>(f(x).item());
        x.data()[i] = orig - static_cast<T>(h);
        const double fm = static_cast<double>(f(x).item());
        x.data()[i] = orig;
        const double central = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + kEps);
        worst = std::max(worst, rel);
    }
    x.zero_grad();
    x.set_requires_grad(had_rg);
    return worst;
}

}  // namespace melforge
