#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "melforge/common.hpp"

namespace melforge {

// Counter-based deterministic random stream.
//
// Draw i is splitmix64's finalizer applied to (seed + GOLDEN * i), i.e. the
// i-th element of the SplitMix64 sequence seeded at `seed`. State is just
// (seed, counter), which makes streams trivially serializable and
// platform-stable: the same seed always yields the same sample sequence.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + kGolden * ++counter_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform in (0, 1); never returns 0 so logs are safe.
    double uniform_open() {
        double u = uniform();
        return u > 0.0 ? u : 0x1.0p-53;
    }

    // Box-Muller; consumes exactly two draws, keeps no spare.
    double normal() {
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Marsaglia-Tsang, with the alpha < 1 boost Gamma(a) = Gamma(a+1) * U^(1/a).
    double gamma(double alpha) {
        if (!(alpha > 0.0)) throw ValidationError("gamma: alpha must be > 0, got " + std::to_string(alpha));
        if (alpha < 1.0) {
            double u = uniform_open();
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform_open();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Symmetric Beta(alpha, alpha) via two gamma draws.
    double beta(double alpha) {
        if (!(alpha > 0.0)) throw ValidationError("beta: alpha must be > 0, got " + std::to_string(alpha));
        double x = gamma(alpha);
        double y = gamma(alpha);
        double s = x + y;
        return s > 0.0 ? x / s : 0.5;
    }

    // Fisher-Yates.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = next_u64() % i;
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    // Independent child stream keyed by a label (FNV-1a over the label mixed
    // into this stream's seed). Does not consume state.
    RngStream derive(std::string_view label) const {
        std::uint64_t h = 0xCBF29CE484222325ULL ^ seed_;
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        return RngStream(h);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

// Draw from Beta(alpha, alpha).
inline double sample_beta(double alpha, RngStream& rng) {
    if (!(alpha > 0.0)) throw ValidationError("sample_beta: alpha must be > 0, got " + std::to_string(alpha));
    return rng.beta(alpha);
}

}  // namespace melforge
