#pragma once

#include <cmath>
#include <iostream>
#include <vector>

#include "melforge/common.hpp"

namespace melforge {

// F0 frame error: fraction of frames with a voicing-decision mismatch or,
// among both-voiced frames, a relative deviation above the gross-error
// threshold (reference in the denominator). Contours of unequal length are
// trimmed to the shorter one with a warning.
inline double metric_ffe(const std::vector<double>& ref, const std::vector<double>& syn,
                         double gross_threshold = 0.2, std::ostream* warn = &std::cerr) {
    if (ref.empty() || syn.empty()) throw ValidationError("metric_ffe: zero-length contour");
    std::size_t n = std::min(ref.size(), syn.size());
    if (ref.size() != syn.size() && warn)
        *warn << "metric_ffe: length mismatch (" << ref.size() << " vs " << syn.size() << "), trimming to " << n
              << " frames\n";
    std::size_t errors = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const bool rv = ref[t] > 0.0, sv = syn[t] > 0.0;
        if (rv != sv) {
            ++errors;
        } else if (rv && sv) {
            if (std::abs(syn[t] - ref[t]) / ref[t] > gross_threshold) ++errors;
        }
    }
    return static_cast<double>(errors) / static_cast<double>(n);
}

inline double metric_cosine(const std::vector<double>& e1, const std::vector<double>& e2) {
    if (e1.size() != e2.size())
        throw ShapeError("metric_cosine: embedding sizes disagree, " + std::to_string(e1.size()) + " vs " +
                         std::to_string(e2.size()));
    double dot = 0.0, n1 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < e1.size(); ++i) {
        dot += e1[i] * e2[i];
        n1 += e1[i] * e1[i];
        n2 += e2[i] * e2[i];
    }
    if (!(n1 > 0.0) || !(n2 > 0.0)) throw ValidationError("metric_cosine: zero-norm embedding");
    return dot / (std::sqrt(n1) * std::sqrt(n2));
}

}  // namespace melforge
