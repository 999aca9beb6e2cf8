#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace melforge {

// Error taxonomy used across the library. The CLI maps these onto exit codes:
// validation -> 1, numerical -> 2, I/O -> 3.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

inline std::size_t shape_numel(const Shape& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
}

}  // namespace melforge
