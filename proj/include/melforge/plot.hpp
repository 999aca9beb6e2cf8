#pragma once

// Grayscale mel plots as binary PGM (P5): 80 rows by T columns, min-max
// normalized per image, frequency axis bottom-up (row 0 of the image is the
// highest bin). A constant image maps to mid-gray 128.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "melforge/tensor.hpp"

namespace melforge {

inline std::vector<std::uint8_t> mel_to_gray(const std::vector<float>& mel, std::size_t frames, std::size_t bins) {
    if (mel.size() != frames * bins) throw ShapeError("mel_to_gray: payload does not match frames x bins");
    float lo = mel[0], hi = mel[0];
    for (float v : mel) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::vector<std::uint8_t> img(frames * bins);
    for (std::size_t row = 0; row < bins; ++row) {
        const std::size_t bin = bins - 1 - row;
        for (std::size_t t = 0; t < frames; ++t) {
            const float v = mel[t * bins + bin];
            const long g = (hi > lo) ? std::lround((v - lo) / (hi - lo) * 255.0f) : 128;
            img[row * frames + t] = static_cast<std::uint8_t>(g);
        }
    }
    return img;
}

inline void plot_mel(const std::vector<float>& mel, std::size_t frames, std::size_t bins, const std::string& path) {
    std::vector<std::uint8_t> img = mel_to_gray(mel, frames, bins);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("plot_mel: cannot open '" + path + "' for writing");
    out << "P5\n" << frames << " " << bins << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    if (!out) throw IoError("plot_mel: write failed for '" + path + "'");
}

template <class T>
void plot_mel(const Tensor<T>& mel, const std::string& path) {
    std::vector<float> data(mel.numel());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(mel.data()[i]);
    plot_mel(data, mel.dim(0), mel.dim(1), path);
}

}  // namespace melforge
