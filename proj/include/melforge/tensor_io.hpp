#pragma once

// GSTN binary tensor format, used for every tensor file in the repo:
//   magic "GSTN", u8 version = 1, u8 rank, little-endian u32 dims[rank],
//   little-endian f32 payload, row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "melforge/tensor.hpp"

namespace melforge {

static_assert(std::endian::native == std::endian::little, "GSTN I/O assumes a little-endian host");

inline void write_gstn_stream(std::ostream& out, const Shape& dims, const std::vector<float>& data) {
    if (data.size() != shape_numel(dims)) throw IoError("gstn: payload size does not match dims");
    if (dims.size() > 255) throw IoError("gstn: rank exceeds 255");
    out.write("GSTN", 4);
    const std::uint8_t version = 1;
    const std::uint8_t rank = static_cast<std::uint8_t>(dims.size());
    out.write(reinterpret_cast<const char*>(&version), 1);
    out.write(reinterpret_cast<const char*>(&rank), 1);
    for (std::size_t d : dims) {
        const std::uint32_t v = static_cast<std::uint32_t>(d);
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
    if (!out) throw IoError("gstn: write failed");
}

inline std::pair<Shape, std::vector<float>> read_gstn_stream(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "GSTN", 4) != 0) throw IoError("gstn: bad magic bytes");
    std::uint8_t version = 0, rank = 0;
    in.read(reinterpret_cast<char*>(&version), 1);
    in.read(reinterpret_cast<char*>(&rank), 1);
    if (!in) throw IoError("gstn: truncated header");
    if (version != 1) throw IoError("gstn: unsupported version " + std::to_string(version));
    Shape dims(rank);
    for (auto& d : dims) {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        if (!in) throw IoError("gstn: truncated dims");
        d = v;
    }
    std::vector<float> data(shape_numel(dims));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
    if (!in) throw IoError("gstn: truncated payload");
    return {std::move(dims), std::move(data)};
}

inline void save_gstn(const std::string& path, const Shape& dims, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("gstn: cannot open '" + path + "' for writing");
    write_gstn_stream(out, dims, data);
}

inline std::pair<Shape, std::vector<float>> load_gstn(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("gstn: cannot open '" + path + "'");
    return read_gstn_stream(in);
}

template <class T>
void save_gstn_tensor(const std::string& path, const Tensor<T>& t) {
    std::vector<float> data(t.numel());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(t.data()[i]);
    save_gstn(path, t.dims(), data);
}

template <class T>
Tensor<T> load_gstn_tensor(const std::string& path, bool requires_grad = false) {
    auto [dims, data] = load_gstn(path);
    std::vector<T> cast(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) cast[i] = static_cast<T>(data[i]);
    return Tensor<T>::from_data(std::move(cast), std::move(dims), requires_grad);
}

}  // namespace melforge
