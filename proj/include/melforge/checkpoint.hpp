#pragma once

// Checkpoint container: config snapshot, trainer counters, RNG state, flags,
// and the named parameter table with Adam moments. Tensor payloads use the
// GSTN format, so float models round-trip bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "melforge/config.hpp"
#include "melforge/nn.hpp"
#include "melforge/optim.hpp"
#include "melforge/tensor_io.hpp"

namespace melforge {

struct CheckpointMeta {
    Config config;
    std::uint64_t step = 0;
    std::uint64_t adam_t = 0;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
    bool actnorm_initialized = false;
    bool codebooks_seeded = false;
};

// One named parameter plus its optimizer moments (slot may be null for
// parameters saved without optimizer state, e.g. frozen ones or when a
// checkpoint is loaded for inference only).
template <class T>
struct CheckpointEntry {
    std::string name;
    Tensor<T> tensor;
    AdamSlot<T>* slot = nullptr;
};

template <class T>
std::vector<CheckpointEntry<T>> checkpoint_entries(ParamMap<T>& params, Adam<T>* adam) {
    if (adam && adam->size() != params.items.size())
        throw ValidationError("checkpoint: parameter list and optimizer are out of sync");
    std::vector<CheckpointEntry<T>> out;
    for (std::size_t i = 0; i < params.items.size(); ++i) {
        CheckpointEntry<T> e;
        e.name = params.items[i].first;
        e.tensor = params.items[i].second;
        e.slot = adam ? &adam->slots()[i] : nullptr;
        out.push_back(std::move(e));
    }
    return out;
}

namespace ckpt_detail {

inline void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw IoError("checkpoint: truncated");
    return v;
}
inline std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw IoError("checkpoint: truncated");
    return v;
}

template <class T>
void write_tensor_payload(std::ostream& out, const Shape& dims, const std::vector<T>& data) {
    std::vector<float> f(data.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(data[i]);
    write_gstn_stream(out, dims, f);
}

inline CheckpointMeta read_header(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MFCK", 4) != 0) throw IoError("checkpoint: bad magic bytes");
    std::uint8_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 1);
    if (version != 1) throw IoError("checkpoint: unsupported version " + std::to_string(version));
    CheckpointMeta meta;
    const std::uint32_t cfg_len = read_u32(in);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), cfg_len);
    if (!in) throw IoError("checkpoint: truncated config");
    meta.config = Config::parse(cfg_text);
    meta.step = read_u64(in);
    meta.adam_t = read_u64(in);
    meta.rng_seed = read_u64(in);
    meta.rng_counter = read_u64(in);
    std::uint8_t flags = 0;
    in.read(reinterpret_cast<char*>(&flags), 1);
    if (!in) throw IoError("checkpoint: truncated flags");
    meta.actnorm_initialized = flags & 1;
    meta.codebooks_seeded = flags & 2;
    return meta;
}

}  // namespace ckpt_detail

template <class T>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta, std::vector<CheckpointEntry<T>>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out.write("MFCK", 4);
    const std::uint8_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 1);
    const std::string cfg_text = meta.config.serialize();
    ckpt_detail::write_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
    out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    ckpt_detail::write_u64(out, meta.step);
    ckpt_detail::write_u64(out, meta.adam_t);
    ckpt_detail::write_u64(out, meta.rng_seed);
    ckpt_detail::write_u64(out, meta.rng_counter);
    const std::uint8_t flags = static_cast<std::uint8_t>((meta.actnorm_initialized ? 1 : 0) |
                                                         (meta.codebooks_seeded ? 2 : 0));
    out.write(reinterpret_cast<const char*>(&flags), 1);
    ckpt_detail::write_u32(out, static_cast<std::uint32_t>(entries.size()));
    std::vector<T> zeros;
    for (auto& e : entries) {
        const std::uint16_t len = static_cast<std::uint16_t>(e.name.size());
        out.write(reinterpret_cast<const char*>(&len), 2);
        out.write(e.name.data(), len);
        ckpt_detail::write_tensor_payload<T>(out, e.tensor.dims(), e.tensor.values());
        if (e.slot && !e.slot->m.empty()) {
            ckpt_detail::write_tensor_payload<T>(out, e.tensor.dims(), e.slot->m);
            ckpt_detail::write_tensor_payload<T>(out, e.tensor.dims(), e.slot->v);
        } else {
            zeros.assign(e.tensor.numel(), T(0));
            ckpt_detail::write_tensor_payload<T>(out, e.tensor.dims(), zeros);
            ckpt_detail::write_tensor_payload<T>(out, e.tensor.dims(), zeros);
        }
    }
    if (!out) throw IoError("checkpoint: write failed for '" + path + "'");
}

// Reads only the header (to rebuild the model before loading parameters).
inline CheckpointMeta peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    return ckpt_detail::read_header(in);
}

template <class T>
CheckpointMeta load_checkpoint(const std::string& path, std::vector<CheckpointEntry<T>>& entries) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    CheckpointMeta meta = ckpt_detail::read_header(in);
    const std::uint32_t count = ckpt_detail::read_u32(in);
    if (count != entries.size())
        throw ValidationError("checkpoint: holds " + std::to_string(count) + " parameters but the model has " +
                              std::to_string(entries.size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 2);
        std::string name(len, '\0');
        in.read(name.data(), len);
        if (!in) throw IoError("checkpoint: truncated parameter name");
        CheckpointEntry<T>& e = entries[i];
        if (name != e.name)
            throw ValidationError("checkpoint: parameter '" + name + "' where '" + e.name + "' was expected");
        auto read_into = [&](std::vector<T>* dst) {
            auto [dims, data] = read_gstn_stream(in);
            if (shape_numel(dims) != e.tensor.numel())
                throw ValidationError("checkpoint: parameter '" + name + "' has shape " + shape_str(dims) +
                                      " but the model expects " + shape_str(e.tensor.dims()));
            if (!dst) return;
            dst->resize(data.size());
            for (std::size_t j = 0; j < data.size(); ++j) (*dst)[j] = static_cast<T>(data[j]);
        };
        read_into(&e.tensor.values());
        read_into(e.slot ? &e.slot->m : nullptr);
        read_into(e.slot ? &e.slot->v : nullptr);
    }
    return meta;
}

}  // namespace melforge
