#pragma once

// FastSpeech-style backbone: feed-forward transformer (FFT) blocks with
// multi-head self-attention and two kernel-9 convolutions, post-norm, shared
// by the phoneme encoder and the mel decoder.

#include <fstream>
#include <string>
#include <vector>

#include "melforge/nn.hpp"

namespace melforge {

struct FFTBlockConfig {
    std::size_t hidden = 256;
    std::size_t layers = 4;
    std::size_t heads = 2;
    std::size_t conv_kernel = 9;
    std::size_t conv_filter = 1024;
    double dropout = 0.1;
};

template <class T>
class MultiHeadSelfAttention {
public:
    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(std::size_t dim, std::size_t heads, RngStream& rng) : dim_(dim), heads_(heads) {
        if (dim % heads != 0)
            throw ValidationError("attention: hidden " + std::to_string(dim) + " not divisible by " +
                                  std::to_string(heads) + " heads");
        wq_ = Linear<T>(dim, dim, rng);
        wk_ = Linear<T>(dim, dim, rng);
        wv_ = Linear<T>(dim, dim, rng);
        wo_ = Linear<T>(dim, dim, rng);
    }

    Tensor<T> forward(const Tensor<T>& x, const ModelContext<T>& ctx) const {
        const std::size_t n = x.dim(0);
        const std::size_t hd = dim_ / heads_;
        Tensor<T> q = wq_.forward(x), k = wk_.forward(x), v = wv_.forward(x);
        Tensor<T> out;
        for (std::size_t h = 0; h < heads_; ++h) {
            Tensor<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
            Tensor<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
            Tensor<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
            Tensor<T> scores = scale(matmul_nt(qh, kh), T(1) / std::sqrt(static_cast<T>(hd)));
            Tensor<T> probs = softmax_rows(scores);
            if (ctx.capture) {
                typename AttentionCapture<T>::Matrix m;
                m.rows = n;
                m.cols = n;
                m.probs = probs.values();
                m.scores = scores.values();
                ctx.capture->heads.push_back(std::move(m));
            }
            Tensor<T> ctx_h = matmul(probs, vh);
            out = (h == 0) ? ctx_h : concat_cols(out, ctx_h);
        }
        return wo_.forward(out);
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        wq_.register_params(pm, prefix + ".wq");
        wk_.register_params(pm, prefix + ".wk");
        wv_.register_params(pm, prefix + ".wv");
        wo_.register_params(pm, prefix + ".wo");
    }

private:
    std::size_t dim_ = 0, heads_ = 1;
    Linear<T> wq_, wk_, wv_, wo_;
};

template <class T>
class FFTBlock {
public:
    FFTBlock() = default;
    FFTBlock(const FFTBlockConfig& cfg, RngStream& rng)
        : attn_(cfg.hidden, cfg.heads, rng),
          ln1_(cfg.hidden),
          conv1_(cfg.hidden, cfg.conv_filter, cfg.conv_kernel, rng),
          conv2_(cfg.conv_filter, cfg.hidden, cfg.conv_kernel, rng),
          ln2_(cfg.hidden),
          dropout_(cfg.dropout) {}

    Tensor<T> forward(const Tensor<T>& x, const ModelContext<T>& ctx) const {
        Tensor<T> h = ln1_.forward(add(x, dropout(attn_.forward(x, ctx), dropout_, ctx.rng, ctx.training)));
        Tensor<T> ff = conv2_.forward(relu(conv1_.forward(h)));
        return ln2_.forward(add(h, dropout(ff, dropout_, ctx.rng, ctx.training)));
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        attn_.register_params(pm, prefix + ".attn");
        ln1_.register_params(pm, prefix + ".ln1");
        conv1_.register_params(pm, prefix + ".conv1");
        conv2_.register_params(pm, prefix + ".conv2");
        ln2_.register_params(pm, prefix + ".ln2");
    }

private:
    MultiHeadSelfAttention<T> attn_;
    LayerNorm<T> ln1_;
    Conv1dLayer<T> conv1_, conv2_;
    LayerNorm<T> ln2_;
    double dropout_ = 0.1;
};

// One symbol per line; line number = id.
struct Vocabulary {
    std::vector<std::string> symbols;

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("vocabulary: cannot open '" + path + "'");
        Vocabulary v;
        std::string line;
        while (std::getline(in, line)) v.symbols.push_back(line);
        if (v.symbols.empty()) throw ValidationError("vocabulary: '" + path + "' is empty");
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("vocabulary: cannot open '" + path + "' for writing");
        for (const auto& s : symbols) out << s << "\n";
    }

    int id_of(const std::string& symbol) const {
        for (std::size_t i = 0; i < symbols.size(); ++i)
            if (symbols[i] == symbol) return static_cast<int>(i);
        throw ValidationError("vocabulary: unknown symbol '" + symbol + "'");
    }
};

struct PhonemeSequence {
    std::vector<int> ids;
    std::vector<int> word_boundaries;  // strictly increasing, first must be 0

    void validate() const {
        if (ids.empty()) throw ValidationError("phoneme sequence: empty");
        if (word_boundaries.empty() || word_boundaries.front() != 0)
            throw ValidationError("phoneme sequence: word boundaries must start at 0");
        for (std::size_t i = 0; i + 1 < word_boundaries.size(); ++i)
            if (word_boundaries[i] >= word_boundaries[i + 1])
                throw ValidationError("phoneme sequence: word boundaries must be strictly increasing");
        if (static_cast<std::size_t>(word_boundaries.back()) >= ids.size())
            throw ValidationError("phoneme sequence: word boundary " + std::to_string(word_boundaries.back()) +
                                  " out of range for " + std::to_string(ids.size()) + " phonemes");
    }
};

template <class T>
class PhonemeEncoder {
public:
    PhonemeEncoder() = default;
    PhonemeEncoder(std::size_t vocab, std::size_t embed_dim, const FFTBlockConfig& cfg, RngStream& rng)
        : vocab_(vocab), embed_(vocab, embed_dim, rng) {
        if (embed_dim != cfg.hidden) proj_ = Linear<T>(embed_dim, cfg.hidden, rng);
        for (std::size_t i = 0; i < cfg.layers; ++i) blocks_.emplace_back(cfg, rng);
    }

    Tensor<T> forward(const std::vector<int>& ids, const ModelContext<T>& ctx) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_)
                throw ValidationError("encoder: unknown phoneme id " + std::to_string(ids[i]) + " at position " +
                                      std::to_string(i));
        Tensor<T> h = embed_.forward(ids);
        if (proj_) h = proj_->forward(h);
        h = add_positional_encoding(h);
        for (const auto& b : blocks_) h = b.forward(h, ctx);
        return h;
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        embed_.register_params(pm, prefix + ".embed");
        if (proj_) proj_->register_params(pm, prefix + ".proj");
        for (std::size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].register_params(pm, prefix + ".block" + std::to_string(i));
    }

private:
    std::size_t vocab_ = 0;
    EmbeddingTable<T> embed_;
    std::optional<Linear<T>> proj_;
    std::vector<FFTBlock<T>> blocks_;
};

template <class T>
class MelDecoder {
public:
    MelDecoder() = default;
    MelDecoder(const FFTBlockConfig& cfg, std::size_t mel_bins, RngStream& rng) {
        for (std::size_t i = 0; i < cfg.layers; ++i) blocks_.emplace_back(cfg, rng);
        out_ = Linear<T>::zero_init(cfg.hidden, mel_bins);
    }

    Tensor<T> forward(const Tensor<T>& h_styled, const ModelContext<T>& ctx) const {
        Tensor<T> h = add_positional_encoding(h_styled);
        for (const auto& b : blocks_) h = b.forward(h, ctx);
        return out_.forward(h);
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        for (std::size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].register_params(pm, prefix + ".block" + std::to_string(i));
        out_.register_params(pm, prefix + ".out");
    }

private:
    std::vector<FFTBlock<T>> blocks_;
    Linear<T> out_;
};

}  // namespace melforge
