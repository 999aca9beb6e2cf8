#pragma once

// Multi-level style adaptor: global speaker/emotion embeddings from a compact
// reference encoder, three local style encoders with vector-quantization
// bottlenecks, scaled dot-product style-to-content alignment, and the
// style-specific pitch predictor (shared PitchPredictor type).

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "melforge/content_adaptor.hpp"
#include "melforge/nn.hpp"

namespace melforge {

template <class T>
struct GlobalStyle {
    Tensor<T> speaker;  // 1 x dim
    Tensor<T> emotion;  // 1 x dim

    Tensor<T> combined() const { return add(speaker, emotion); }
};

// Reference-mel encoder standing in for a large pretrained model: a conv
// stack over frames, average pooling, and two linear heads.
template <class T>
class GlobalStyleEncoder {
public:
    GlobalStyleEncoder() = default;
    GlobalStyleEncoder(std::size_t mel_bins, std::size_t hidden, std::size_t embed_dim, RngStream& rng)
        : conv1_(mel_bins, hidden, 5, rng), ln1_(hidden), conv2_(hidden, hidden, 5, rng), ln2_(hidden),
          conv3_(hidden, hidden, 5, rng), ln3_(hidden), head_s_(hidden, embed_dim, rng),
          head_e_(hidden, embed_dim, rng), ext_proj_(kExternalDim, embed_dim, rng), embed_dim_(embed_dim) {}

    GlobalStyle<T> forward(const Tensor<T>& mel, const ModelContext<T>& ctx) const {
        (void)ctx;
        Tensor<T> h = ln1_.forward(relu(conv1_.forward(mel)));
        h = ln2_.forward(relu(conv2_.forward(h)));
        h = ln3_.forward(relu(conv3_.forward(h)));
        Tensor<T> pooled = reshape(mean_rows(h), {1, h.dim(1)});
        return {head_s_.forward(pooled), head_e_.forward(pooled)};
    }

    // Ingestion path for precomputed embeddings: a 768-dim source goes
    // through the learned projection, an embed_dim source is used as-is.
    Tensor<T> project_external(const Tensor<T>& emb) const {
        if (emb.numel() == kExternalDim) return ext_proj_.forward(reshape(emb, {1, kExternalDim}));
        if (emb.numel() == embed_dim_) return reshape(emb, {1, embed_dim_});
        throw ValidationError("external embedding must have 768 or " + std::to_string(embed_dim_) +
                              " elements, got " + std::to_string(emb.numel()));
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        conv1_.register_params(pm, prefix + ".conv1");
        ln1_.register_params(pm, prefix + ".ln1");
        conv2_.register_params(pm, prefix + ".conv2");
        ln2_.register_params(pm, prefix + ".ln2");
        conv3_.register_params(pm, prefix + ".conv3");
        ln3_.register_params(pm, prefix + ".ln3");
        head_s_.register_params(pm, prefix + ".head_s");
        head_e_.register_params(pm, prefix + ".head_e");
        ext_proj_.register_params(pm, prefix + ".ext_proj");
    }

    static constexpr std::size_t kExternalDim = 768;

private:
    Conv1dLayer<T> conv1_;
    LayerNorm<T> ln1_;
    Conv1dLayer<T> conv2_;
    LayerNorm<T> ln2_;
    Conv1dLayer<T> conv3_;
    LayerNorm<T> ln3_;
    Linear<T> head_s_, head_e_;
    Linear<T> ext_proj_;
    std::size_t embed_dim_ = 0;
};

// Additive-margin softmax over cosine similarities.
template <class T>
Tensor<T> am_softmax_loss(const Tensor<T>& embeddings, const std::vector<std::size_t>& labels,
                          const Tensor<T>& class_weights, T margin, T scale_s) {
    const std::size_t b = embeddings.dim(0), classes = class_weights.dim(0);
    if (labels.size() != b)
        throw ValidationError("am_softmax_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                              std::to_string(b));
    for (std::size_t l : labels)
        if (l >= classes) throw ValidationError("am_softmax_loss: label " + std::to_string(l) + " out of range");
    Tensor<T> cos = matmul_nt(l2_normalize_rows(embeddings), l2_normalize_rows(class_weights));
    // Subtract the margin on the target logit only: add a constant -s*m mask.
    std::vector<T> mask(b * classes, T(0));
    for (std::size_t r = 0; r < b; ++r) mask[r * classes + labels[r]] = -scale_s * margin;
    Tensor<T> adjusted = add(scale(cos, scale_s), Tensor<T>::from_data(std::move(mask), {b, classes}));
    Tensor<T> loss_rows = sub(logsumexp_rows(adjusted), pick_rows(adjusted, labels));
    return mean_all(loss_rows);
}

// Mean-pool rows into segments given strictly increasing starts (first 0).
template <class T>
Tensor<T> pool_by_boundaries(const Tensor<T>& seq, const std::vector<int>& boundaries) {
    return segment_mean(seq, boundaries);
}

// K x D latent code table plus a usage histogram for collapse monitoring.
template <class T>
struct Codebook {
    Tensor<T> codes;  // K x D, trainable
    std::vector<std::uint64_t> usage;

    Codebook() = default;
    Codebook(std::size_t k, std::size_t d, RngStream& rng) : codes(Tensor<T>::randn({k, d}, rng, T(1), true)),
                                                             usage(k, 0) {}

    std::size_t size() const { return codes.defined() ? codes.dim(0) : 0; }

    void reset_usage() { std::fill(usage.begin(), usage.end(), 0); }

    double top_usage_share() const {
        std::uint64_t total = 0, top = 0;
        for (auto u : usage) {
            total += u;
            top = std::max(top, u);
        }
        return total ? static_cast<double>(top) / static_cast<double>(total) : 0.0;
    }
};

template <class T>
struct VqResult {
    Tensor<T> quantized;        // straight-through: codebook values, z_e gradients
    std::vector<int> indices;   // nearest code per row
    Tensor<T> commit_loss;      // ||z_e - sg[e]||^2 (mean over elements)
    Tensor<T> codebook_loss;    // ||sg[z_e] - e||^2, trains the code rows
};

template <class T>
VqResult<T> vq_quantize(const Tensor<T>& z_e, Codebook<T>& codebook, bool count_usage = false) {
    if (codebook.size() == 0) throw ValidationError("vq_quantize: empty codebook");
    const std::size_t n = z_e.dim(0), d = z_e.dim(1);
    const std::size_t k = codebook.codes.dim(0);
    if (codebook.codes.dim(1) != d)
        throw ShapeError("vq_quantize: input dim " + std::to_string(d) + " does not match codebook dim " +
                         std::to_string(codebook.codes.dim(1)));
    const T* pz = z_e.data();
    const T* pc = codebook.codes.data();
    std::vector<int> indices(n);
    std::vector<T> qvals(n * d);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        T best_d = std::numeric_limits<T>::max();
        for (std::size_t c = 0; c < k; ++c) {
            T dist = T(0);
            const T* code = pc + c * d;
            const T* row = pz + r * d;
            for (std::size_t j = 0; j < d; ++j) {
                const T diff = row[j] - code[j];
                dist += diff * diff;
            }
            if (dist < best_d) {  // strict: ties keep the lowest index
                best_d = dist;
                best = c;
            }
        }
        indices[r] = static_cast<int>(best);
        std::memcpy(qvals.data() + r * d, pc + best * d, d * sizeof(T));
        if (count_usage) ++codebook.usage[best];
    }
    VqResult<T> out;
    out.indices = indices;
    out.quantized = straight_through(std::move(qvals), z_e);
    out.commit_loss = mse_loss(z_e, detach(out.quantized));
    out.codebook_loss = mse_loss(detach(z_e), embedding(indices, codebook.codes));
    return out;
}

// Gated dilated conv stack (WaveNet flavor). Residual projections start at
// zero so a fresh stack is the identity.
template <class T>
class WaveNetStack {
public:
    WaveNetStack() = default;
    WaveNetStack(std::size_t channels, std::size_t layers, std::size_t kernel, RngStream& rng) {
        for (std::size_t i = 0; i < layers; ++i) {
            gates_.emplace_back(channels, 2 * channels, kernel, rng, 1 << i);
            res_.push_back(Linear<T>::zero_init(channels, channels));
        }
        channels_ = channels;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = x;
        for (std::size_t i = 0; i < gates_.size(); ++i) {
            Tensor<T> g = gates_[i].forward(h);
            Tensor<T> z = mul(tanh_op(slice_cols(g, 0, channels_)), sigmoid(slice_cols(g, channels_, 2 * channels_)));
            h = add(h, res_[i].forward(z));
        }
        return h;
    }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        for (std::size_t i = 0; i < gates_.size(); ++i) {
            gates_[i].register_params(pm, prefix + ".gate" + std::to_string(i));
            res_[i].register_params(pm, prefix + ".res" + std::to_string(i));
        }
    }

private:
    std::vector<Conv1dLayer<T>> gates_;
    std::vector<Linear<T>> res_;
    std::size_t channels_ = 0;
};

enum class StyleLevel { Frame, Phoneme, Word };

template <class T>
struct LocalEncoding {
    Tensor<T> pre_vq;                  // refined (and pooled) features before the bottleneck
    Tensor<T> style;                   // quantized (or pre_vq during warm-up)
    std::optional<VqResult<T>> vq;
};

template <class T>
class LocalStyleEncoder {
public:
    LocalStyleEncoder() = default;
    LocalStyleEncoder(StyleLevel level, std::size_t mel_bins, std::size_t hidden, std::size_t conv_layers,
                      std::size_t wn_layers, std::size_t codebook_size, RngStream& rng)
        : level_(level), wn_(hidden, wn_layers, 3, rng), codebook_(codebook_size, hidden, rng) {
        for (std::size_t i = 0; i < conv_layers; ++i) {
            convs_.emplace_back(i == 0 ? mel_bins : hidden, hidden, 3, rng);
            lns_.emplace_back(hidden);
        }
    }

    // Conv-stack + WaveNet refinement over the reference mel.
    Tensor<T> refine(const Tensor<T>& mel) const {
        Tensor<T> h = mel;
        for (std::size_t i = 0; i < convs_.size(); ++i) h = lns_[i].forward(relu(convs_[i].forward(h)));
        return wn_.forward(h);
    }

    LocalEncoding<T> forward(const Tensor<T>& mel, const std::vector<int>* boundaries, const ModelContext<T>& ctx,
                             bool use_vq) {
        if (level_ == StyleLevel::Frame) {
            if (boundaries)
                throw ValidationError("local style encoder: boundaries are not accepted at the frame level");
        } else if (!boundaries) {
            throw ValidationError("local style encoder: phoneme/word levels require boundaries");
        }
        Tensor<T> h = refine(mel);
        LocalEncoding<T> out;
        out.pre_vq = boundaries ? pool_by_boundaries(h, *boundaries) : h;
        if (use_vq) {
            out.vq = vq_quantize(out.pre_vq, codebook_, ctx.training);
            out.style = out.vq->quantized;
        } else {
            out.style = out.pre_vq;
        }
        return out;
    }

    Codebook<T>& codebook() { return codebook_; }
    StyleLevel level() const { return level_; }

    void register_params(ParamMap<T>& pm, const std::string& prefix) {
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].register_params(pm, prefix + ".conv" + std::to_string(i));
            lns_[i].register_params(pm, prefix + ".ln" + std::to_string(i));
        }
        wn_.register_params(pm, prefix + ".wn");
        pm.add(prefix + ".codebook", codebook_.codes);
    }

private:
    StyleLevel level_ = StyleLevel::Frame;
    std::vector<Conv1dLayer<T>> convs_;
    std::vector<LayerNorm<T>> lns_;
    WaveNetStack<T> wn_;
    Codebook<T> codebook_;
};

// Scaled dot-product cross attention with content as query and the style
// sequence (plus positional encoding) as key and value; residual + dropout,
// stacked `layers` times. Parameter-free by construction.
template <class T>
Tensor<T> style_to_content_align(const Tensor<T>& h_content, const Tensor<T>& style, std::size_t layers,
                                 double dropout_rate, const ModelContext<T>& ctx) {
    if (h_content.dim(0) == 0 || style.dim(0) == 0)
        throw ValidationError("style_to_content_align: empty input");
    if (h_content.dim(1) != style.dim(1))
        throw ShapeError("style_to_content_align: content width " + std::to_string(h_content.dim(1)) +
                         " does not match style width " + std::to_string(style.dim(1)));
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(h_content.dim(1)));
    Tensor<T> s = add_positional_encoding(style);
    Tensor<T> h = h_content;
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor<T> scores = scale(matmul_nt(h, s), inv_sqrt_d);
        Tensor<T> probs = softmax_rows(scores);
        if (ctx.capture) {
            typename AttentionCapture<T>::Matrix m;
            m.rows = probs.dim(0);
            m.cols = probs.dim(1);
            m.probs = probs.values();
            m.scores = scores.values();
            ctx.capture->heads.push_back(std::move(m));
        }
        h = add(h, dropout(matmul(probs, s), dropout_rate, ctx.rng, ctx.training));
    }
    return h;
}

}  // namespace melforge
