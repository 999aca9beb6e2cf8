#pragma once

// Full model assembly: phoneme encoder -> mix-style layer norm -> duration /
// length regulation -> style-agnostic pitch; reference mel -> global + local
// style -> alignment -> style-specific pitch; decoder -> coarse mel; flow
// post-net -> fine mel.

#include <string>
#include <vector>

#include "melforge/backbone.hpp"
#include "melforge/config.hpp"
#include "melforge/content_adaptor.hpp"
#include "melforge/corpus.hpp"
#include "melforge/flow_postnet.hpp"
#include "melforge/pitch_cwt.hpp"
#include "melforge/style_adaptor.hpp"

namespace melforge {

struct ModelConfig {
    std::size_t vocab_size = 24;
    std::size_t n_speakers = 4;
    std::size_t n_emotions = 3;
    std::size_t mel_bins = 80;
    std::size_t hidden = 256;
    std::size_t phoneme_embed = 192;
    std::size_t encoder_layers = 4;
    std::size_t decoder_layers = 4;
    std::size_t heads = 2;
    std::size_t fft_kernel = 9;
    std::size_t fft_filter = 1024;
    double fft_dropout = 0.1;
    std::size_t predictor_filter = 256;
    std::size_t n_scales = kPitchScales;
    std::size_t style_conv_layers = 5;
    std::size_t style_wn_layers = 4;
    std::size_t codebook_size = 128;
    std::size_t align_layers = 2;
    double align_dropout = 0.5;
    std::size_t align_wn_layers = 4;
    MixStyleConfig mixstyle{};
    FlowConfig flow{};
    std::size_t pitch_bins = 64;
    double f0_min = 55.0;
    double f0_max = 880.0;
    double am_margin = 0.2;
    double am_scale = 30.0;

    static ModelConfig paper() {
        ModelConfig c;
        c.flow.cond_channels = 192;
        return c;
    }

    // Desk preset: half hidden, half backbone depth, slimmer filters; runs in
    // minutes on a CPU. Table-5 sizes live in the paper preset.
    static ModelConfig desk() {
        ModelConfig c;
        c.hidden = 128;
        c.phoneme_embed = 128;
        c.encoder_layers = 2;
        c.decoder_layers = 2;
        c.fft_filter = 256;
        c.predictor_filter = 128;
        c.flow.wn_channels = 64;
        c.flow.cond_channels = 64;
        return c;
    }

    FFTBlockConfig encoder_fft() const {
        return {hidden, encoder_layers, heads, fft_kernel, fft_filter, fft_dropout};
    }
    FFTBlockConfig decoder_fft() const {
        return {hidden, decoder_layers, heads, fft_kernel, fft_filter, fft_dropout};
    }

    void to_config(Config& c) const {
        c.set("model.vocab_size", vocab_size);
        c.set("model.n_speakers", n_speakers);
        c.set("model.n_emotions", n_emotions);
        c.set("model.mel_bins", mel_bins);
        c.set("model.hidden", hidden);
        c.set("model.phoneme_embed", phoneme_embed);
        c.set("model.encoder_layers", encoder_layers);
        c.set("model.decoder_layers", decoder_layers);
        c.set("model.heads", heads);
        c.set("model.fft_kernel", fft_kernel);
        c.set("model.fft_filter", fft_filter);
        c.set("model.fft_dropout", fft_dropout);
        c.set("model.predictor_filter", predictor_filter);
        c.set("model.n_scales", n_scales);
        c.set("model.style_conv_layers", style_conv_layers);
        c.set("model.style_wn_layers", style_wn_layers);
        c.set("model.codebook_size", codebook_size);
        c.set("model.align_layers", align_layers);
        c.set("model.align_dropout", align_dropout);
        c.set("model.align_wn_layers", align_wn_layers);
        c.set("model.mixstyle_alpha", mixstyle.alpha);
        c.set("model.mixstyle_p", mixstyle.p);
        c.set("model.flow_steps", flow.steps);
        c.set("model.flow_shared_groups", flow.shared_groups);
        c.set("model.flow_wn_layers", flow.wn_layers);
        c.set("model.flow_wn_kernel", flow.wn_kernel);
        c.set("model.flow_wn_channels", flow.wn_channels);
        c.set("model.flow_squeeze", flow.squeeze);
        c.set("model.flow_cond_channels", flow.cond_channels);
        c.set("model.flow_sharing", std::string(flow.sharing == FlowSharing::Strided ? "strided" : "blocked"));
        c.set("model.pitch_bins", pitch_bins);
        c.set("model.f0_min", f0_min);
        c.set("model.f0_max", f0_max);
        c.set("model.am_margin", am_margin);
        c.set("model.am_scale", am_scale);
    }

    static ModelConfig from_config(const Config& c);

    static ModelConfig from_config(const Config& c, const ModelConfig& base) {
        ModelConfig m = base;
        auto geti = [&](const char* k, std::size_t d) {
            return static_cast<std::size_t>(c.get_int(k, static_cast<long>(d)));
        };
        m.vocab_size = geti("model.vocab_size", m.vocab_size);
        m.n_speakers = geti("model.n_speakers", m.n_speakers);
        m.n_emotions = geti("model.n_emotions", m.n_emotions);
        m.mel_bins = geti("model.mel_bins", m.mel_bins);
        m.hidden = geti("model.hidden", m.hidden);
        m.phoneme_embed = geti("model.phoneme_embed", m.phoneme_embed);
        m.encoder_layers = geti("model.encoder_layers", m.encoder_layers);
        m.decoder_layers = geti("model.decoder_layers", m.decoder_layers);
        m.heads = geti("model.heads", m.heads);
        m.fft_kernel = geti("model.fft_kernel", m.fft_kernel);
        m.fft_filter = geti("model.fft_filter", m.fft_filter);
        m.fft_dropout = c.get_num("model.fft_dropout", m.fft_dropout);
        m.predictor_filter = geti("model.predictor_filter", m.predictor_filter);
        m.n_scales = geti("model.n_scales", m.n_scales);
        m.style_conv_layers = geti("model.style_conv_layers", m.style_conv_layers);
        m.style_wn_layers = geti("model.style_wn_layers", m.style_wn_layers);
        m.codebook_size = geti("model.codebook_size", m.codebook_size);
        m.align_layers = geti("model.align_layers", m.align_layers);
        m.align_dropout = c.get_num("model.align_dropout", m.align_dropout);
        m.align_wn_layers = geti("model.align_wn_layers", m.align_wn_layers);
        m.mixstyle.alpha = c.get_num("model.mixstyle_alpha", m.mixstyle.alpha);
        m.mixstyle.p = c.get_num("model.mixstyle_p", m.mixstyle.p);
        m.flow.steps = geti("model.flow_steps", m.flow.steps);
        m.flow.shared_groups = geti("model.flow_shared_groups", m.flow.shared_groups);
        m.flow.wn_layers = geti("model.flow_wn_layers", m.flow.wn_layers);
        m.flow.wn_kernel = geti("model.flow_wn_kernel", m.flow.wn_kernel);
        m.flow.wn_channels = geti("model.flow_wn_channels", m.flow.wn_channels);
        m.flow.squeeze = geti("model.flow_squeeze", m.flow.squeeze);
        m.flow.cond_channels = geti("model.flow_cond_channels", m.flow.cond_channels);
        m.flow.sharing = c.get_str("model.flow_sharing", "strided") == "blocked" ? FlowSharing::Blocked
                                                                                 : FlowSharing::Strided;
        m.flow.mel_bins = m.mel_bins;
        m.pitch_bins = geti("model.pitch_bins", m.pitch_bins);
        m.f0_min = c.get_num("model.f0_min", m.f0_min);
        m.f0_max = c.get_num("model.f0_max", m.f0_max);
        m.am_margin = c.get_num("model.am_margin", m.am_margin);
        m.am_scale = c.get_num("model.am_scale", m.am_scale);
        return m;
    }
};

inline ModelConfig ModelConfig::from_config(const Config& c) { return from_config(c, ModelConfig()); }

template <class T>
struct TrainingTerms {
    Tensor<T> dur;        // MSE on log durations
    Tensor<T> mel;        // MAE on the coarse mel
    Tensor<T> pitch;      // MSE on the joint pitch spectrogram + stats
    Tensor<T> postnet;    // flow NLL per dimension
    Tensor<T> commit;     // VQ commitment (zero during warm-up)
    Tensor<T> codebook;   // VQ codebook term (trains code rows, weight 1)
};

template <class T>
struct SynthesisResult {
    Tensor<T> fine_mel;
    Tensor<T> coarse_mel;
    std::vector<int> durations;
    std::vector<double> f0;
    PitchSpec<T> joint;
};

template <class T>
class StyleTts {
public:
    explicit StyleTts(const ModelConfig& cfg, std::uint64_t seed = 1) : cfg_(cfg) {
        cfg_.flow.mel_bins = cfg_.mel_bins;
        RngStream root(seed);
        RngStream r_enc = root.derive("init/encoder");
        RngStream r_msln = root.derive("init/msln");
        RngStream r_dur = root.derive("init/duration");
        RngStream r_sap = root.derive("init/sap");
        RngStream r_ssp = root.derive("init/ssp");
        RngStream r_glob = root.derive("init/global");
        RngStream r_lu = root.derive("init/local_frame");
        RngStream r_lp = root.derive("init/local_phoneme");
        RngStream r_lw = root.derive("init/local_word");
        RngStream r_ref = root.derive("init/align_refiner");
        RngStream r_pe = root.derive("init/pitch_embed");
        RngStream r_dec = root.derive("init/decoder");
        RngStream r_cond = root.derive("init/cond_proj");
        RngStream r_flow = root.derive("init/flow");
        RngStream r_am = root.derive("init/am");

        encoder_ = PhonemeEncoder<T>(cfg_.vocab_size, cfg_.phoneme_embed, cfg_.encoder_fft(), r_enc);
        msln_ = MixStyleLayerNorm<T>(cfg_.hidden, cfg_.hidden, cfg_.mixstyle, r_msln);
        duration_ = DurationPredictor<T>(cfg_.hidden, cfg_.predictor_filter, r_dur);
        sap_ = PitchPredictor<T>(cfg_.hidden, cfg_.predictor_filter, cfg_.n_scales, r_sap);
        ssp_ = PitchPredictor<T>(cfg_.hidden, cfg_.predictor_filter, cfg_.n_scales, r_ssp);
        global_ = GlobalStyleEncoder<T>(cfg_.mel_bins, cfg_.hidden, cfg_.hidden, r_glob);
        local_frame_ = LocalStyleEncoder<T>(StyleLevel::Frame, cfg_.mel_bins, cfg_.hidden, cfg_.style_conv_layers,
                                            cfg_.style_wn_layers, cfg_.codebook_size, r_lu);
        local_phoneme_ = LocalStyleEncoder<T>(StyleLevel::Phoneme, cfg_.mel_bins, cfg_.hidden, cfg_.style_conv_layers,
                                              cfg_.style_wn_layers, cfg_.codebook_size, r_lp);
        local_word_ = LocalStyleEncoder<T>(StyleLevel::Word, cfg_.mel_bins, cfg_.hidden, cfg_.style_conv_layers,
                                           cfg_.style_wn_layers, cfg_.codebook_size, r_lw);
        align_refiner_ = WaveNetStack<T>(cfg_.hidden, cfg_.align_wn_layers, 3, r_ref);
        pitch_embed_ = EmbeddingTable<T>(cfg_.pitch_bins, cfg_.hidden, r_pe);
        decoder_ = MelDecoder<T>(cfg_.decoder_fft(), cfg_.mel_bins, r_dec);
        const std::size_t cond_in = (cfg_.mel_bins + cfg_.hidden) * cfg_.flow.squeeze;
        cond_proj_ = Linear<T>(cond_in, cfg_.flow.cond_channels, r_cond);
        flow_ = FlowPostNet<T>(cfg_.flow, r_flow);
        am_speaker_ = Tensor<T>::randn({cfg_.n_speakers, cfg_.hidden}, r_am, T(1), true);
        am_emotion_ = Tensor<T>::randn({cfg_.n_emotions, cfg_.hidden}, r_am, T(1), true);
    }

    const ModelConfig& config() const { return cfg_; }

    // --- style extraction ---------------------------------------------------

    GlobalStyle<T> encode_reference(const Utterance& u, const ModelContext<T>& ctx) const {
        if (u.mel_frames == 0) throw ValidationError("empty reference: utterance '" + u.id + "' has no mel frames");
        Tensor<T> mel = u.template mel_tensor<T>();
        GlobalStyle<T> g = global_.forward(mel, ctx);
        if (!u.external_emb_path.empty()) {
            Tensor<T> ext = load_gstn_tensor<T>(u.external_emb_path);
            g.speaker = global_.project_external(ext);
        }
        return g;
    }

    // Frame starts of each phoneme / word on the reference frame axis.
    static std::vector<int> phoneme_frame_starts(const Utterance& u) {
        std::vector<int> starts;
        int acc = 0;
        for (int d : u.durations) {
            starts.push_back(acc);
            acc += d;
        }
        return starts;
    }
    static std::vector<int> word_frame_starts(const Utterance& u) {
        std::vector<int> starts;
        const auto counts = u.word_frame_counts();
        int acc = 0;
        for (int c : counts) {
            starts.push_back(acc);
            acc += c;
        }
        return starts;
    }

    struct LocalStyles {
        LocalEncoding<T> frame, phoneme, word;
    };

    LocalStyles encode_locals(const Utterance& u, const ModelContext<T>& ctx, bool use_vq) {
        Tensor<T> mel = u.template mel_tensor<T>();
        LocalStyles out;
        out.frame = local_frame_.forward(mel, nullptr, ctx, use_vq);
        const auto ph = phoneme_frame_starts(u);
        const auto wd = word_frame_starts(u);
        out.phoneme = local_phoneme_.forward(mel, &ph, ctx, use_vq);
        out.word = local_word_.forward(mel, &wd, ctx, use_vq);
        return out;
    }

    // --- shared forward pieces ----------------------------------------------

    Tensor<T> stylize(const Tensor<T>& hc_exp, const LocalStyles& locals, const ModelContext<T>& ctx) const {
        Tensor<T> h = style_to_content_align(hc_exp, locals.frame.style, cfg_.align_layers, cfg_.align_dropout, ctx);
        h = style_to_content_align(h, locals.phoneme.style, cfg_.align_layers, cfg_.align_dropout, ctx);
        h = style_to_content_align(h, locals.word.style, cfg_.align_layers, cfg_.align_dropout, ctx);
        return align_refiner_.forward(h);
    }

    // Warm-up replacement for the learned alignment: inject the (pre-VQ)
    // local styles by hard boundary expansion.
    Tensor<T> hard_inject(const Tensor<T>& hc_exp, const LocalStyles& locals, const Utterance& u) const {
        Tensor<T> h = add(hc_exp, locals.frame.style);
        h = add(h, repeat_rows(locals.phoneme.style, u.durations));
        h = add(h, repeat_rows(locals.word.style, u.word_frame_counts()));
        return h;
    }

    std::vector<int> pitch_bin_ids(const std::vector<double>& f0) const {
        std::vector<int> ids(f0.size());
        const double lo = std::log(cfg_.f0_min), hi = std::log(cfg_.f0_max);
        for (std::size_t t = 0; t < f0.size(); ++t) {
            if (f0[t] <= 0.0) {
                ids[t] = 0;
                continue;
            }
            const double x = (std::log(f0[t]) - lo) / (hi - lo);
            const long bin = 1 + static_cast<long>(std::floor(x * static_cast<double>(cfg_.pitch_bins - 2)));
            ids[t] = static_cast<int>(std::clamp<long>(bin, 1, static_cast<long>(cfg_.pitch_bins) - 1));
        }
        return ids;
    }

    Tensor<T> decoder_input(const Tensor<T>& h_sty, const std::vector<double>& f0, const Tensor<T>& w) const {
        Tensor<T> pe = pitch_embed_.forward(pitch_bin_ids(f0));
        return add_rowvec(add(h_sty, pe), w);
    }

    // Channel-concatenated (coarse mel, decoder input), padded, squeezed and
    // projected to the conditioner width.
    Tensor<T> flow_condition(const Tensor<T>& coarse, const Tensor<T>& d_in) const {
        Tensor<T> frames = concat_cols(coarse, d_in);
        const std::size_t pad = flow_.pad_frames(frames.dim(0));
        if (pad > 0) frames = pad_rows_repeat_last(frames, pad);
        const std::size_t rows = frames.dim(0) / cfg_.flow.squeeze;
        Tensor<T> squeezed = reshape(frames, {rows, frames.dim(1) * cfg_.flow.squeeze});
        return cond_proj_.forward(squeezed);
    }

    // --- training ------------------------------------------------------------

    // `cached_ws` lets the trainer reuse per-utterance style vectors once the
    // global encoder is frozen (one entry per batch element).
    TrainingTerms<T> training_forward(const std::vector<const Utterance*>& batch, bool phase_b,
                                      const ModelContext<T>& ctx, const std::vector<Tensor<T>>* cached_ws = nullptr) {
        if (batch.empty()) throw ValidationError("training_forward: empty batch");
        const std::size_t b_count = batch.size();
        if (cached_ws && cached_ws->size() != b_count)
            throw ValidationError("training_forward: cached style vectors do not match the batch");
        std::vector<Tensor<T>> h_texts(b_count), ws(b_count);
        for (std::size_t b = 0; b < b_count; ++b) {
            const Utterance& u = *batch[b];
            h_texts[b] = encoder_.forward(u.phonemes.ids, ctx);
            ws[b] = cached_ws ? (*cached_ws)[b] : encode_reference(u, ctx).combined();
        }
        std::vector<Tensor<T>> hcs = msln_.forward_batch(h_texts, ws, ctx);
        std::vector<Tensor<T>> flow_lads = flow_.conv_logabsdets();

        TrainingTerms<T> terms;
        Tensor<T> zero = Tensor<T>::zeros({1});
        terms.dur = zero;
        terms.mel = zero;
        terms.pitch = zero;
        terms.postnet = zero;
        terms.commit = zero;
        terms.codebook = zero;
        for (std::size_t b = 0; b < b_count; ++b) {
            const Utterance& u = *batch[b];
            Tensor<T> mel_gt = u.template mel_tensor<T>();

            Tensor<T> dlog_pred = duration_.forward(hcs[b], ws[b], ctx);
            std::vector<T> dlog_gt(u.durations.size());
            for (std::size_t p = 0; p < u.durations.size(); ++p)
                dlog_gt[p] = static_cast<T>(std::log(static_cast<double>(u.durations[p])));
            terms.dur = add(terms.dur, mse_loss(dlog_pred, Tensor<T>::from_data(std::move(dlog_gt),
                                                                                {u.durations.size()})));

            Tensor<T> hc_exp = length_regulate(hcs[b], u.durations);
            PitchSpec<T> sap = sap_.forward(hc_exp, ctx);

            LocalStyles locals = encode_locals(u, ctx, phase_b);
            Tensor<T> h_sty = phase_b ? stylize(hc_exp, locals, ctx) : hard_inject(hc_exp, locals, u);
            PitchSpec<T> ssp = ssp_.forward(h_sty, ctx);

            PitchSpec<T> joint = joint_pitch(sap, ssp);
            PitchSpec<T> gt_spec = contour_to_spectrogram<T>(u.pitch, cfg_.n_scales);
            terms.pitch = add(terms.pitch, pitch_loss(joint, gt_spec));

            Tensor<T> d_in = decoder_input(h_sty, u.pitch, ws[b]);
            Tensor<T> coarse = decoder_.forward(d_in, ctx);
            terms.mel = add(terms.mel, mae_loss(coarse, mel_gt));

            Tensor<T> cond = flow_condition(detach(coarse), detach(d_in));
            FlowResult<T> fr = flow_.nll(mel_gt, cond, &flow_lads);
            terms.postnet = add(terms.postnet, fr.nll);

            if (phase_b) {
                terms.commit = add(terms.commit, add(locals.frame.vq->commit_loss,
                                                     add(locals.phoneme.vq->commit_loss, locals.word.vq->commit_loss)));
                terms.codebook = add(terms.codebook, add(locals.frame.vq->codebook_loss,
                                                         add(locals.phoneme.vq->codebook_loss,
                                                             locals.word.vq->codebook_loss)));
            }
        }
        const T inv_b = T(1) / static_cast<T>(b_count);
        terms.dur = scale(terms.dur, inv_b);
        terms.mel = scale(terms.mel, inv_b);
        terms.pitch = scale(terms.pitch, inv_b);
        terms.postnet = scale(terms.postnet, inv_b);
        terms.commit = scale(terms.commit, inv_b);
        terms.codebook = scale(terms.codebook, inv_b);
        return terms;
    }

    // One-shot data-dependent actnorm init from a batch (no gradients, no rng).
    void initialize_flow(const std::vector<const Utterance*>& batch) {
        NoGradGuard ng;
        ModelContext<T> ctx;  // eval
        std::vector<std::vector<T>> squeezed;
        std::vector<Tensor<T>> conds;
        std::vector<std::size_t> rows;
        for (const Utterance* up : batch) {
            const Utterance& u = *up;
            Tensor<T> h_text = encoder_.forward(u.phonemes.ids, ctx);
            Tensor<T> w = encode_reference(u, ctx).combined();
            Tensor<T> hc_exp = length_regulate(h_text, u.durations);
            LocalStyles locals = encode_locals(u, ctx, false);
            Tensor<T> h_sty = hard_inject(hc_exp, locals, u);
            Tensor<T> d_in = decoder_input(h_sty, u.pitch, w);
            Tensor<T> coarse = decoder_.forward(d_in, ctx);
            Tensor<T> cond = flow_condition(coarse, d_in);
            Tensor<T> mel_gt = u.template mel_tensor<T>();
            const std::size_t pad = flow_.pad_frames(mel_gt.dim(0));
            Tensor<T> padded = pad > 0 ? pad_rows_repeat_last(mel_gt, pad) : mel_gt;
            const std::size_t r = padded.dim(0) / cfg_.flow.squeeze;
            squeezed.push_back(reshape(padded, {r, cfg_.flow.channels()}).values());
            conds.push_back(cond);
            rows.push_back(r);
        }
        flow_.initialize_actnorm(squeezed, conds, rows);
    }

    // Deterministic codebook refresh from a batch of pre-VQ features; used at
    // the warm-up boundary so the bottleneck starts near the feature cloud.
    void reset_codebooks_from(const std::vector<const Utterance*>& batch, RngStream& rng) {
        NoGradGuard ng;
        ModelContext<T> ctx;
        std::vector<std::vector<T>> rows_frame, rows_ph, rows_word;
        for (const Utterance* up : batch) {
            LocalStyles locals = encode_locals(*up, ctx, false);
            auto collect = [](const Tensor<T>& t, std::vector<std::vector<T>>& dst) {
                for (std::size_t r = 0; r < t.dim(0); ++r)
                    dst.emplace_back(t.data() + r * t.dim(1), t.data() + (r + 1) * t.dim(1));
            };
            collect(locals.frame.pre_vq, rows_frame);
            collect(locals.phoneme.pre_vq, rows_ph);
            collect(locals.word.pre_vq, rows_word);
        }
        auto reseed = [&](Codebook<T>& cb, const std::vector<std::vector<T>>& pool) {
            if (pool.empty()) return;
            Tensor<T>& codes = cb.codes;
            const std::size_t k = codes.dim(0), d = codes.dim(1);
            for (std::size_t c = 0; c < k; ++c) {
                const auto& src = pool[rng.next_u64() % pool.size()];
                for (std::size_t j = 0; j < d; ++j)
                    codes.data()[c * d + j] = src[j] + static_cast<T>(0.01 * rng.normal());
            }
            cb.reset_usage();
        };
        reseed(local_frame_.codebook(), rows_frame);
        reseed(local_phoneme_.codebook(), rows_ph);
        reseed(local_word_.codebook(), rows_word);
    }

    // --- inference -----------------------------------------------------------

    SynthesisResult<T> synthesize(const PhonemeSequence& text, const Utterance& reference, bool parallel, T tau,
                                  RngStream& rng, AttentionCapture<T>* capture = nullptr) {
        text.validate();
        if (reference.mel_frames == 0)
            throw ValidationError("empty reference: utterance '" + reference.id + "' has no mel frames");
        if (parallel && text.ids != reference.phonemes.ids)
            throw ValidationError("parallel mode requires the text to match the reference transcript");
        NoGradGuard ng;
        ModelContext<T> ctx;
        ctx.capture = capture;

        Tensor<T> h_text = encoder_.forward(text.ids, ctx);
        // Mix-style layer norm is the identity outside training.
        GlobalStyle<T> g = encode_reference(reference, ctx);
        Tensor<T> w = g.combined();
        Tensor<T> dlog = duration_.forward(h_text, w, ctx);
        std::vector<int> durations = durations_from_log(dlog);
        Tensor<T> hc_exp = length_regulate(h_text, durations);
        const std::size_t t_frames = hc_exp.dim(0);

        PitchSpec<T> sap = sap_.forward(hc_exp, ctx);
        LocalStyles locals = encode_locals(reference, ctx, true);
        Tensor<T> h_sty = stylize(hc_exp, locals, ctx);
        PitchSpec<T> ssp = ssp_.forward(h_sty, ctx);
        PitchSpec<T> joint = joint_pitch(sap, ssp);

        std::vector<std::uint8_t> voicing(t_frames, 1);
        std::vector<double> f0 = spectrogram_to_contour(joint, voicing);

        Tensor<T> d_in = decoder_input(h_sty, f0, w);
        Tensor<T> coarse = decoder_.forward(d_in, ctx);
        Tensor<T> cond = flow_condition(coarse, d_in);

        SynthesisResult<T> out;
        out.coarse_mel = coarse;
        out.fine_mel = flow_.sample(cond, t_frames, tau, rng);
        out.durations = std::move(durations);
        out.f0 = std::move(f0);
        out.joint = joint;
        return out;
    }

    // --- parameter registration ----------------------------------------------

    void register_pretrain_params(ParamMap<T>& pm) {
        global_.register_params(pm, "global");
        pm.add("am_speaker", am_speaker_);
        pm.add("am_emotion", am_emotion_);
    }

    void register_main_params(ParamMap<T>& pm) {
        encoder_.register_params(pm, "encoder");
        msln_.register_params(pm, "msln");
        duration_.register_params(pm, "duration");
        sap_.register_params(pm, "sap");
        ssp_.register_params(pm, "ssp");
        local_frame_.register_params(pm, "local_frame");
        local_phoneme_.register_params(pm, "local_phoneme");
        local_word_.register_params(pm, "local_word");
        align_refiner_.register_params(pm, "align_wn");
        pitch_embed_.register_params(pm, "pitch_embed");
        decoder_.register_params(pm, "decoder");
        cond_proj_.register_params(pm, "cond_proj");
        flow_.register_params(pm, "flow");
    }

    void register_params(ParamMap<T>& pm) {
        register_main_params(pm);
        register_pretrain_params(pm);
    }

    PhonemeEncoder<T>& encoder() { return encoder_; }
    MixStyleLayerNorm<T>& msln() { return msln_; }
    DurationPredictor<T>& duration_predictor() { return duration_; }
    PitchPredictor<T>& sap() { return sap_; }
    PitchPredictor<T>& ssp() { return ssp_; }
    GlobalStyleEncoder<T>& global_encoder() { return global_; }
    LocalStyleEncoder<T>& local_encoder(StyleLevel level) {
        switch (level) {
            case StyleLevel::Frame: return local_frame_;
            case StyleLevel::Phoneme: return local_phoneme_;
            default: return local_word_;
        }
    }
    MelDecoder<T>& decoder() { return decoder_; }
    FlowPostNet<T>& flow() { return flow_; }
    Tensor<T>& am_speaker() { return am_speaker_; }
    Tensor<T>& am_emotion() { return am_emotion_; }
    double am_margin() const { return cfg_.am_margin; }
    double am_scale() const { return cfg_.am_scale; }

private:
    ModelConfig cfg_;
    PhonemeEncoder<T> encoder_;
    MixStyleLayerNorm<T> msln_;
    DurationPredictor<T> duration_;
    PitchPredictor<T> sap_, ssp_;
    GlobalStyleEncoder<T> global_;
    LocalStyleEncoder<T> local_frame_, local_phoneme_, local_word_;
    WaveNetStack<T> align_refiner_;
    EmbeddingTable<T> pitch_embed_;
    MelDecoder<T> decoder_;
    Linear<T> cond_proj_;
    FlowPostNet<T> flow_;
    Tensor<T> am_speaker_, am_emotion_;
};

}  // namespace melforge
