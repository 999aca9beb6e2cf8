#pragma once

// Training orchestration: a short discriminative pre-training phase for the
// global encoder (AM-softmax on speaker/emotion labels, frozen afterwards),
// then the main loop with the five-term objective and the warm-up phase
// switch (hard alignment and no VQ before the boundary, soft alignment plus
// VQ after).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "melforge/checkpoint.hpp"
#include "melforge/model.hpp"

namespace melforge {

struct TrainConfig {
    std::size_t total_steps = 20000;
    std::size_t warmup_steps = 2000;
    std::size_t pretrain_steps = 200;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double lr_decay_start = 1000;  // constant lr until here, then inverse-sqrt
    double w_dur = 1.0;
    double w_mel = 1.0;
    double w_pitch = 1.0;
    double w_postnet = 1.0;
    double w_commit = 0.25;
    std::uint64_t seed = 1;

    void validate() const {
        if (warmup_steps >= total_steps) throw ValidationError("train: warm-up steps must be < total steps");
        if (batch_size == 0) throw ValidationError("train: batch size must be positive");
    }

    void to_config(Config& c) const {
        c.set("train.total_steps", total_steps);
        c.set("train.warmup_steps", warmup_steps);
        c.set("train.pretrain_steps", pretrain_steps);
        c.set("train.batch_size", batch_size);
        c.set("train.lr", lr);
        c.set("train.lr_decay_start", lr_decay_start);
        c.set("train.w_dur", w_dur);
        c.set("train.w_mel", w_mel);
        c.set("train.w_pitch", w_pitch);
        c.set("train.w_postnet", w_postnet);
        c.set("train.w_commit", w_commit);
        c.set("train.seed", static_cast<std::size_t>(seed));
    }

    static TrainConfig from_config(const Config& c);

    static TrainConfig from_config(const Config& c, const TrainConfig& base) {
        TrainConfig t = base;
        t.total_steps = static_cast<std::size_t>(c.get_int("train.total_steps", static_cast<long>(t.total_steps)));
        t.warmup_steps = static_cast<std::size_t>(c.get_int("train.warmup_steps", static_cast<long>(t.warmup_steps)));
        t.pretrain_steps =
            static_cast<std::size_t>(c.get_int("train.pretrain_steps", static_cast<long>(t.pretrain_steps)));
        t.batch_size = static_cast<std::size_t>(c.get_int("train.batch_size", static_cast<long>(t.batch_size)));
        t.lr = c.get_num("train.lr", t.lr);
        t.lr_decay_start = c.get_num("train.lr_decay_start", t.lr_decay_start);
        t.w_dur = c.get_num("train.w_dur", t.w_dur);
        t.w_mel = c.get_num("train.w_mel", t.w_mel);
        t.w_pitch = c.get_num("train.w_pitch", t.w_pitch);
        t.w_postnet = c.get_num("train.w_postnet", t.w_postnet);
        t.w_commit = c.get_num("train.w_commit", t.w_commit);
        t.seed = static_cast<std::uint64_t>(c.get_int("train.seed", static_cast<long>(t.seed)));
        return t;
    }
};

inline TrainConfig TrainConfig::from_config(const Config& c) { return from_config(c, TrainConfig()); }

struct LossBreakdown {
    double dur = 0, mel = 0, pitch = 0, postnet = 0, commit = 0, codebook = 0, total = 0;
};

// Recomposes the weighted total in the scalar type the model trains in,
// mirroring the association order used to build the loss graph. The trainer
// guarantees breakdown.total equals this bit-exactly.
template <class T>
double recompose_total(const LossBreakdown& b, const TrainConfig& cfg) {
    T acc = static_cast<T>(cfg.w_dur) * static_cast<T>(b.dur);
    acc = acc + static_cast<T>(cfg.w_mel) * static_cast<T>(b.mel);
    acc = acc + static_cast<T>(cfg.w_pitch) * static_cast<T>(b.pitch);
    acc = acc + static_cast<T>(cfg.w_postnet) * static_cast<T>(b.postnet);
    acc = acc + static_cast<T>(cfg.w_commit) * static_cast<T>(b.commit);
    return static_cast<double>(acc);
}

template <class T>
class Trainer {
public:
    Trainer(StyleTts<T>& model, std::vector<Utterance> corpus, TrainConfig cfg)
        : model_(&model), corpus_(std::move(corpus)), cfg_(cfg), rng_(cfg.seed) {
        cfg_.validate();
        if (corpus_.empty()) throw ValidationError("trainer: empty corpus");
        model_->register_main_params(main_params_);
        adam_main_.add_params(main_params_.items);
        model_->register_pretrain_params(pretrain_params_);
        adam_pre_.add_params(pretrain_params_.items);
    }

    const TrainConfig& config() const { return cfg_; }
    std::size_t step_count() const { return step_; }
    const std::vector<Utterance>& corpus() const { return corpus_; }
    StyleTts<T>& model() { return *model_; }
    RngStream& rng() { return rng_; }

    double lr_at(std::size_t step) const {
        const double s = static_cast<double>(step) + 1.0;
        return cfg_.lr / std::sqrt(std::max(1.0, s / cfg_.lr_decay_start));
    }

    // AM-softmax pre-training of the global encoder, then freeze it.
    void pretrain(const std::function<void(std::size_t, double)>& on_step = {}) {
        if (pretrained_) return;
        RngStream prng = rng_.derive("pretrain");
        ModelContext<T> ctx;
        ctx.training = true;
        ctx.rng = &prng;
        const T margin = static_cast<T>(model_->am_margin());
        const T am_scale = static_cast<T>(model_->am_scale());
        for (std::size_t s = 0; s < cfg_.pretrain_steps; ++s) {
            std::vector<Tensor<T>> spk_rows, emo_rows;
            std::vector<std::size_t> spk_labels, emo_labels;
            const std::size_t b = std::min(cfg_.batch_size, corpus_.size());
            for (std::size_t i = 0; i < b; ++i) {
                const Utterance& u = corpus_[prng.next_u64() % corpus_.size()];
                GlobalStyle<T> g = model_->encode_reference(u, ctx);
                spk_rows.push_back(g.speaker);
                emo_rows.push_back(g.emotion);
                spk_labels.push_back(static_cast<std::size_t>(u.speaker));
                emo_labels.push_back(static_cast<std::size_t>(u.emotion));
            }
            Tensor<T> loss = add(am_softmax_loss(stack_rows(spk_rows), spk_labels, model_->am_speaker(), margin, am_scale),
                                 am_softmax_loss(stack_rows(emo_rows), emo_labels, model_->am_emotion(), margin, am_scale));
            if (!std::isfinite(static_cast<double>(loss.item())))
                throw NumericalError("pretrain step " + std::to_string(s) + ": non-finite loss");
            loss.backward();
            adam_pre_.step(static_cast<T>(cfg_.lr));
            if (on_step) on_step(s, static_cast<double>(loss.item()));
        }
        freeze_pretrained();
    }

    void freeze_pretrained() {
        for (auto& [name, p] : pretrain_params_.items) p.set_requires_grad(false);
        pretrained_ = true;
        // The frozen encoder maps each utterance to a fixed style vector;
        // compute them once instead of re-encoding the reference every step.
        NoGradGuard ng;
        ModelContext<T> ctx;
        cached_ws_.clear();
        for (const Utterance& u : corpus_) cached_ws_.push_back(model_->encode_reference(u, ctx).combined());
    }

    // One optimizer step. Phase A (warm-up) bypasses VQ and the learned
    // alignment; phase B enables both.
    LossBreakdown step() {
        std::vector<std::size_t> idx = next_batch_indices();
        std::vector<const Utterance*> batch;
        std::vector<Tensor<T>> batch_ws;
        for (std::size_t i : idx) {
            batch.push_back(&corpus_[i]);
            if (!cached_ws_.empty()) batch_ws.push_back(cached_ws_[i]);
        }
        const bool phase_b = step_ >= cfg_.warmup_steps;
        if (!model_->flow().actnorm_initialized()) model_->initialize_flow(batch);
        if (phase_b && !codebooks_seeded_) {
            RngStream crng = rng_.derive("codebook_seed");
            model_->reset_codebooks_from(batch, crng);
            codebooks_seeded_ = true;
        }
        ModelContext<T> ctx;
        ctx.training = true;
        ctx.rng = &rng_;
        TrainingTerms<T> terms =
            model_->training_forward(batch, phase_b, ctx, cached_ws_.empty() ? nullptr : &batch_ws);
        LossBreakdown b = breakdown_from(terms);
        check_finite_terms(b);

        Tensor<T> total = scale(terms.dur, static_cast<T>(cfg_.w_dur));
        total = add(total, scale(terms.mel, static_cast<T>(cfg_.w_mel)));
        total = add(total, scale(terms.pitch, static_cast<T>(cfg_.w_pitch)));
        total = add(total, scale(terms.postnet, static_cast<T>(cfg_.w_postnet)));
        total = add(total, scale(terms.commit, static_cast<T>(cfg_.w_commit)));
        // Codebook term: gradient only, exact zero contribution to the value.
        total = add(total, grad_only(terms.codebook));
        b.total = static_cast<double>(total.item());
        total.backward();
        adam_main_.step(static_cast<T>(lr_at(step_)));
        ++step_;
        return b;
    }

    void run(std::size_t until_step, const std::function<void(std::size_t, const LossBreakdown&)>& on_step = {}) {
        pretrain();
        while (step_ < until_step) {
            LossBreakdown b = step();
            if (on_step) on_step(step_ - 1, b);
        }
    }

    // Teacher-forced loss evaluation (no dropout, mix-style identity, no
    // parameter updates); phase per the current step.
    LossBreakdown evaluate() {
        NoGradGuard ng;
        ModelContext<T> ctx;  // eval
        const bool phase_b = step_ >= cfg_.warmup_steps;
        LossBreakdown acc;
        std::size_t batches = 0;
        for (std::size_t i = 0; i < corpus_.size(); i += cfg_.batch_size) {
            std::vector<const Utterance*> batch;
            for (std::size_t j = i; j < std::min(corpus_.size(), i + cfg_.batch_size); ++j)
                batch.push_back(&corpus_[j]);
            TrainingTerms<T> terms = model_->training_forward(batch, phase_b, ctx);
            LossBreakdown b = breakdown_from(terms);
            acc.dur += b.dur;
            acc.mel += b.mel;
            acc.pitch += b.pitch;
            acc.postnet += b.postnet;
            acc.commit += b.commit;
            acc.codebook += b.codebook;
            ++batches;
        }
        acc.dur /= batches;
        acc.mel /= batches;
        acc.pitch /= batches;
        acc.postnet /= batches;
        acc.commit /= batches;
        acc.codebook /= batches;
        acc.total = recompose_total<T>(acc, cfg_);
        return acc;
    }

    void save(const std::string& path) {
        CheckpointMeta meta;
        model_->config().to_config(meta.config);
        cfg_.to_config(meta.config);
        meta.step = step_;
        meta.adam_t = static_cast<std::uint64_t>(adam_main_.step_count());
        meta.rng_seed = rng_.seed();
        meta.rng_counter = rng_.counter();
        meta.actnorm_initialized = model_->flow().actnorm_initialized();
        meta.codebooks_seeded = codebooks_seeded_;
        auto entries = checkpoint_entries(main_params_, &adam_main_);
        auto pre = checkpoint_entries(pretrain_params_, &adam_pre_);
        entries.insert(entries.end(), pre.begin(), pre.end());
        save_checkpoint(path, meta, entries);
    }

    void load(const std::string& path) {
        auto entries = checkpoint_entries(main_params_, &adam_main_);
        auto pre = checkpoint_entries(pretrain_params_, &adam_pre_);
        entries.insert(entries.end(), pre.begin(), pre.end());
        CheckpointMeta meta = load_checkpoint(path, entries);
        step_ = meta.step;
        adam_main_.set_step_count(static_cast<long>(meta.adam_t));
        adam_pre_.set_step_count(static_cast<long>(cfg_.pretrain_steps));
        if (meta.rng_seed != rng_.seed())
            rng_ = RngStream(meta.rng_seed);
        rng_.set_counter(meta.rng_counter);
        model_->flow().mark_actnorm_initialized(meta.actnorm_initialized);
        codebooks_seeded_ = meta.codebooks_seeded;
        freeze_pretrained();
    }

    // Loads parameter values only (fine-tuning init); counters stay fresh.
    void init_from(const std::string& path) {
        auto entries = checkpoint_entries(main_params_, static_cast<Adam<T>*>(nullptr));
        auto pre = checkpoint_entries(pretrain_params_, static_cast<Adam<T>*>(nullptr));
        entries.insert(entries.end(), pre.begin(), pre.end());
        CheckpointMeta meta = load_checkpoint(path, entries);
        model_->flow().mark_actnorm_initialized(meta.actnorm_initialized);
        codebooks_seeded_ = meta.codebooks_seeded;
    }

    ParamMap<T>& main_params() { return main_params_; }
    ParamMap<T>& pretrain_params() { return pretrain_params_; }
    bool codebooks_seeded() const { return codebooks_seeded_; }

private:
    LossBreakdown breakdown_from(const TrainingTerms<T>& t) const {
        LossBreakdown b;
        b.dur = static_cast<double>(t.dur.item());
        b.mel = static_cast<double>(t.mel.item());
        b.pitch = static_cast<double>(t.pitch.item());
        b.postnet = static_cast<double>(t.postnet.item());
        b.commit = static_cast<double>(t.commit.item());
        b.codebook = static_cast<double>(t.codebook.item());
        return b;
    }

    void check_finite_terms(const LossBreakdown& b) const {
        auto chk = [&](const char* name, double v) {
            if (!std::isfinite(v))
                throw NumericalError("training step " + std::to_string(step_) + ": non-finite " + name);
        };
        chk("L_dur", b.dur);
        chk("L_mel", b.mel);
        chk("L_p", b.pitch);
        chk("L_pn", b.postnet);
        chk("L_c", b.commit);
    }

    std::vector<std::size_t> next_batch_indices() {
        std::vector<std::size_t> batch;
        const std::size_t b = std::min(cfg_.batch_size, corpus_.size());
        while (batch.size() < b) {
            if (order_pos_ >= order_.size()) {
                order_ = rng_.permutation(corpus_.size());
                order_pos_ = 0;
            }
            batch.push_back(order_[order_pos_++]);
        }
        return batch;
    }

    StyleTts<T>* model_;
    std::vector<Utterance> corpus_;
    TrainConfig cfg_;
    ParamMap<T> main_params_, pretrain_params_;
    Adam<T> adam_main_, adam_pre_;
    std::vector<Tensor<T>> cached_ws_;
    RngStream rng_;
    std::vector<std::size_t> order_;
    std::size_t order_pos_ = 0;
    std::size_t step_ = 0;
    bool pretrained_ = false;
    bool codebooks_seeded_ = false;
};

}  // namespace melforge
