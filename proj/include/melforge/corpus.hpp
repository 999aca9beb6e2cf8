#pragma once

// Corpus records and ingestion. Manifest format: UTF-8 lines with eight
// tab-separated fields
//   id, phoneme ids (space-sep), durations (space-sep), word boundaries,
//   speaker label, emotion label, pitch file path, mel file path
// with file paths relative to the manifest's directory. Pitch files are GSTN
// [T] contours in Hz (0 = unvoiced); mel files are GSTN [T, 80].

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "melforge/backbone.hpp"
#include "melforge/tensor_io.hpp"

namespace melforge {

struct Utterance {
    std::string id;
    PhonemeSequence phonemes;
    std::vector<int> durations;
    std::vector<double> pitch;
    std::size_t mel_frames = 0;
    std::size_t mel_bins = 0;
    std::vector<float> mel;  // row-major T x bins
    int speaker = 0;
    int emotion = 0;
    std::string external_emb_path;  // optional precomputed global embedding

    std::size_t total_duration() const {
        std::size_t t = 0;
        for (int d : durations) t += static_cast<std::size_t>(d);
        return t;
    }

    void validate() const {
        phonemes.validate();
        if (durations.size() != phonemes.ids.size())
            throw ValidationError("utterance '" + id + "': " + std::to_string(durations.size()) +
                                  " durations for " + std::to_string(phonemes.ids.size()) + " phonemes");
        for (int d : durations)
            if (d < 0) throw ValidationError("utterance '" + id + "': negative duration");
        const std::size_t t = total_duration();
        if (t == 0) throw ValidationError("utterance '" + id + "': zero total duration");
        if (t != mel_frames)
            throw ValidationError("utterance '" + id + "': durations sum to " + std::to_string(t) + " but mel has " +
                                  std::to_string(mel_frames) + " frames");
        if (t != pitch.size())
            throw ValidationError("utterance '" + id + "': durations sum to " + std::to_string(t) +
                                  " but pitch has " + std::to_string(pitch.size()) + " frames");
        if (speaker < 0 || emotion < 0) throw ValidationError("utterance '" + id + "': negative label");
        for (double f : pitch)
            if (f < 0.0) throw ValidationError("utterance '" + id + "': negative pitch value");
    }

    template <class T>
    Tensor<T> mel_tensor() const {
        std::vector<T> data(mel.size());
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(mel[i]);
        return Tensor<T>::from_data(std::move(data), {mel_frames, mel_bins});
    }

    // Frame span per word, derived from phoneme durations and boundaries.
    std::vector<int> word_frame_counts() const {
        std::vector<int> out;
        const auto& wb = phonemes.word_boundaries;
        for (std::size_t w = 0; w < wb.size(); ++w) {
            const std::size_t lo = static_cast<std::size_t>(wb[w]);
            const std::size_t hi = (w + 1 < wb.size()) ? static_cast<std::size_t>(wb[w + 1]) : durations.size();
            int frames = 0;
            for (std::size_t p = lo; p < hi; ++p) frames += durations[p];
            out.push_back(frames);
        }
        return out;
    }
};

namespace corpus_detail {

inline std::vector<int> parse_int_list(const std::string& field, const std::string& what, const std::string& id) {
    std::vector<int> out;
    std::istringstream ss(field);
    long v;
    while (ss >> v) out.push_back(static_cast<int>(v));
    if (!ss.eof()) throw ValidationError("utterance '" + id + "': malformed " + what + " field '" + field + "'");
    return out;
}

}  // namespace corpus_detail

inline std::vector<Utterance> ingest_corpus(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("manifest: cannot open '" + manifest_path + "'");
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
    std::vector<Utterance> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i)
            if (i == line.size() || line[i] == '\t') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        if (fields.size() != 8)
            throw ValidationError("manifest line " + std::to_string(line_no) + ": expected 8 tab-separated fields, got " +
                                  std::to_string(fields.size()));
        Utterance u;
        u.id = fields[0];
        u.phonemes.ids = corpus_detail::parse_int_list(fields[1], "phoneme", u.id);
        u.durations = corpus_detail::parse_int_list(fields[2], "duration", u.id);
        u.phonemes.word_boundaries = corpus_detail::parse_int_list(fields[3], "word boundary", u.id);
        try {
            u.speaker = std::stoi(fields[4]);
            u.emotion = std::stoi(fields[5]);
        } catch (const std::exception&) {
            throw ValidationError("utterance '" + u.id + "': malformed label field");
        }
        const std::string pitch_path = (base / fields[6]).string();
        const std::string mel_path = (base / fields[7]).string();
        auto [pdims, pdata] = load_gstn(pitch_path);
        if (pdims.size() != 1)
            throw ValidationError("utterance '" + u.id + "': pitch file must be rank 1, got " + shape_str(pdims));
        u.pitch.assign(pdata.begin(), pdata.end());
        auto [mdims, mdata] = load_gstn(mel_path);
        if (mdims.size() != 2)
            throw ValidationError("utterance '" + u.id + "': mel file must be rank 2, got " + shape_str(mdims));
        u.mel_frames = mdims[0];
        u.mel_bins = mdims[1];
        u.mel = std::move(mdata);
        const std::string emb_path = (base / (std::filesystem::path(fields[7]).stem().string() + ".emb")).string();
        if (std::filesystem::exists(emb_path)) u.external_emb_path = emb_path;
        u.validate();
        out.push_back(std::move(u));
    }
    if (out.empty()) throw ValidationError("empty corpus: '" + manifest_path + "' has no records");
    return out;
}

// ---------------------------------------------------------------------------
// toy corpus generator
// ---------------------------------------------------------------------------

struct ToyCorpusConfig {
    std::size_t n_speakers = 4;
    std::size_t n_emotions = 3;
    std::size_t n_utterances = 16;
    std::size_t mel_bins = 80;
    std::uint64_t seed = 1;
};

struct ToyCorpus {
    Vocabulary vocab;
    std::vector<Utterance> utterances;
};

namespace corpus_detail {

inline double emotion_shape(int emotion, double pos, double wiggle) {
    switch (emotion % 3) {
        case 0: return 1.0 + 0.04 * wiggle;                    // level
        case 1: return 0.90 + 0.25 * pos + 0.04 * wiggle;      // rising
        default: return 1.15 - 0.25 * pos + 0.04 * wiggle;     // falling
    }
}

}  // namespace corpus_detail

// Procedural corpus: mel frames are per-phoneme spectral templates shaped by
// a per-speaker envelope and a per-emotion energy curve; pitch is a
// per-speaker base F0 times a per-emotion contour (fully voiced).
inline ToyCorpus make_toy_corpus(const ToyCorpusConfig& cfg) {
    static const char* kSymbols[] = {"sil", "aa", "ae", "ah", "ao", "eh", "ih", "iy", "uw", "ow", "b", "d",
                                     "g",   "k",  "p",  "t",  "s",  "z",  "f",  "m",  "n",  "l",  "r", "w"};
    ToyCorpus corpus;
    for (const char* s : kSymbols) corpus.vocab.symbols.push_back(s);
    const std::size_t vocab_size = corpus.vocab.symbols.size();
    RngStream rng(cfg.seed);

    // Per-phoneme spectral templates: three smooth bumps over the mel bins.
    std::vector<std::vector<double>> templates(vocab_size, std::vector<double>(cfg.mel_bins, 0.0));
    for (auto& tpl : templates)
        for (int bump = 0; bump < 3; ++bump) {
            const double center = rng.uniform(4.0, cfg.mel_bins - 4.0);
            const double width = rng.uniform(3.0, 10.0);
            const double amp = rng.uniform(0.4, 1.0);
            for (std::size_t b = 0; b < cfg.mel_bins; ++b) {
                const double d = (static_cast<double>(b) - center) / width;
                tpl[b] += amp * std::exp(-0.5 * d * d);
            }
        }

    // Per-speaker spectral envelopes: tilt plus a formant-like emphasis.
    std::vector<std::vector<double>> envelopes(cfg.n_speakers, std::vector<double>(cfg.mel_bins, 1.0));
    std::vector<double> base_f0(cfg.n_speakers);
    for (std::size_t s = 0; s < cfg.n_speakers; ++s) {
        const double tilt = rng.uniform(-0.6, 0.6);
        const double center = rng.uniform(8.0, cfg.mel_bins - 8.0);
        const double width = rng.uniform(6.0, 14.0);
        const double gain = rng.uniform(0.3, 0.8);
        for (std::size_t b = 0; b < cfg.mel_bins; ++b) {
            const double x = static_cast<double>(b) / (cfg.mel_bins - 1);
            const double d = (static_cast<double>(b) - center) / width;
            envelopes[s][b] = 1.0 + tilt * (x - 0.5) + gain * std::exp(-0.5 * d * d);
        }
        base_f0[s] = 110.0 + 50.0 * static_cast<double>(s);
    }

    for (std::size_t i = 0; i < cfg.n_utterances; ++i) {
        Utterance u;
        u.id = "utt" + std::to_string(i);
        u.speaker = static_cast<int>(i % cfg.n_speakers);
        u.emotion = static_cast<int>((i / cfg.n_speakers) % cfg.n_emotions);
        const std::size_t n_ph = 5 + rng.next_u64() % 4;  // 5..8 phonemes
        for (std::size_t p = 0; p < n_ph; ++p)
            u.phonemes.ids.push_back(1 + static_cast<int>(rng.next_u64() % (vocab_size - 1)));
        u.phonemes.word_boundaries.push_back(0);
        if (n_ph >= 4) u.phonemes.word_boundaries.push_back(static_cast<int>(n_ph / 2));
        if (n_ph >= 7) u.phonemes.word_boundaries.push_back(static_cast<int>(n_ph - 2));
        for (std::size_t p = 0; p < n_ph; ++p) u.durations.push_back(2 + static_cast<int>(rng.next_u64() % 3));

        const std::size_t t_total = u.total_duration();
        u.mel_frames = t_total;
        u.mel_bins = cfg.mel_bins;
        u.mel.resize(t_total * cfg.mel_bins);
        u.pitch.resize(t_total);
        std::vector<double> accent(n_ph);
        for (auto& a : accent) a = rng.uniform(0.94, 1.06);
        std::size_t t = 0;
        for (std::size_t p = 0; p < n_ph; ++p) {
            const auto& tpl = templates[static_cast<std::size_t>(u.phonemes.ids[p])];
            const auto& env = envelopes[static_cast<std::size_t>(u.speaker)];
            for (int rep = 0; rep < u.durations[p]; ++rep, ++t) {
                const double pos = static_cast<double>(t) / static_cast<double>(t_total);
                const double energy = corpus_detail::emotion_shape(u.emotion, pos, std::sin(0.9 * t));
                for (std::size_t b = 0; b < cfg.mel_bins; ++b) {
                    const double ripple = 0.05 * std::sin(0.7 * static_cast<double>(t) + 0.35 * static_cast<double>(b));
                    const double v = std::tanh(tpl[b] * env[b] * energy - 0.6 + ripple);
                    u.mel[t * cfg.mel_bins + b] = static_cast<float>(v);
                }
                u.pitch[t] = base_f0[static_cast<std::size_t>(u.speaker)] *
                             corpus_detail::emotion_shape(u.emotion, pos, std::sin(0.5 * t)) * accent[p];
            }
        }
        u.validate();
        corpus.utterances.push_back(std::move(u));
    }
    return corpus;
}

// Writes vocab.txt, manifest.tsv, and the per-utterance GSTN files.
inline void write_toy_corpus(const std::string& dir, const ToyCorpusConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    ToyCorpus corpus = make_toy_corpus(cfg);
    corpus.vocab.save((fs::path(dir) / "vocab.txt").string());
    std::ofstream manifest(fs::path(dir) / "manifest.tsv");
    if (!manifest) throw IoError("cannot write manifest in '" + dir + "'");
    for (const auto& u : corpus.utterances) {
        const std::string pitch_name = u.id + ".pitch.gstn";
        const std::string mel_name = u.id + ".mel.gstn";
        std::vector<float> pitch_f(u.pitch.begin(), u.pitch.end());
        save_gstn((fs::path(dir) / pitch_name).string(), {u.pitch.size()}, pitch_f);
        save_gstn((fs::path(dir) / mel_name).string(), {u.mel_frames, u.mel_bins}, u.mel);
        manifest << u.id << '\t';
        for (std::size_t p = 0; p < u.phonemes.ids.size(); ++p)
            manifest << (p ? " " : "") << u.phonemes.ids[p];
        manifest << '\t';
        for (std::size_t p = 0; p < u.durations.size(); ++p) manifest << (p ? " " : "") << u.durations[p];
        manifest << '\t';
        for (std::size_t p = 0; p < u.phonemes.word_boundaries.size(); ++p)
            manifest << (p ? " " : "") << u.phonemes.word_boundaries[p];
        manifest << '\t' << u.speaker << '\t' << u.emotion << '\t' << pitch_name << '\t' << mel_name << '\n';
    }
    if (!manifest) throw IoError("manifest write failed in '" + dir + "'");
}

}  // namespace melforge
