#pragma once

// Desk-scale training harness: synthetic tone-burst data, the baselines, a small
// classifier, Adam training, evaluation and the throughput bench.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "adares/diffres.hpp"
#include "adares/io.hpp"
#include "adares/parallel.hpp"

namespace adares::harness {

// ---- synthetic data -------------------------------------------------------------

struct SyntheticDatasetConfig {
    std::size_t n_classes = 4;
    double clip_seconds = 1.0;
    double sample_rate = 16000.0;
    double event_length_ms = 100.0;
    std::size_t events_per_clip = 2;
    double fade_ms = 10.0;
    std::vector<double> tone_frequencies;  // empty: a default ladder
    double amplitude = 0.5;
    double noise_floor = 1e-5;
    std::size_t train_clips = 512;
    std::size_t test_clips = 128;
    std::uint64_t seed = 1;
    bool background_class = false;

    std::vector<double> frequencies() const {
        if (!tone_frequencies.empty()) return tone_frequencies;
        std::vector<double> f(n_classes);
        // Roughly half an octave apart, well inside the band and away from each other's mel filters.
        for (std::size_t k = 0; k < n_classes; ++k) f[k] = 500.0 * std::pow(1.5, static_cast<double>(k));
        return f;
    }

    std::size_t clip_samples() const { return static_cast<std::size_t>(std::lround(clip_seconds * sample_rate)); }
    std::size_t event_samples() const {
        return static_cast<std::size_t>(std::lround(event_length_ms * sample_rate / 1000.0));
    }

    void validate() const {
        if (n_classes < 1) throw ConfigError("need at least one class");
        if (!(clip_seconds > 0) || !(sample_rate > 0)) throw ConfigError("clip length and sample rate must be positive");
        if (!(event_length_ms > 0) || fade_ms < 0 || 2 * fade_ms > event_length_ms) throw ConfigError("invalid event envelope");
        if (events_per_clip == 0 && !background_class) {
            throw ConfigError("events_per_clip = 0 produces unlabeled silence; enable the background class");
        }
        if (events_per_clip * event_samples() > clip_samples()) {
            throw ConfigError("cannot fit " + std::to_string(events_per_clip) + " events of " +
                              std::to_string(event_length_ms) + " ms into a " + std::to_string(clip_seconds) + " s clip");
        }
        const auto f = frequencies();
        if (f.size() != n_classes) throw ConfigError("one tone frequency per class is required");
        for (double hz : f)
            if (!(hz > 0 && hz < sample_rate / 2)) throw ConfigError("tone frequency outside (0, Nyquist)");
        if (!(amplitude > 0 && amplitude <= 1)) throw ConfigError("amplitude must lie in (0, 1]");
        if (noise_floor < 0) throw ConfigError("noise floor must be nonnegative");
    }
};

inline constexpr std::size_t kNoLabel = static_cast<std::size_t>(-1);

struct Clip {
    dsp::Waveform wave;
    std::size_t label = kNoLabel;  // kNoLabel for background clips
    std::vector<double> target;    // one-hot, all zero for background
    std::vector<std::pair<std::size_t, std::size_t>> events;  // [begin, end) sample ranges
};

struct Dataset {
    std::vector<Clip> train;
    std::vector<Clip> test;
    std::size_t n_classes = 0;
};

/// One clip; its RNG depends only on (seed, split, index).
inline Clip synth_clip(const SyntheticDatasetConfig& cfg, std::uint32_t split, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), split,
                      static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    Clip clip;
    clip.wave.sample_rate = cfg.sample_rate;
    const std::size_t L = cfg.clip_samples();
    clip.wave.samples.assign(L, 0.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (double& v : clip.wave.samples) v = cfg.noise_floor * noise(rng);
    clip.target.assign(cfg.n_classes, 0.0);
    if (cfg.events_per_clip == 0) return clip;

    clip.label = std::uniform_int_distribution<std::size_t>(0, cfg.n_classes - 1)(rng);
    clip.target[clip.label] = 1.0;
    const double hz = cfg.frequencies()[clip.label];
    const std::size_t len = cfg.event_samples();
    const std::size_t fade = static_cast<std::size_t>(std::lround(cfg.fade_ms * cfg.sample_rate / 1000.0));
    // One event per equal segment keeps bursts disjoint.
    const std::size_t segment = L / cfg.events_per_clip;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t e = 0; e < cfg.events_per_clip; ++e) {
        const std::size_t slack = segment - len;
        const std::size_t begin = e * segment + std::uniform_int_distribution<std::size_t>(0, slack)(rng);
        const double phase = 2.0 * std::numbers::pi * unit(rng);
        const double amp = cfg.amplitude * (0.6 + 0.4 * unit(rng));
        for (std::size_t n = 0; n < len; ++n) {
            double env = 1.0;
            if (fade > 0 && n < fade) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n) / fade);
            if (fade > 0 && len - 1 - n < fade) {
                env = std::min(env, 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(len - 1 - n) / fade));
            }
            clip.wave.samples[begin + n] +=
                amp * env * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(n) / cfg.sample_rate + phase);
        }
        clip.events.emplace_back(begin, begin + len);
    }
    return clip;
}

inline Dataset generate_dataset(const SyntheticDatasetConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.n_classes = cfg.n_classes;
    ds.train.resize(cfg.train_clips);
    ds.test.resize(cfg.test_clips);
    parallel_for(cfg.train_clips, [&](std::size_t i) { ds.train[i] = synth_clip(cfg, 0, i); });
    parallel_for(cfg.test_clips, [&](std::size_t i) { ds.test[i] = synth_clip(cfg, 1, i); });
    return ds;
}

// ---- variants and baselines -------------------------------------------------------

enum class Variant { Mel, CHSize, AvgPool, ConvAvgPool, DiffRes };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Mel: return "mel-100fps";
        case Variant::CHSize: return "chsize";
        case Variant::AvgPool: return "avgpool";
        case Variant::ConvAvgPool: return "convavgpool";
        case Variant::DiffRes: return "diffres";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "mel-100fps" || s == "mel") return Variant::Mel;
    if (s == "chsize") return Variant::CHSize;
    if (s == "avgpool") return Variant::AvgPool;
    if (s == "convavgpool") return Variant::ConvAvgPool;
    if (s == "diffres") return Variant::DiffRes;
    throw ConfigError("unknown variant '" + s + "' (expected mel-100fps, chsize, avgpool, convavgpool or diffres)");
}

/// Integer pooling factor 1/(1 - delta); the fixed-stride baselines need an exact one.
inline std::size_t pool_factor(double delta) {
    if (!(delta >= 0 && delta < 1)) throw ConfigError("reduction rate must lie in [0, 1)");
    const double k = 1.0 / (1.0 - delta);
    const double r = std::round(k);
    if (std::abs(k - r) > 1e-9) {
        throw ConfigError("reduction rate " + std::to_string(delta) + " has no integer pooling factor");
    }
    return static_cast<std::size_t>(r);
}

inline std::size_t pooled_frames(std::size_t T, std::size_t factor) { return (T + factor - 1) / factor; }

/// Non-overlapping means over `factor` frames; a short tail is padded by repeating the last frame.
inline Tensor avg_pool(const Tensor& x, std::size_t factor) {
    if (x.rank() != 2) throw ShapeError("avg_pool expects F x T");
    if (factor < 1) throw ConfigError("pooling factor must be positive");
    const std::size_t F = x.dim(0), T = x.dim(1), t = pooled_frames(T, factor);
    Tensor out({F, t});
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < t; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < factor; ++k) acc += x.at(f, std::min(i * factor + k, T - 1));
            out.at(f, i) = acc / static_cast<double>(factor);
        }
    return out;
}

/// T x t averaging matrix used by the tape version of avg_pool.
inline Tensor pooling_matrix(std::size_t T, std::size_t factor) {
    const std::size_t t = pooled_frames(T, factor);
    Tensor p({T, t});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t k = 0; k < factor; ++k) p.at(std::min(i * factor + k, T - 1), i) += 1.0 / factor;
    return p;
}

inline Var avg_pool(const Var& x, std::size_t factor) {
    if (x.shape().size() != 3) throw ShapeError("avg_pool expects [B, F, T]");
    if (factor == 1) return x;
    return ad::matmul(x, x.tape()->constant(pooling_matrix(x.dim(2), factor)));
}

/// Mel spectrogram at hop * factor. The window grows with the hop when the hop would exceed it.
inline dsp::SpectrogramConfig chsize_config(dsp::SpectrogramConfig cfg, std::size_t factor) {
    if (factor < 1) throw ConfigError("hop factor must be positive");
    cfg.hop_ms *= static_cast<double>(factor);
    cfg.window_length_ms = std::max(cfg.window_length_ms, cfg.hop_ms);
    cfg.fft_size = std::max(cfg.fft_size, std::bit_ceil(cfg.window_samples()));
    return cfg;
}

inline dsp::Spectrogram chsize(const dsp::Waveform& w, const dsp::SpectrogramConfig& cfg, std::size_t factor) {
    dsp::Spectrogram sp = dsp::mel_spectrogram(w, chsize_config(cfg, factor));
    if (sp.T < 1) throw ShapeError("hop factor leaves no frames");
    return sp;
}

/// Three ResConv1D blocks (F -> F, kernel 5) in front of average pooling.
class ConvAvgPoolEncoder {
public:
    ConvAvgPoolEncoder(std::mt19937_64& rng, std::size_t channels = 128, std::size_t blocks = 3, std::size_t kernel = 5)
        : channels_(channels) {
        blocks_.reserve(blocks);
        for (std::size_t k = 0; k < blocks; ++k)
            blocks_.emplace_back("encoder.block" + std::to_string(k), channels, channels, kernel, rng);
    }

    Var forward(Tape& tape, const Var& x, std::size_t factor, nn::Mode mode) {
        if (x.shape().size() != 3 || x.dim(1) != channels_) {
            throw ShapeError("encoder expects " + std::to_string(channels_) + " channels, got " + to_string(x.shape()));
        }
        Var h = x;
        for (auto& b : blocks_) h = b.forward(tape, h, mode);
        return avg_pool(h, factor);
    }

    void collect(nn::ParamList& out) {
        for (auto& b : blocks_) b.collect(out);
    }
    void collect_state(nn::StateList& out) {
        for (auto& b : blocks_) b.collect_state(out);
    }
    std::size_t parameter_count() {
        nn::ParamList p;
        collect(p);
        return nn::count_parameters(p);
    }
    std::vector<nn::ResConv1DBlock>& blocks() { return blocks_; }

private:
    std::size_t channels_;
    std::vector<nn::ResConv1DBlock> blocks_;
};

// ---- classifier -------------------------------------------------------------------

/// conv(k3)-bn-leaky twice, global average over time, linear head, sigmoid.
class ToyClassifier {
public:
    ToyClassifier(std::mt19937_64& rng, std::size_t in_channels, std::size_t n_classes, std::size_t hidden = 32)
        : conv1_("classifier.conv1", in_channels, hidden, 3, rng),
          bn1_("classifier.bn1", hidden),
          conv2_("classifier.conv2", hidden, hidden, 3, rng),
          bn2_("classifier.bn2", hidden),
          head_("classifier.head", hidden, n_classes, rng),
          in_channels_(in_channels),
          n_classes_(n_classes) {}

    Var forward(Tape& tape, const Var& x, nn::Mode mode) {
        if (x.shape().size() != 3 || x.dim(1) != in_channels_) {
            throw ShapeError("classifier expects " + std::to_string(in_channels_) + " input channels, got " +
                             to_string(x.shape()));
        }
        Var h = ad::leaky_relu(bn1_.forward(tape, conv1_.forward(tape, x), mode), nn::kLeakySlope);
        h = ad::leaky_relu(bn2_.forward(tape, conv2_.forward(tape, h), mode), nn::kLeakySlope);
        return ad::sigmoid(head_.forward(tape, ad::mean_axis(h, 2)));
    }

    std::size_t n_classes() const { return n_classes_; }

    void collect(nn::ParamList& out) {
        conv1_.collect(out);
        bn1_.collect(out);
        conv2_.collect(out);
        bn2_.collect(out);
        head_.collect(out);
    }
    void collect_state(nn::StateList& out) {
        conv1_.collect_state(out);
        bn1_.collect_state(out);
        conv2_.collect_state(out);
        bn2_.collect_state(out);
        head_.collect_state(out);
    }
    nn::Linear& head() { return head_; }

private:
    nn::Conv1d conv1_;
    nn::BatchNorm1d bn1_;
    nn::Conv1d conv2_;
    nn::BatchNorm1d bn2_;
    nn::Linear head_;
    std::size_t in_channels_, n_classes_;
};

// ---- model ----------------------------------------------------------------------

struct ModelConfig {
    Variant variant = Variant::DiffRes;
    std::size_t n_mels = 128;
    std::size_t n_classes = 4;
    DiffResConfig diffres;  // delta also sets the pooling factor of the baselines
    FrameImportanceNet::ChannelPlan importance_channels;  // empty: the default plan for n_mels
    std::size_t classifier_hidden = 32;

    std::size_t factor() const {
        return (variant == Variant::Mel || variant == Variant::DiffRes) ? 1 : pool_factor(diffres.delta);
    }
};

struct ModelOutput {
    Var features;  // what the classifier sees
    Var probs;     // [B, n_classes]
    std::optional<DiffResOutput> diffres;
};

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        std::mt19937_64 rng(seed);
        std::size_t in = cfg.n_mels;
        switch (cfg.variant) {
            case Variant::DiffRes: {
                auto plan = cfg.importance_channels.empty() ? FrameImportanceNet::default_channels(cfg.n_mels)
                                                            : cfg.importance_channels;
                diffres_ = std::make_unique<DiffResLayer>(rng, cfg.diffres, std::move(plan));
                in = cfg.n_mels * cfg.diffres.channel_count();
                break;
            }
            case Variant::ConvAvgPool:
                encoder_ = std::make_unique<ConvAvgPoolEncoder>(rng, cfg.n_mels);
                [[fallthrough]];
            case Variant::AvgPool:
            case Variant::CHSize:
                cfg.factor();  // validates delta
                break;
            case Variant::Mel: break;
        }
        classifier_ = std::make_unique<ToyClassifier>(rng, in, cfg.n_classes, cfg.classifier_hidden);
    }

    const ModelConfig& config() const { return cfg_; }
    Variant variant() const { return cfg_.variant; }

    /// Front-end only: x [B, F, T] -> classifier input.
    Var frontend(Tape& tape, const Var& x, nn::Mode mode, std::optional<DiffResOutput>* diag = nullptr) {
        switch (cfg_.variant) {
            case Variant::Mel:
            case Variant::CHSize: return x;
            case Variant::AvgPool: return avg_pool(x, cfg_.factor());
            case Variant::ConvAvgPool: return encoder_->forward(tape, x, cfg_.factor(), mode);
            case Variant::DiffRes: {
                DiffResOutput out = diffres_->forward(tape, x, mode);
                Var f = out.features;
                if (diag) *diag = std::move(out);
                return f;
            }
        }
        throw ConfigError("unhandled variant");
    }

    ModelOutput forward(Tape& tape, const Var& x, nn::Mode mode) {
        ModelOutput out;
        out.features = frontend(tape, x, mode, &out.diffres);
        out.probs = classifier_->forward(tape, out.features, mode);
        return out;
    }

    nn::ParamList parameters() {
        nn::ParamList p;
        if (diffres_) diffres_->collect(p);
        if (encoder_) encoder_->collect(p);
        classifier_->collect(p);
        return p;
    }

    nn::StateList state() {
        nn::StateList s;
        if (diffres_) diffres_->collect_state(s);
        if (encoder_) encoder_->collect_state(s);
        classifier_->collect_state(s);
        return s;
    }

    DiffResLayer* diffres() { return diffres_.get(); }
    ConvAvgPoolEncoder* encoder() { return encoder_.get(); }
    ToyClassifier& classifier() { return *classifier_; }

    void save(const std::filesystem::path& path) { io::save_state(path, state()); }
    void load(const std::filesystem::path& path) { io::load_state(path, state()); }

private:
    ModelConfig cfg_;
    std::unique_ptr<DiffResLayer> diffres_;
    std::unique_ptr<ConvAvgPoolEncoder> encoder_;
    std::unique_ptr<ToyClassifier> classifier_;
};

// ---- features ---------------------------------------------------------------------

/// Per-clip model inputs for one variant.
struct FeatureSet {
    std::vector<Tensor> inputs;                // F x T per clip
    std::vector<std::vector<double>> energy;   // per-frame energy of the 100 FPS spectrogram
    std::vector<std::size_t> labels;
    std::vector<std::vector<double>> targets;
    std::size_t F = 0, T = 0;
    std::size_t n_classes = 0;

    std::size_t size() const { return inputs.size(); }
};

inline FeatureSet prepare_features(const std::vector<Clip>& clips, std::size_t n_classes, const ModelConfig& model,
                                   const dsp::SpectrogramConfig& spec) {
    if (clips.empty()) throw ConfigError("no clips");
    FeatureSet fs;
    fs.n_classes = n_classes;
    const std::size_t n = clips.size();
    fs.inputs.resize(n);
    fs.energy.resize(n);
    fs.labels.resize(n);
    fs.targets.resize(n);
    const bool coarse = model.variant == Variant::CHSize;
    const std::size_t factor = model.factor();
    parallel_for(n, [&](std::size_t i) {
        dsp::Spectrogram sp = dsp::mel_spectrogram(clips[i].wave, spec);
        fs.energy[i] = dsp::frame_energy(sp);
        fs.inputs[i] = coarse ? chsize(clips[i].wave, spec, factor).values : std::move(sp.values);
        fs.labels[i] = clips[i].label;
        fs.targets[i] = clips[i].target;
    });
    fs.F = fs.inputs[0].dim(0);
    fs.T = fs.inputs[0].dim(1);
    for (const auto& x : fs.inputs)
        if (x.dim(0) != fs.F || x.dim(1) != fs.T) throw ShapeError("clips of unequal length in one feature set");
    return fs;
}

struct Batch {
    Tensor x;        // [B, F, T]
    Tensor targets;  // [B, n_classes]
    std::vector<std::vector<double>> energy;
    std::vector<std::size_t> labels;
};

inline Batch make_batch(const FeatureSet& fs, std::span<const std::size_t> idx) {
    Batch b;
    const std::size_t B = idx.size(), per = fs.F * fs.T;
    b.x = Tensor({B, fs.F, fs.T});
    b.targets = Tensor({B, fs.n_classes});
    for (std::size_t k = 0; k < B; ++k) {
        const std::size_t i = idx[k];
        std::copy(fs.inputs[i].storage().begin(), fs.inputs[i].storage().end(), b.x.ptr() + k * per);
        std::copy(fs.targets[i].begin(), fs.targets[i].end(), b.targets.ptr() + k * fs.n_classes);
        b.energy.push_back(fs.energy[i]);
        b.labels.push_back(fs.labels[i]);
    }
    return b;
}

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::vector<std::size_t> predictions(const Tensor& probs) {
    std::vector<std::size_t> out(probs.dim(0));
    const std::size_t C = probs.dim(1);
    for (std::size_t b = 0; b < out.size(); ++b) out[b] = argmax(std::span<const double>(probs.ptr() + b * C, C));
    return out;
}

// ---- metrics ----------------------------------------------------------------------

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class;                    // NaN for classes absent from the set
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
    std::size_t count = 0;                            // labeled clips scored
};

/// Accuracy over labeled clips: fraction whose argmax prediction equals the label.
inline EvalResult score_predictions(std::span<const std::size_t> labels, std::span<const std::size_t> predicted,
                                    std::size_t n_classes) {
    if (labels.size() != predicted.size()) throw ShapeError("label and prediction counts differ");
    EvalResult r;
    r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
    std::vector<std::size_t> hits(n_classes, 0), seen(n_classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kNoLabel) continue;
        if (labels[i] >= n_classes || predicted[i] >= n_classes) throw ShapeError("class index out of range");
        ++r.confusion[labels[i]][predicted[i]];
        ++seen[labels[i]];
        ++r.count;
        if (labels[i] == predicted[i]) {
            ++hits[labels[i]];
            ++correct;
        }
    }
    r.accuracy = r.count ? static_cast<double>(correct) / static_cast<double>(r.count) : 0.0;
    r.per_class.resize(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k)
        r.per_class[k] = seen[k] ? static_cast<double>(hits[k]) / static_cast<double>(seen[k]) : std::nan("");
    return r;
}

inline EvalResult evaluate(Model& model, const FeatureSet& fs, std::size_t batch = 32) {
    if (fs.n_classes != model.config().n_classes) throw ShapeError("class count of data and model differ");
    if (fs.F != model.config().n_mels) throw ShapeError("mel count of data and model differ");
    std::vector<std::size_t> predicted;
    predicted.reserve(fs.size());
    std::vector<std::size_t> idx(fs.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t start = 0; start < fs.size(); start += batch) {
        const std::size_t end = std::min(fs.size(), start + batch);
        Batch b = make_batch(fs, std::span<const std::size_t>(idx).subspan(start, end - start));
        Tape tape(false);
        ModelOutput out = model.forward(tape, tape.constant(std::move(b.x)), nn::Mode::Eval);
        for (std::size_t p : predictions(out.probs.value())) predicted.push_back(p);
    }
    return score_predictions(fs.labels, predicted, fs.n_classes);
}

/// Importance-score diagnostics of one clip.
struct ClipDiagnostics {
    double rho = 0.0;
    double guide_loss = 0.0;
    double mean_score_empty = std::nan("");
    double mean_score_active = std::nan("");
};

inline ClipDiagnostics clip_diagnostics(std::span<const double> s, std::span<const double> energy,
                                        const DiffResConfig& cfg) {
    ClipDiagnostics d;
    d.rho = warp::activeness(s, energy, cfg.delta, cfg.epsilon);
    d.guide_loss = losses::guide_loss(s, energy, cfg.loss_config());
    double se = 0, sa = 0;
    std::size_t ne = 0, na = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (energy[i] < cfg.epsilon) {
            se += s[i];
            ++ne;
        } else if (energy[i] > cfg.epsilon) {
            sa += s[i];
            ++na;
        }
    }
    if (ne) d.mean_score_empty = se / static_cast<double>(ne);
    if (na) d.mean_score_active = sa / static_cast<double>(na);
    return d;
}

/// Eval-mode diagnostics for every clip of a set (diffres models only).
inline std::vector<ClipDiagnostics> score_diagnostics(Model& model, const FeatureSet& fs, std::size_t batch = 32) {
    if (!model.diffres()) throw ConfigError("score diagnostics need a diffres model");
    std::vector<ClipDiagnostics> out;
    std::vector<std::size_t> idx(fs.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t start = 0; start < fs.size(); start += batch) {
        const std::size_t end = std::min(fs.size(), start + batch);
        Batch b = make_batch(fs, std::span<const std::size_t>(idx).subspan(start, end - start));
        Tape tape(false);
        Var x = tape.constant(std::move(b.x));
        DiffResOutput o = model.diffres()->forward(tape, x, nn::Mode::Eval);
        const Tensor& s = o.scores.value();
        for (std::size_t k = 0; k < end - start; ++k)
            out.push_back(clip_diagnostics(std::span<const double>(s.ptr() + k * fs.T, fs.T), b.energy[k],
                                           model.diffres()->config()));
    }
    return out;
}

/// Mean over clips of each diagnostic, skipping NaN entries.
inline ClipDiagnostics average(const std::vector<ClipDiagnostics>& rows) {
    auto mean_of = [&](auto field) {
        double acc = 0;
        std::size_t n = 0;
        for (const auto& r : rows)
            if (!std::isnan(r.*field)) {
                acc += r.*field;
                ++n;
            }
        return n ? acc / static_cast<double>(n) : std::nan("");
    };
    return {mean_of(&ClipDiagnostics::rho), mean_of(&ClipDiagnostics::guide_loss),
            mean_of(&ClipDiagnostics::mean_score_empty), mean_of(&ClipDiagnostics::mean_score_active)};
}

// ---- training ---------------------------------------------------------------------

struct StepMetrics {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::string variant;
    double loss_total = 0, loss_bce = 0, loss_guide = 0, rho = 0, acc = 0;
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch = 16;
    nn::AdamConfig adam;
    std::uint64_t seed = 1;
    std::function<void(const StepMetrics&)> on_step;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (batch < 2) throw ConfigError("batch must be at least 2 for batch statistics");
        if (!(adam.lr > 0)) throw ConfigError("learning rate must be positive");
    }
};

struct TrainResult {
    std::vector<StepMetrics> history;
};

inline TrainResult train(Model& model, const FeatureSet& fs, const TrainConfig& cfg) {
    cfg.validate();
    if (fs.F != model.config().n_mels) throw ShapeError("mel count of data and model differ");
    if (fs.n_classes != model.config().n_classes) throw ShapeError("class count of data and model differ");
    if (fs.size() < cfg.batch) throw ConfigError("fewer clips than one batch");
    nn::Adam opt(model.parameters(), cfg.adam);
    std::mt19937_64 shuffle_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 1);
    std::vector<std::size_t> order(fs.size());
    std::iota(order.begin(), order.end(), 0);
    const std::string name = variant_name(model.variant());
    const bool guided = model.variant() == Variant::DiffRes;

    TrainResult result;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        // Drop the ragged tail so every step sees a full batch.
        for (std::size_t start = 0; start + cfg.batch <= order.size(); start += cfg.batch, ++step) {
            Batch b = make_batch(fs, std::span<const std::size_t>(order).subspan(start, cfg.batch));
            Tape tape;
            ModelOutput out = model.forward(tape, tape.constant(std::move(b.x)), nn::Mode::Train);
            Var bce = losses::bce_loss(out.probs, b.targets);
            StepMetrics m;
            m.step = step;
            m.epoch = epoch;
            m.variant = name;
            Var total = bce;
            if (guided) {
                const DiffResConfig& dc = model.diffres()->config();
                Var guide = losses::guide_loss(out.diffres->scores, b.energy, dc.loss_config());
                total = losses::total_loss(bce, guide);
                m.loss_guide = guide.value().item();
                const Tensor& s = out.diffres->scores.value();
                for (std::size_t k = 0; k < cfg.batch; ++k)
                    m.rho += warp::activeness(std::span<const double>(s.ptr() + k * fs.T, fs.T), b.energy[k], dc.delta,
                                              dc.epsilon);
                m.rho /= static_cast<double>(cfg.batch);
            }
            m.loss_bce = bce.value().item();
            m.loss_total = total.value().item();
            if (!std::isfinite(m.loss_total)) {
                throw NumericError("training diverged at step " + std::to_string(step) + " (" + name +
                                   "): loss_bce=" + std::to_string(m.loss_bce) +
                                   " loss_guide=" + std::to_string(m.loss_guide));
            }
            const auto pred = predictions(out.probs.value());
            std::size_t hits = 0, labeled = 0;
            for (std::size_t k = 0; k < pred.size(); ++k) {
                if (b.labels[k] == kNoLabel) continue;
                ++labeled;
                hits += pred[k] == b.labels[k] ? 1 : 0;
            }
            m.acc = labeled ? static_cast<double>(hits) / static_cast<double>(labeled) : 0.0;

            opt.zero_grad();
            tape.backward(total);
            opt.step();
            result.history.push_back(m);
            if (cfg.on_step) cfg.on_step(m);
        }
    }
    return result;
}

// ---- CSV ------------------------------------------------------------------------

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline const char* kMetricsHeader = "step,variant,loss_total,loss_bce,loss_guide,rho,acc";

inline std::string metrics_row(const StepMetrics& m) {
    return std::to_string(m.step) + "," + m.variant + "," + fmt(m.loss_total) + "," + fmt(m.loss_bce) + "," +
           fmt(m.loss_guide) + "," + fmt(m.rho) + "," + fmt(m.acc);
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<StepMetrics>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << kMetricsHeader << "\n";
    for (const auto& m : rows) out << metrics_row(m) << "\n";
}

// ---- throughput -------------------------------------------------------------------

struct BenchConfig {
    double seconds = 1.0;
    std::size_t repetitions = 20;
    std::size_t warmup = 3;
    double delta = 0.75;
    std::size_t n_classes = 4;
    dsp::SpectrogramConfig spec;
    std::uint64_t seed = 1;
    bool with_classifier = true;

    void validate() const {
        if (!(seconds > 0)) throw ConfigError("bench audio length must be positive");
        if (repetitions < 1) throw ConfigError("need at least one repetition");
    }
};

struct BenchRow {
    std::string variant;
    double fps_in = 0, fps_out = 0, clips_per_second = 0, mean_ms = 0, std_ms = 0;
};

inline const char* kBenchHeader = "variant,fps_in,fps_out,clips_per_second,mean_ms,std_ms";

namespace detail {

template <typename Fn>
BenchRow time_it(std::string name, double fps_in, double fps_out, const BenchConfig& cfg, Fn&& fn) {
    for (std::size_t i = 0; i < cfg.warmup; ++i) fn();
    std::vector<double> ms(cfg.repetitions);
    for (double& v : ms) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        v = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    BenchRow r{std::move(name), fps_in, fps_out};
    r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
    double var = 0;
    for (double v : ms) var += (v - r.mean_ms) * (v - r.mean_ms);
    r.std_ms = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
    r.clips_per_second = 1000.0 / r.mean_ms;
    return r;
}

}  // namespace detail

/// Wall clock from waveform to classifier input (and, optionally, to class probabilities)
/// for one clip of `seconds` audio. Single-threaded.
inline std::vector<BenchRow> bench_throughput(const std::vector<Variant>& variants, const BenchConfig& cfg) {
    cfg.validate();
    SyntheticDatasetConfig dc;
    dc.clip_seconds = cfg.seconds;
    dc.sample_rate = cfg.spec.sample_rate;
    dc.n_classes = cfg.n_classes;
    dc.seed = cfg.seed;
    dc.events_per_clip = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.seconds * 2));
    const dsp::Waveform wave = synth_clip(dc, 2, 0).wave;

    std::vector<BenchRow> rows;
    for (Variant v : variants) {
        ModelConfig mc;
        mc.variant = v;
        mc.n_mels = cfg.spec.n_mels;
        mc.n_classes = cfg.n_classes;
        mc.diffres.delta = v == Variant::Mel ? 0.0 : cfg.delta;
        Model model(mc, cfg.seed);
        const bool coarse = v == Variant::CHSize;
        const dsp::SpectrogramConfig spec = coarse ? chsize_config(cfg.spec, mc.factor()) : cfg.spec;
        const double fps_in = cfg.spec.fps();

        std::size_t t_out = 0;
        auto run = [&](bool classify) {
            dsp::Spectrogram sp = dsp::mel_spectrogram(wave, spec);
            Tape tape(false);
            Var x = tape.constant(sp.values.reshaped({1, sp.F, sp.T}));
            Var y = classify ? model.forward(tape, x, nn::Mode::Eval).probs : model.frontend(tape, x, nn::Mode::Eval);
            if (!classify) t_out = y.dim(2);
        };
        run(false);
        const double fps_out = static_cast<double>(t_out) / cfg.seconds;
        rows.push_back(detail::time_it(variant_name(v), fps_in, fps_out, cfg, [&] { run(false); }));
        if (cfg.with_classifier) {
            rows.push_back(detail::time_it(variant_name(v) + "+classifier", fps_in, fps_out, cfg, [&] { run(true); }));
        }
    }
    return rows;
}

inline std::string bench_row(const BenchRow& r) {
    return r.variant + "," + fmt(r.fps_in) + "," + fmt(r.fps_out) + "," + fmt(r.clips_per_second) + "," + fmt(r.mean_ms) +
           "," + fmt(r.std_ms);
}

inline void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << kBenchHeader << "\n";
    for (const auto& r : rows) out << bench_row(r) << "\n";
}

}  // namespace adares::harness
