#pragma once

// The DiffRes layer: frame importance estimation, rescale, warp construction and
// normalisation, frame warping (mean and max) and the resolution encoding.

#include <map>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include "adares/dsp.hpp"
#include "adares/losses.hpp"
#include "adares/nn.hpp"
#include "adares/warp.hpp"

namespace adares {

struct DiffResConfig {
    double delta = 0.5;
    double lambda = 0.5;
    double epsilon = 1e-4;
    bool use_mean = true;
    bool use_max = true;
    bool emit_resolution_encoding = true;

    std::size_t output_frames(std::size_t T) const { return warp::output_frames(T, delta); }
    std::size_t channel_count() const {
        return (use_mean ? 1 : 0) + (use_max ? 1 : 0) + (emit_resolution_encoding ? 1 : 0);
    }

    losses::LossConfig loss_config() const { return {lambda, epsilon, delta}; }

    void validate() const {
        if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("reduction rate must lie in [0, 1)");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
        if (channel_count() == 0) throw ConfigError("at least one output channel is required");
    }
};

/// Stack of ResConv1D blocks mapping [B, F, T] to per-frame scores in (0, 1).
class FrameImportanceNet {
public:
    using ChannelPlan = std::vector<std::pair<std::size_t, std::size_t>>;

    static ChannelPlan default_channels(std::size_t in = 128) { return {{in, 64}, {64, 32}, {32, 16}, {16, 8}, {8, 1}}; }

    explicit FrameImportanceNet(std::mt19937_64& rng, ChannelPlan channels = default_channels(),
                                std::size_t kernel = 5, const std::string& name = "importance")
        : channels_(std::move(channels)) {
        if (channels_.empty() || channels_.back().second != 1) {
            throw ConfigError("importance network must end in a single channel");
        }
        for (std::size_t k = 1; k < channels_.size(); ++k) {
            if (channels_[k].first != channels_[k - 1].second) throw ConfigError("importance network channels do not chain");
        }
        blocks_.reserve(channels_.size());
        for (std::size_t k = 0; k < channels_.size(); ++k) {
            // The last block emits logits for the sigmoid, so it skips the trailing activation.
            const bool last = k + 1 == channels_.size();
            blocks_.emplace_back(name + ".block" + std::to_string(k), channels_[k].first, channels_[k].second, kernel,
                                 rng, !last);
        }
    }

    std::size_t in_channels() const { return channels_.front().first; }

    /// Logits [B, T] before the sigmoid.
    Var logits(Tape& tape, const Var& x, nn::Mode mode) {
        if (x.shape().size() != 3 || x.dim(1) != in_channels()) {
            throw ShapeError("importance network expects [B, " + std::to_string(in_channels()) + ", T], got " +
                             to_string(x.shape()));
        }
        Var h = x;
        for (auto& block : blocks_) h = block.forward(tape, h, mode);
        return ad::reshape(h, {x.dim(0), x.dim(2)});
    }

    /// Raw scores s' = sigmoid(H(x)), [B, T].
    Var forward(Tape& tape, const Var& x, nn::Mode mode) { return ad::sigmoid(logits(tape, x, mode)); }

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
    ChannelPlan channels_;
    std::vector<nn::ResConv1DBlock> blocks_;
};

/// Tape outputs of one DiffRes forward pass over a batch.
struct DiffResOutput {
    Var raw_scores;  // s'  [B, T]
    Var scores;      // s   [B, T]
    Var warp;        // W   [B, t, T], normalised
    Var mean;        // [B, F, t]
    Var max;         // [B, F, t]
    Var resolution;  // [B, F, t]
    Var features;    // enabled channels concatenated along axis 1: [B, k*F, t]
    std::size_t output_frames = 0;
};

class DiffResLayer {
public:
    DiffResLayer(std::mt19937_64& rng, DiffResConfig cfg,
                 FrameImportanceNet::ChannelPlan channels = FrameImportanceNet::default_channels())
        : cfg_(cfg), net_(std::make_unique<FrameImportanceNet>(rng, std::move(channels))) {
        cfg_.validate();
    }

    const DiffResConfig& config() const { return cfg_; }
    FrameImportanceNet& net() { return *net_; }

    DiffResOutput forward(Tape& tape, const Var& x, nn::Mode mode) {
        const std::size_t F = x.dim(1), T = x.dim(2);
        DiffResOutput out;
        out.output_frames = cfg_.output_frames(T);
        out.raw_scores = net_->forward(tape, x, mode);
        out.scores = warp::rescale(out.raw_scores, out.output_frames);
        Var w0 = warp::build_warp_eq5(out.scores, out.output_frames);
        out.warp = warp::normalize_warp_vectorized(w0);
        std::vector<Var> channels;
        if (cfg_.use_mean) {
            out.mean = warp::warp_frames(x, out.warp, warp::Aggregation::Mean);
            channels.push_back(out.mean);
        }
        if (cfg_.use_max) {
            out.max = warp::warp_frames(x, out.warp, warp::Aggregation::Max);
            channels.push_back(out.max);
        }
        if (cfg_.emit_resolution_encoding) {
            out.resolution = warp::resolution_encoding(out.warp, encoding(F, T));
            channels.push_back(out.resolution);
        }
        out.features = channels.size() == 1 ? channels.front() : ad::concat(channels, 1);
        return out;
    }

    void collect(nn::ParamList& out) { net_->collect(out); }
    void collect_state(nn::StateList& out) { net_->collect_state(out); }

private:
    const Tensor& encoding(std::size_t F, std::size_t T) {
        std::lock_guard lock(*encoding_mu_);
        auto& slot = encodings_[{F, T}];
        if (slot.empty()) slot = warp::positional_encoding(F, T);
        return slot;
    }

    DiffResConfig cfg_;
    std::unique_ptr<FrameImportanceNet> net_;
    std::map<std::pair<std::size_t, std::size_t>, Tensor> encodings_;
    std::unique_ptr<std::mutex> encoding_mu_ = std::make_unique<std::mutex>();
};

/// Plain-value result of warping one spectrogram, with diagnostics.
struct WarpedFeature {
    Tensor mean_channel;         // F x t
    Tensor max_channel;          // F x t
    Tensor resolution_encoding;  // F x t
    std::vector<double> raw_scores;
    std::vector<double> scores;
    std::vector<std::size_t> assignment;  // output row of each input frame
    warp::WarpMatrix warp;
    std::vector<double> energy;
    double rho = 0.0;
    double guide_loss = 0.0;
};

/// Runs the layer on a single spectrogram without recording gradients.
inline WarpedFeature diffres_forward(const dsp::Spectrogram& sp, DiffResLayer& layer, nn::Mode mode = nn::Mode::Eval) {
    Tape tape(false);
    Var x = tape.constant(sp.values.reshaped({1, sp.F, sp.T}));
    DiffResOutput out = layer.forward(tape, x, mode);
    const std::size_t t = out.output_frames;
    WarpedFeature wf;
    auto squeeze = [&](const Var& v) { return v.valid() ? v.value().reshaped({sp.F, t}) : Tensor({sp.F, t}); };
    wf.mean_channel = squeeze(out.mean);
    wf.max_channel = squeeze(out.max);
    wf.resolution_encoding = squeeze(out.resolution);
    wf.raw_scores = out.raw_scores.value().storage();
    wf.scores = out.scores.value().storage();
    wf.assignment = warp::route_frames<double>(std::span<const double>(wf.scores), t);
    wf.warp = warp::WarpMatrix{out.warp.value().reshaped({t, sp.T}), warp::Provenance::Normalized};
    wf.energy = dsp::frame_energy(sp);
    const DiffResConfig& cfg = layer.config();
    if (cfg.delta > 0) {
        wf.rho = warp::activeness(wf.scores, wf.energy, cfg.delta, cfg.epsilon);
        wf.guide_loss = losses::guide_loss(wf.scores, wf.energy, cfg.loss_config());
    }
    return wf;
}

}  // namespace adares
