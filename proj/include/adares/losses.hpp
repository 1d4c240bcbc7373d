#pragma once

#include <span>
#include <vector>

#include "adares/autodiff.hpp"

namespace adares::losses {

struct LossConfig {
    double lambda = 0.5;
    double epsilon = 1e-4;
    double delta = 0.5;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
        if (!(delta > 0.0)) throw ConfigError("guide loss needs a positive reduction rate");
    }
};

inline constexpr double kProbabilityClamp = 1e-7;

/// Hinge penalty on low-energy frames: mean over {i : energy_i < eps} of max(s_i / delta - lambda, 0).
/// Zero when no frame is empty.
inline double guide_loss(std::span<const double> s, std::span<const double> energy, const LossConfig& cfg) {
    cfg.validate();
    if (s.size() != energy.size()) throw ShapeError("guide_loss: score and energy lengths differ");
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (energy[i] < cfg.epsilon) {
            acc += std::max(s[i] / cfg.delta - cfg.lambda, 0.0);
            ++n;
        }
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

/// Batched guide loss: s [B, T], one energy row per clip; averaged over the batch.
inline Var guide_loss(const Var& s, const std::vector<std::vector<double>>& energies, const LossConfig& cfg) {
    cfg.validate();
    if (s.shape().size() != 2 || energies.size() != s.dim(0)) throw ShapeError("guide_loss: batch shape mismatch");
    const std::size_t B = s.dim(0), T = s.dim(1);
    Tensor weights({B, T});
    for (std::size_t b = 0; b < B; ++b) {
        if (energies[b].size() != T) throw ShapeError("guide_loss: energy length differs from frame count");
        std::size_t n = 0;
        for (double e : energies[b]) n += e < cfg.epsilon ? 1 : 0;
        for (std::size_t i = 0; i < T; ++i)
            if (energies[b][i] < cfg.epsilon) weights.at(b, i) = 1.0 / (static_cast<double>(n) * static_cast<double>(B));
    }
    Var hinge = ad::clamp_min(ad::add_scalar(ad::mul_scalar(s, 1.0 / cfg.delta), -cfg.lambda), 0.0);
    return ad::sum(hinge * s.tape()->constant(std::move(weights)));
}

/// Binary cross-entropy averaged over all entries, predictions clamped to [1e-7, 1 - 1e-7].
inline double bce_loss(std::span<const double> yhat, std::span<const double> y) {
    if (yhat.size() != y.size() || y.empty()) throw ShapeError("bce_loss: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double p = std::clamp(yhat[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
        acc += y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
    }
    return -acc / static_cast<double>(y.size());
}

inline Var bce_loss(const Var& probs, const Tensor& targets) {
    if (probs.shape() != targets.shape()) throw ShapeError("bce_loss: prediction and target shapes differ");
    Tape& tape = *probs.tape();
    Var p = ad::clamp(probs, kProbabilityClamp, 1.0 - kProbabilityClamp);
    Var y = tape.constant(targets);
    Tensor ones(targets.shape(), 1.0);
    Tensor one_minus(targets.shape());
    for (std::size_t i = 0; i < targets.size(); ++i) one_minus[i] = 1.0 - targets[i];
    Var ll = y * ad::log(p) + tape.constant(std::move(one_minus)) * ad::log(tape.constant(std::move(ones)) - p);
    return -ad::mean(ll);
}

inline double total_loss(double bce, double guide) {
    if (!std::isfinite(bce) || !std::isfinite(guide)) throw NumericError("non-finite loss term");
    return bce + guide;
}

inline Var total_loss(const Var& bce, const Var& guide) { return bce + guide; }

}  // namespace adares::losses
