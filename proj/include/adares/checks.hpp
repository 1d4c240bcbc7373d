#pragma once

// Finite-difference checks over every tape op plus one end-to-end check of the
// total loss with respect to the importance-network parameters.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "adares/gradcheck.hpp"
#include "adares/harness.hpp"

namespace adares::checks {

inline constexpr double kOpTolerance = 1e-6;
inline constexpr double kEndToEndTolerance = 1e-4;

struct CheckResult {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t coordinates = 0;
    bool passed() const { return max_rel_error < tolerance; }
};

namespace detail {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.data()) v = d(rng);
    return t;
}

/// Values bounded away from zero (kinks of leaky_relu, clamp_min, maximum).
inline Tensor off_zero(Shape shape, std::mt19937_64& rng) {
    Tensor t = random_tensor(std::move(shape), rng, 0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (double& v : t.data())
        if (sign(rng)) v = -v;
    return t;
}

/// Distinct values at least 0.05 apart (so max picks a stable winner).
inline Tensor distinct(Shape shape, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::vector<double> v(t.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i) - 0.025 * static_cast<double>(v.size());
    std::shuffle(v.begin(), v.end(), rng);
    std::copy(v.begin(), v.end(), t.ptr());
    return t;
}

/// Contracts an op's output with fixed random weights so the check covers the whole Jacobian.
using OpFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline CheckResult check_op(const std::string& name, const OpFn& op, const std::vector<Tensor>& inputs,
                            std::mt19937_64& rng) {
    Tensor weights;
    {
        Tape probe(false);
        std::vector<Var> in;
        for (const auto& t : inputs) in.push_back(probe.constant(t));
        weights = random_tensor(op(probe, in).shape(), rng);
    }
    CheckResult r{name, 0.0, kOpTolerance, 0};
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto f = [&](Tape& tape, const Var& xk) {
            std::vector<Var> in;
            for (std::size_t j = 0; j < inputs.size(); ++j) in.push_back(j == k ? xk : tape.constant(inputs[j]));
            return ad::sum(op(tape, in) * tape.constant(weights));
        };
        GradCheckReport rep = grad_check(f, inputs[k]);
        r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
        r.coordinates += rep.coordinates;
    }
    return r;
}

}  // namespace detail

/// One result per tape op, named as the op appears on the tape.
inline std::vector<CheckResult> run_op_checks(std::uint64_t seed = 1) {
    using detail::check_op;
    using detail::distinct;
    using detail::off_zero;
    using detail::random_tensor;
    std::mt19937_64 rng(seed);
    std::vector<CheckResult> out;
    auto add = [&](const std::string& name, const detail::OpFn& op, std::vector<Tensor> in) {
        out.push_back(check_op(name, op, in, rng));
    };
    using V = const std::vector<Var>&;

    add("add", [](Tape&, V v) { return v[0] + v[1]; }, {random_tensor({2, 3, 4}, rng), random_tensor({3, 1}, rng)});
    add("sub", [](Tape&, V v) { return v[0] - v[1]; }, {random_tensor({3, 4}, rng), random_tensor({4}, rng)});
    add("mul", [](Tape&, V v) { return v[0] * v[1]; }, {random_tensor({2, 3, 4}, rng), random_tensor({2, 1, 4}, rng)});
    add("div", [](Tape&, V v) { return v[0] / v[1]; },
        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng, 0.5, 2.0)});
    add("add_scalar", [](Tape&, V v) { return ad::add_scalar(v[0], 0.7); }, {random_tensor({5}, rng)});
    add("mul_scalar", [](Tape&, V v) { return ad::mul_scalar(v[0], -1.3); }, {random_tensor({5}, rng)});
    add("sigmoid", [](Tape&, V v) { return ad::sigmoid(v[0]); }, {random_tensor({3, 4}, rng, -4, 4)});
    add("leaky_relu", [](Tape&, V v) { return ad::leaky_relu(v[0], 0.01); }, {off_zero({3, 5}, rng)});
    add("log", [](Tape&, V v) { return ad::log(v[0]); }, {random_tensor({6}, rng, 0.5, 2.0)});
    add("exp", [](Tape&, V v) { return ad::exp(v[0]); }, {random_tensor({6}, rng)});
    add("pow", [](Tape&, V v) { return ad::pow(v[0], 1.5); }, {random_tensor({6}, rng, 0.5, 2.0)});
    add("clamp_min", [](Tape&, V v) { return ad::clamp_min(v[0], 0.0); }, {off_zero({8}, rng)});
    add("maximum", [](Tape&, V v) { return ad::maximum(v[0], 0.0); }, {off_zero({8}, rng)});
    {
        Tensor x = off_zero({8}, rng);
        // Keep clear of both clamp edges.
        for (double& v : x.data())
            if (std::abs(std::abs(v) - 0.5) < 0.05) v *= 0.8;
        add("clamp", [](Tape&, V v) { return ad::clamp(v[0], -0.5, 0.5); }, {x});
    }
    add("reshape", [](Tape&, V v) { return ad::reshape(v[0], {4, 3}); }, {random_tensor({2, 6}, rng)});
    add("transpose", [](Tape&, V v) { return ad::transpose(v[0]); }, {random_tensor({2, 3, 4}, rng)});
    add("slice", [](Tape&, V v) { return ad::slice(v[0], 1, 1, 3); }, {random_tensor({2, 4, 3}, rng)});
    add("concat", [](Tape&, V v) { return ad::concat({v[0], v[1]}, 1); },
        {random_tensor({2, 2, 3}, rng), random_tensor({2, 3, 3}, rng)});
    add("sum", [](Tape&, V v) { return ad::sum(v[0]); }, {random_tensor({3, 4}, rng)});
    add("mean", [](Tape&, V v) { return ad::mean(v[0]); }, {random_tensor({3, 4}, rng)});
    add("max", [](Tape&, V v) { return ad::max(v[0]); }, {distinct({3, 4}, rng)});
    add("sum_axis", [](Tape&, V v) { return ad::sum_axis(v[0], 1); }, {random_tensor({2, 3, 4}, rng)});
    add("max_axis", [](Tape&, V v) { return ad::max_axis(v[0], 2, true); }, {distinct({2, 3, 4}, rng)});
    add("cumsum", [](Tape&, V v) { return ad::cumsum(v[0], 1); }, {random_tensor({2, 5, 3}, rng)});
    add("matmul", [](Tape&, V v) { return ad::matmul(v[0], v[1]); },
        {random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)});
    add("conv1d_same", [](Tape&, V v) { return ad::conv1d_same(v[0], v[1], v[2]); },
        {random_tensor({2, 3, 7}, rng), random_tensor({4, 3, 5}, rng), random_tensor({4}, rng)});
    add("batchnorm_train", [](Tape&, V v) { return ad::batchnorm_train(v[0], v[1], v[2], 1e-5); },
        {random_tensor({3, 2, 5}, rng), random_tensor({2}, rng, 0.5, 1.5), random_tensor({2}, rng)});
    {
        const Tensor mean = random_tensor({2}, rng), var = random_tensor({2}, rng, 0.5, 2.0);
        add("batchnorm_eval",
            [mean, var](Tape&, V v) { return ad::batchnorm_eval(v[0], v[1], v[2], mean, var, 1e-5); },
            {random_tensor({3, 2, 5}, rng), random_tensor({2}, rng, 0.5, 1.5), random_tensor({2}, rng)});
    }
    {
        // Positive frames and a strictly positive warp support keep the winner away from ties.
        Tensor x = distinct({1, 3, 6}, rng);
        for (double& v : x.data()) v += 2.0;
        const std::vector<double> s{0.6, 0.6, 0.8, 0.7, 0.5, 0.8};
        Tensor w = warp::normalize_warp_naive(warp::build_warp_eq5(s, 4)).weights.reshaped({1, 4, 6});
        add("warp_max", [](Tape&, V v) { return ad::warp_max(v[0], v[1]); }, {x, w});
    }
    return out;
}

/// d(L_guide + L_bce)/d(phi) against central differences on a small random batch of
/// F x T spectrograms, with a reduced importance network and classifier.
inline CheckResult run_end_to_end_check(std::size_t F = 8, std::size_t T = 32, std::uint64_t seed = 1,
                                        double delta = 0.5) {
    if (F < 2 || T < 4) throw ConfigError("end-to-end check needs F >= 2 and T >= 4");
    std::mt19937_64 rng(seed);
    harness::ModelConfig mc;
    mc.variant = harness::Variant::DiffRes;
    mc.n_mels = F;
    mc.n_classes = 3;
    mc.diffres.delta = delta;
    mc.importance_channels = {{F, 4}, {4, 2}, {2, 1}};
    mc.classifier_hidden = 4;
    harness::Model model(mc, seed);

    const std::size_t B = 2;
    const Tensor x = detail::random_tensor({B, F, T}, rng, -2.0, 2.0);
    Tensor targets({B, mc.n_classes});
    targets.at(0, 0) = 1.0;
    targets.at(1, 2) = 1.0;
    std::vector<std::vector<double>> energy(B, std::vector<double>(T));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& row : energy)
        for (double& e : row) e = u(rng) < 0.4 ? 1e-6 : 0.5;

    const losses::LossConfig lc = mc.diffres.loss_config();
    auto loss = [&](Tape& tape) {
        harness::ModelOutput out = model.forward(tape, tape.constant(x), nn::Mode::Train);
        return losses::total_loss(losses::bce_loss(out.probs, targets), losses::guide_loss(out.diffres->scores, energy, lc));
    };
    nn::ParamList phi;
    model.diffres()->collect(phi);
    GradCheckReport rep = grad_check_params(loss, phi, 1e-6);
    return {"end_to_end", rep.max_rel_error, kEndToEndTolerance, rep.coordinates};
}

}  // namespace adares::checks
