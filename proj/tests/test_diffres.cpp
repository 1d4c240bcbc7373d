#include <gtest/gtest.h>

#include <random>

#include "adares/diffres.hpp"

using namespace adares;

namespace {

Tensor randn(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> d;
    for (double& v : t.data()) v = scale * d(rng);
    return t;
}

// ---- plain-loop reference of the layer in eval mode ----

using Mat = std::vector<std::vector<double>>;  // [C][T]

Mat conv(const Mat& x, const nn::Conv1d& c) {
    const Tensor& w = c.weight.value;
    const std::size_t O = w.dim(0), I = w.dim(1), K = w.dim(2), T = x[0].size();
    Mat y(O, std::vector<double>(T));
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t tau = 0; tau < T; ++tau) {
            double acc = c.bias.value[o];
            for (std::size_t i = 0; i < I; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    const long src = static_cast<long>(tau + k) - static_cast<long>(K / 2);
                    if (src >= 0 && src < static_cast<long>(T)) acc += w.at(o, i, k) * x[i][src];
                }
            y[o][tau] = acc;
        }
    return y;
}

Mat bn_eval(Mat x, const nn::BatchNorm1d& bn) {
    for (std::size_t c = 0; c < x.size(); ++c)
        for (double& v : x[c])
            v = bn.gamma.value[c] * (v - bn.running_mean[c]) / std::sqrt(bn.running_var[c] + 1e-5) + bn.beta.value[c];
    return x;
}

double leaky(double v) { return v > 0 ? v : 0.01 * v; }

Mat block(const Mat& x, const nn::ResConv1DBlock& b, bool act) {
    Mat h = bn_eval(conv(x, b.conv1), b.bn1);
    for (auto& row : h)
        for (double& v : row) v = leaky(v);
    Mat y = bn_eval(conv(h, b.conv2), b.bn2);
    for (std::size_t c = 0; c < y.size(); ++c)
        for (std::size_t tau = 0; tau < y[c].size(); ++tau) {
            y[c][tau] += h[c][tau];
            if (act) y[c][tau] = leaky(y[c][tau]);
        }
    return y;
}

struct Reference {
    std::vector<double> s;
    Mat W;  // [t][T]
    Mat mean, max, res;
};

Reference reference(const Tensor& x2d, FrameImportanceNet& net, std::size_t t) {
    const std::size_t F = x2d.dim(0), T = x2d.dim(1);
    Mat h(F, std::vector<double>(T));
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t tau = 0; tau < T; ++tau) h[f][tau] = x2d.at(f, tau);
    auto& blocks = net.blocks();
    for (std::size_t k = 0; k < blocks.size(); ++k) h = block(h, blocks[k], k + 1 < blocks.size());

    Reference r;
    std::vector<double> raw(T);
    double total = 0;
    for (std::size_t tau = 0; tau < T; ++tau) total += raw[tau] = 1.0 / (1.0 + std::exp(-h[0][tau]));
    r.s.resize(T);
    for (std::size_t tau = 0; tau < T; ++tau) r.s[tau] = std::min(raw[tau] * t / total, 1.0);

    // route by running sum, then top up each row from the next column
    r.W.assign(t, std::vector<double>(T, 0.0));
    double c = 0;
    for (std::size_t tau = 0; tau < T; ++tau) {
        c += r.s[tau];
        const std::size_t row = std::min<std::size_t>(static_cast<std::size_t>(std::ceil(c - 1e-12)) - 1, t - 1);
        r.W[row][tau] = r.s[tau];
    }
    std::size_t j = 0;
    for (std::size_t i = 0; i + 1 < t; ++i) {
        double acc = 0;
        while (j < T && r.W[i][j] > 0) acc += r.W[i][j++];
        if (j == T) break;
        r.W[i][j] = 1.0 - acc;
        r.W[i + 1][j] -= r.W[i][j];
    }

    r.mean.assign(F, std::vector<double>(t, 0.0));
    r.max.assign(F, std::vector<double>(t, 0.0));
    r.res.assign(F, std::vector<double>(t, 0.0));
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < t; ++i) {
            double best = -1e300;
            for (std::size_t tau = 0; tau < T; ++tau) {
                const double w = r.W[i][tau];
                r.mean[f][i] += w * x2d.at(f, tau);
                const double angle = tau * std::pow(10000.0, -static_cast<double>(f - f % 2) / F);
                r.res[f][i] += w * (f % 2 ? std::cos(angle) : std::sin(angle));
                if (w > 0) best = std::max(best, w * x2d.at(f, tau));
            }
            r.max[f][i] = best;
        }
    return r;
}

}  // namespace

TEST(ImportanceNet, DefaultParameterCount) {
    std::mt19937_64 rng(1);
    FrameImportanceNet net(rng);
    EXPECT_EQ(net.parameter_count(), 82371u);
}

TEST(ImportanceNet, BlockCountFormula) {
    for (auto [in, out] : {std::pair<std::size_t, std::size_t>{128, 64}, {64, 32}, {8, 1}, {3, 7}}) {
        std::mt19937_64 rng(2);
        nn::ResConv1DBlock b("b", in, out, 5, rng);
        nn::ParamList p;
        b.collect(p);
        EXPECT_EQ(nn::count_parameters(p), 5 * in * out + 5 * out * out + 6 * out);
        EXPECT_EQ(nn::ResConv1DBlock::parameter_count(in, out, 5), nn::count_parameters(p));
    }
}

TEST(ImportanceNet, ChannelsMustChainToOne) {
    std::mt19937_64 rng(3);
    EXPECT_THROW(FrameImportanceNet(rng, {{8, 4}, {3, 1}}), ConfigError);
    EXPECT_THROW(FrameImportanceNet(rng, {{8, 4}}), ConfigError);
}

TEST(ImportanceNet, ZeroedLastBlockGivesHalf) {
    std::mt19937_64 rng(4);
    FrameImportanceNet net(rng, {{16, 8}, {8, 1}});
    auto& last = net.blocks().back();
    for (Parameter* p : {&last.conv1.weight, &last.conv1.bias, &last.conv2.weight, &last.conv2.bias})
        for (double& v : p->value.data()) v = 0.0;
    Tape tape(false);
    for (nn::Mode mode : {nn::Mode::Eval, nn::Mode::Train}) {
        const Tensor s = net.forward(tape, tape.constant(randn({2, 16, 20}, rng)), mode).value();
        for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.5);
    }
}

TEST(DiffResLayer, MatchesPlainLoopReference) {
    std::mt19937_64 rng(5);
    DiffResConfig cfg;
    cfg.delta = 0.6;
    DiffResLayer layer(rng, cfg, {{12, 6}, {6, 3}, {3, 1}});
    // non-trivial running statistics
    for (auto& b : layer.net().blocks())
        for (nn::BatchNorm1d* bn : {&b.bn1, &b.bn2})
            for (std::size_t c = 0; c < bn->running_mean.size(); ++c) {
                bn->running_mean[c] = 0.1 * static_cast<double>(c);
                bn->running_var[c] = 0.5 + 0.25 * static_cast<double>(c);
            }

    const std::size_t B = 3, F = 12, T = 30;
    const Tensor x = randn({B, F, T}, rng, 2.0);
    Tape tape(false);
    const DiffResOutput out = layer.forward(tape, tape.constant(x), nn::Mode::Eval);
    const std::size_t t = out.output_frames;
    ASSERT_EQ(t, 12u);
    ASSERT_EQ(out.features.shape(), (Shape{B, 3 * F, t}));

    for (std::size_t b = 0; b < B; ++b) {
        Tensor xb({F, T});
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t tau = 0; tau < T; ++tau) xb.at(f, tau) = x.at(b, f, tau);
        const Reference r = reference(xb, layer.net(), t);
        for (std::size_t tau = 0; tau < T; ++tau) EXPECT_NEAR(out.scores.value().at(b, tau), r.s[tau], 1e-9);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t tau = 0; tau < T; ++tau) EXPECT_NEAR(out.warp.value().at(b, i, tau), r.W[i][tau], 1e-9);
        const Tensor& feat = out.features.value();
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t i = 0; i < t; ++i) {
                EXPECT_NEAR(feat.at(b, f, i), r.mean[f][i], 1e-9);
                EXPECT_NEAR(feat.at(b, F + f, i), r.max[f][i], 1e-9);
                EXPECT_NEAR(feat.at(b, 2 * F + f, i), r.res[f][i], 1e-9);
            }
    }
}

TEST(DiffResLayer, OutputLengthFollowsReductionRate) {
    for (double delta : {0.0, 0.25, 0.5, 0.75, 0.9}) {
        std::mt19937_64 rng(6);
        DiffResConfig cfg;
        cfg.delta = delta;
        DiffResLayer layer(rng, cfg, {{6, 2}, {2, 1}});
        Tape tape(false);
        const auto out = layer.forward(tape, tape.constant(randn({2, 6, 100}, rng)), nn::Mode::Eval);
        EXPECT_EQ(out.output_frames, static_cast<std::size_t>(std::llround((1 - delta) * 100)));
        EXPECT_EQ(out.features.dim(2), out.output_frames);
    }
}

TEST(DiffResLayer, ZeroReductionIsIdentity) {
    std::mt19937_64 rng(7);
    DiffResConfig cfg;
    cfg.delta = 0.0;
    DiffResLayer layer(rng, cfg, {{5, 2}, {2, 1}});
    auto& last = layer.net().blocks().back();  // uniform raw scores
    for (Parameter* p : {&last.conv1.weight, &last.conv1.bias, &last.conv2.weight, &last.conv2.bias})
        for (double& v : p->value.data()) v = 0.0;
    const Tensor x = randn({2, 5, 17}, rng);
    Tape tape(false);
    const auto out = layer.forward(tape, tape.constant(x), nn::Mode::Eval);
    ASSERT_EQ(out.output_frames, 17u);
    for (double v : out.scores.value().data()) EXPECT_DOUBLE_EQ(v, 1.0);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 17; ++i)
            for (std::size_t j = 0; j < 17; ++j) EXPECT_NEAR(out.warp.value().at(b, i, j), i == j ? 1.0 : 0.0, 1e-12);
    EXPECT_LE(max_abs_diff(out.mean.value(), x), 1e-12);
    EXPECT_LE(max_abs_diff(out.max.value(), x), 1e-12);
}

TEST(DiffResLayer, ChannelSelection) {
    std::mt19937_64 rng(8);
    DiffResConfig cfg;
    cfg.use_max = false;
    DiffResLayer layer(rng, cfg, {{4, 1}});
    Tape tape(false);
    const auto out = layer.forward(tape, tape.constant(randn({1, 4, 10}, rng)), nn::Mode::Eval);
    EXPECT_EQ(out.features.shape(), (Shape{1, 8, 5}));
    EXPECT_EQ(max_abs_diff(ad::slice(out.features, 1, 0, 4).value(), out.mean.value()), 0.0);
    EXPECT_EQ(max_abs_diff(ad::slice(out.features, 1, 4, 8).value(), out.resolution.value()), 0.0);

    cfg.use_mean = cfg.emit_resolution_encoding = false;
    EXPECT_THROW(DiffResLayer(rng, cfg, {{4, 1}}), ConfigError);
}

TEST(DiffResLayer, RejectsWrongChannelCount) {
    std::mt19937_64 rng(9);
    DiffResLayer layer(rng, {}, {{4, 1}});
    Tape tape(false);
    EXPECT_THROW(layer.forward(tape, tape.constant(Tensor({1, 5, 10})), nn::Mode::Eval), ShapeError);
}

TEST(DiffResForward, SingleSpectrogramDiagnostics) {
    std::mt19937_64 rng(10);
    DiffResConfig cfg;
    cfg.delta = 0.75;
    DiffResLayer layer(rng, cfg, {{8, 2}, {2, 1}});
    dsp::Spectrogram sp;
    sp.F = 8;
    sp.T = 40;
    sp.values = randn({8, 40}, rng);
    sp.linear_values = Tensor({8, 40});
    for (std::size_t tau = 20; tau < 40; ++tau)
        for (std::size_t f = 0; f < 8; ++f) sp.linear_values.at(f, tau) = 1.0;
    const WarpedFeature wf = diffres_forward(sp, layer);
    EXPECT_EQ(wf.mean_channel.shape(), (Shape{8, 10}));
    EXPECT_EQ(wf.assignment.size(), 40u);
    EXPECT_EQ(wf.assignment.front(), 0u);
    EXPECT_EQ(wf.assignment.back(), 9u);
    for (double r : row_sums(wf.warp.weights)) EXPECT_NEAR(r, 1.0, 1e-9);
    EXPECT_DOUBLE_EQ(wf.rho, warp::activeness(wf.scores, wf.energy, 0.75, 1e-4));
    EXPECT_DOUBLE_EQ(wf.guide_loss, losses::guide_loss(wf.scores, wf.energy, cfg.loss_config()));
}
