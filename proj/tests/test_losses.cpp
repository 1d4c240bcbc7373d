#include <gtest/gtest.h>

#include <random>

#include "adares/losses.hpp"

using namespace adares;

TEST(GuideLoss, HandExample) {
    // one empty frame at s = 0.5, delta 0.5, lambda 0.5: max(1 - 0.5, 0)
    const std::vector<double> s{0.5, 0.9}, e{0.0, 1.0};
    EXPECT_DOUBLE_EQ(losses::guide_loss(s, e, {}), 0.5);
}

TEST(GuideLoss, LowScoresOnEmptyFramesCostNothing) {
    const std::vector<double> s{0.2, 0.1, 0.9}, e{0.0, 0.0, 1.0};
    EXPECT_EQ(losses::guide_loss(s, e, {}), 0.0);
}

TEST(GuideLoss, NoEmptyFramesGivesZero) {
    const std::vector<double> s{1.0, 1.0}, e{0.5, 0.5};
    EXPECT_EQ(losses::guide_loss(s, e, {}), 0.0);
}

TEST(GuideLoss, AveragesOverEmptyFramesOnly) {
    const std::vector<double> s{1.0, 0.5, 0.75, 1.0}, e{0.0, 0.0, 0.0, 1.0};
    // hinge terms 1.5, 0.5, 1.0
    EXPECT_DOUBLE_EQ(losses::guide_loss(s, e, {}), 1.0);
}

TEST(GuideLoss, Validation) {
    const std::vector<double> s{0.5}, e{0.0};
    losses::LossConfig cfg;
    cfg.delta = 0.0;
    EXPECT_THROW(losses::guide_loss(s, e, cfg), ConfigError);
    cfg = {};
    cfg.lambda = 1.5;
    EXPECT_THROW(losses::guide_loss(s, e, cfg), ConfigError);
    EXPECT_THROW(losses::guide_loss(s, std::vector<double>{0.0, 0.0}, {}), ShapeError);
}

TEST(GuideLoss, BatchedMatchesPerClipMean) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t B = 4, T = 15;
    Tensor s({B, T});
    std::vector<std::vector<double>> e(B, std::vector<double>(T));
    for (double& v : s.data()) v = u(rng);
    for (auto& row : e)
        for (double& v : row) v = u(rng) < 0.5 ? 0.0 : 1.0;
    e[2].assign(T, 1.0);  // a clip without empty frames contributes zero
    Tape tape(false);
    const double batched = losses::guide_loss(tape.constant(s), e, {}).value().item();
    double expected = 0;
    for (std::size_t b = 0; b < B; ++b)
        expected += losses::guide_loss(std::span<const double>(s.ptr() + b * T, T), e[b], {});
    EXPECT_NEAR(batched, expected / B, 1e-14);
}

TEST(GuideLoss, GradientIgnoresActiveFrames) {
    Tape tape;
    Var s = tape.variable(Tensor::matrix({{0.9, 0.9, 0.1}}));
    tape.backward(losses::guide_loss(s, {{0.0, 1.0, 0.0}}, {}));
    const Tensor& g = s.grad();
    EXPECT_DOUBLE_EQ(g.at(0, 0), 1.0 / 0.5 / 2.0);  // active hinge, two empty frames
    EXPECT_EQ(g.at(0, 1), 0.0);                   // active frame
    EXPECT_EQ(g.at(0, 2), 0.0);                   // hinge off
}

TEST(GuideLoss, IncreasesWithEmptyFrameScores) {
    const std::vector<double> e{0.0, 0.0, 1.0};
    double prev = -1;
    for (double v = 0.0; v <= 1.0; v += 0.05) {
        const double l = losses::guide_loss(std::vector<double>{v, 0.3, 0.5}, e, {});
        EXPECT_GE(l, prev);
        prev = l;
    }
}

TEST(Bce, Examples) {
    EXPECT_NEAR(losses::bce_loss(std::vector<double>{1.0, 0.0}, std::vector<double>{1.0, 0.0}), 0.0, 1e-6);
    EXPECT_NEAR(losses::bce_loss(std::vector<double>{0.5}, std::vector<double>{1.0}), std::log(2.0), 1e-15);
    EXPECT_NEAR(losses::bce_loss(std::vector<double>{0.5, 0.5}, std::vector<double>{0.0, 1.0}), std::log(2.0), 1e-15);
    // clamped, so a confident miss stays finite
    EXPECT_NEAR(losses::bce_loss(std::vector<double>{0.0}, std::vector<double>{1.0}), -std::log(1e-7), 1e-9);
}

TEST(Bce, TapeMatchesPlain) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    Tensor p({3, 4}), y({3, 4});
    for (double& v : p.data()) v = u(rng);
    for (double& v : y.data()) v = u(rng) < 0.5 ? 0.0 : 1.0;
    Tape tape;
    Var pv = tape.variable(p);
    Var loss = losses::bce_loss(pv, y);
    EXPECT_NEAR(loss.value().item(), losses::bce_loss(p.data(), y.data()), 1e-14);
    tape.backward(loss);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double expected = (p[i] - y[i]) / (p[i] * (1 - p[i])) / 12.0;
        EXPECT_NEAR(pv.grad()[i], expected, 1e-12);
    }
}

TEST(TotalLoss, SumsTerms) {
    EXPECT_DOUBLE_EQ(losses::total_loss(0.7, 0.3), 1.0);
    EXPECT_THROW(losses::total_loss(std::nan(""), 0.3), NumericError);
    EXPECT_THROW(losses::total_loss(0.1, INFINITY), NumericError);
}
