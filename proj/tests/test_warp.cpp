#include <gtest/gtest.h>

#include <random>

#include "adares/warp.hpp"
#include "random_scores.hpp"

using namespace adares;

namespace {

Tensor mat(std::initializer_list<std::initializer_list<double>> rows) { return Tensor::matrix(rows); }

void expect_near(const Tensor& a, const Tensor& b, double tol) {
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_LE(max_abs_diff(a, b), tol);
}

warp::WarpMatrix normalized_from(const std::vector<double>& s, std::size_t t) {
    return warp::normalize_warp_naive(warp::build_warp_eq5(s, t));
}

}  // namespace

// Forward-mode dual number: used to differentiate the sequential sweep independently of the tape.
namespace dual {
struct Dual {
    double v = 0.0, d = 0.0;
    Dual() = default;
    Dual(double value, double deriv = 0.0) : v(value), d(deriv) {}
};
inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline double value_of(const Dual& x) { return x.v; }
}  // namespace dual

TEST(OutputFrames, RoundsAndClamps) {
    EXPECT_EQ(warp::output_frames(100, 0.75), 25u);
    EXPECT_EQ(warp::output_frames(100, 0.5), 50u);
    EXPECT_EQ(warp::output_frames(100, 0.0), 100u);
    EXPECT_EQ(warp::output_frames(3, 0.99), 1u);
    EXPECT_THROW(warp::output_frames(10, 1.0), ConfigError);
    EXPECT_THROW(warp::output_frames(10, -0.1), ConfigError);
}

TEST(Rescale, UniformScoresSplitEvenly) {
    const auto s = warp::rescale(std::vector<double>{1, 1, 1, 1}, 2);
    for (double v : s) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Rescale, ClipsLargeScores) {
    const auto s = warp::rescale(std::vector<double>{0.8, 0.1, 0.1}, 2);
    EXPECT_DOUBLE_EQ(s[0], 1.0);
    EXPECT_DOUBLE_EQ(s[1], 0.2);
    EXPECT_DOUBLE_EQ(s[2], 0.2);
}

TEST(Rescale, FullLengthGivesOnes) {
    for (double v : warp::rescale(std::vector<double>(7, 0.3), 7)) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Rescale, RejectsAllZero) {
    EXPECT_THROW(warp::rescale(std::vector<double>{0, 0, 0}, 2), ConfigError);
}

TEST(Rescale, TapeVersionMatchesPlain) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    Tensor raw({3, 20});
    for (double& v : raw.data()) v = u(rng);
    Tape tape(false);
    const Tensor s = warp::rescale(tape.constant(raw), 8).value();
    for (std::size_t b = 0; b < 3; ++b) {
        const auto plain = warp::rescale(std::span<const double>(raw.ptr() + b * 20, 20), 8);
        for (std::size_t j = 0; j < 20; ++j) EXPECT_NEAR(s.at(b, j), plain[j], 1e-15);
    }
}

TEST(BuildWarp, HalfScores) {
    const auto w = warp::build_warp_eq5(std::vector<double>{0.5, 0.5, 0.5, 0.5}, 2);
    EXPECT_EQ(w.weights, mat({{0.5, 0.5, 0, 0}, {0, 0, 0.5, 0.5}}));
    EXPECT_EQ(w.provenance, warp::Provenance::Eq5Raw);
}

TEST(BuildWarp, WorkedExample) {
    const auto w = warp::build_warp_eq5(std::vector<double>{0.6, 0.6, 0.8}, 2);
    expect_near(w.weights, mat({{0.6, 0, 0}, {0, 0.6, 0.8}}), 1e-12);
}

TEST(BuildWarp, OnesGiveIdentity) {
    const auto w = warp::build_warp_eq5(std::vector<double>(5, 1.0), 5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(w.weights.at(i, j), i == j ? 1.0 : 0.0);
}

TEST(BuildWarp, ExcessImportanceIsRejected) {
    EXPECT_THROW(warp::build_warp_eq5(std::vector<double>{0.9, 0.9, 0.9}, 2), ConfigError);
    EXPECT_THROW(warp::build_warp_eq5(std::vector<double>{1.5, 0.1}, 2), ConfigError);
}

TEST(BuildWarp, OneNonzeroRowPerColumn) {
    std::mt19937_64 rng(3);
    for (int k = 0; k < 200; ++k) {
        const auto c = testutil::water_filled(rng);
        const auto w = warp::build_warp_eq5(c.s, c.t);
        for (std::size_t j = 0; j < c.s.size(); ++j) {
            int nz = 0;
            for (std::size_t i = 0; i < c.t; ++i) nz += w.weights.at(i, j) != 0.0;
            EXPECT_EQ(nz, 1);
        }
    }
}

TEST(Normalize, WorkedExampleBothForms) {
    const auto w0 = warp::build_warp_eq5(std::vector<double>{0.6, 0.6, 0.8}, 2);
    const Tensor expected = mat({{0.6, 0.4, 0}, {0, 0.2, 0.8}});
    const auto naive = warp::normalize_warp_naive(w0);
    const auto vec = warp::normalize_warp_vectorized(w0);
    expect_near(naive.weights, expected, 1e-12);
    expect_near(vec.weights, expected, 1e-12);
    EXPECT_EQ(naive.provenance, warp::Provenance::Normalized);
}

TEST(Normalize, RowStochasticInputUnchanged) {
    const auto w0 = warp::build_warp_eq5(std::vector<double>{0.5, 0.5, 0.5, 0.5}, 2);
    EXPECT_EQ(warp::normalize_warp_naive(w0).weights, w0.weights);
    expect_near(warp::normalize_warp_vectorized(w0).weights, w0.weights, 1e-15);
}

TEST(Normalize, IdentityUnchanged) {
    const auto w0 = warp::build_warp_eq5(std::vector<double>(6, 1.0), 6);
    EXPECT_EQ(warp::normalize_warp_naive(w0).weights, w0.weights);
    EXPECT_EQ(warp::normalize_warp_vectorized(w0).weights, w0.weights);
}

TEST(Normalize, RandomCasesAgreeAndConserve) {
    std::mt19937_64 rng(4);
    for (int k = 0; k < 1000; ++k) {
        const auto c = testutil::water_filled(rng);
        const auto w0 = warp::build_warp_eq5(c.s, c.t);
        const auto naive = warp::normalize_warp_naive(w0);
        const auto vec = warp::normalize_warp_vectorized(w0);
        ASSERT_LE(max_abs_diff(naive.weights, vec.weights), 1e-12) << "case " << k;
        for (double r : row_sums(naive.weights)) ASSERT_NEAR(r, 1.0, 1e-9);
        const auto cols = col_sums(naive.weights);
        for (std::size_t j = 0; j < c.s.size(); ++j) ASSERT_NEAR(cols[j], c.s[j], 1e-9);
        for (std::size_t j = 0; j < c.s.size(); ++j) {
            int nz = 0;
            for (std::size_t i = 0; i < c.t; ++i) {
                ASSERT_GE(naive.weights.at(i, j), -1e-12);
                nz += naive.weights.at(i, j) > 1e-15;
            }
            ASSERT_LE(nz, 2);
        }
    }
}

TEST(Normalize, ShortfallLeavesTailRowsLight) {
    // Clipped rescale can leave sum(s) < t; rows then read 1, ..., 1, partial, 0, ...
    const auto s = warp::rescale(std::vector<double>{0.8, 0.1, 0.1}, 2);  // [1, 0.2, 0.2]
    const auto w0 = warp::build_warp_eq5(s, 2);
    const auto naive = warp::normalize_warp_naive(w0);
    const auto vec = warp::normalize_warp_vectorized(w0);
    expect_near(naive.weights, vec.weights, 1e-12);
    const auto rows = row_sums(naive.weights);
    EXPECT_NEAR(rows[0], 1.0, 1e-12);
    EXPECT_NEAR(rows[1], 0.4, 1e-12);
    EXPECT_TRUE(warp::has_normalized_rows(rows));
    EXPECT_FALSE(warp::has_normalized_rows(std::vector<double>{0.5, 1.0}));
}

TEST(Normalize, ZeroImportanceColumnIsRejected) {
    warp::WarpMatrix w0{mat({{0.5, 0, 0.5}, {0, 0, 0}}), warp::Provenance::Eq5Raw};
    EXPECT_THROW(warp::normalize_warp_naive(w0), ConfigError);
    EXPECT_THROW(warp::normalize_warp_vectorized(w0), ConfigError);
}

TEST(Normalize, NegativeWeightIsRejected) {
    warp::WarpMatrix w0{mat({{0.3, 0}, {0, 0.1}}), warp::Provenance::Eq5Raw};
    EXPECT_THROW(warp::normalize_warp_naive(w0), ConfigError);
    EXPECT_THROW(warp::normalize_warp_vectorized(w0), ConfigError);
}

TEST(Normalize, GradientsOfBothFormsAgree) {
    // d(sum R * W)/ds through the tape (vectorised) against forward-mode duals through the sweep.
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto c = testutil::water_filled(rng, 24);
        const std::size_t T = c.s.size(), t = c.t;
        Tensor R({t, T});
        std::normal_distribution<double> n;
        for (double& v : R.data()) v = n(rng);

        Tape tape;
        Var s = tape.variable(Tensor({1, T}, c.s));
        Var w = warp::normalize_warp_vectorized(warp::build_warp_eq5(s, t));
        tape.backward(ad::sum(w * tape.constant(R.reshaped({1, t, T}))));
        const Tensor g = s.grad();

        for (std::size_t k = 0; k < T; ++k) {
            std::vector<dual::Dual> sd(T);
            for (std::size_t j = 0; j < T; ++j) sd[j] = dual::Dual(c.s[j], j == k ? 1.0 : 0.0);
            auto grid = warp::normalize_warp_naive(warp::build_warp_eq5<dual::Dual>(sd, t));
            double dk = 0;
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < T; ++j) dk += R.at(i, j) * grid.at(i, j).d;
            ASSERT_NEAR(g[k], dk, 1e-10) << "trial " << trial << " coordinate " << k;
        }
    }
}

TEST(Routing, BoundaryGoesToLowerRow) {
    const auto rows = warp::route_frames<double>(std::vector<double>{0.5, 0.5, 1.0}, 2);
    EXPECT_EQ(rows, (std::vector<std::size_t>{0, 0, 1}));
}

TEST(WarpFrames, HandExample) {
    const Tensor x = mat({{1, 3}, {2, 0}});
    const warp::WarpMatrix w{mat({{0.5, 0.5}}), warp::Provenance::Normalized};
    const Tensor mean = warp::warp_frames(x, w, warp::Aggregation::Mean);
    const Tensor mx = warp::warp_frames(x, w, warp::Aggregation::Max);
    EXPECT_DOUBLE_EQ(mean.at(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(mean.at(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(mx.at(0, 0), 1.5);
    EXPECT_DOUBLE_EQ(mx.at(1, 0), 1.0);
}

TEST(WarpFrames, IdentityAndConstant) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n;
    Tensor x({5, 7});
    for (double& v : x.data()) v = n(rng);
    const auto eye = normalized_from(std::vector<double>(7, 1.0), 7);
    EXPECT_EQ(warp::warp_frames(x, eye, warp::Aggregation::Mean), x);

    const Tensor c({5, 7}, 3.25);
    // dyadic scores keep every running sum exact
    const auto w = normalized_from(std::vector<double>{0.5, 0.5, 0.75, 0.25, 0.5, 0.5, 1.0}, 4);
    const Tensor o = warp::warp_frames(c, w, warp::Aggregation::Mean);
    for (double v : o.data()) EXPECT_NEAR(v, 3.25, 1e-12);
}

TEST(WarpFrames, MeanRejectsRawMatrix) {
    const auto w0 = warp::build_warp_eq5(std::vector<double>{0.6, 0.6, 0.8}, 2);
    EXPECT_THROW(warp::warp_frames(Tensor({2, 3}, 1.0), w0, warp::Aggregation::Mean), ConfigError);
    EXPECT_NO_THROW(warp::warp_frames(Tensor({2, 3}, 1.0), w0, warp::Aggregation::Max));
}

TEST(WarpFrames, MeanStaysWithinRowRange) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n;
    for (int k = 0; k < 100; ++k) {
        const auto c = testutil::water_filled(rng, 40);
        Tensor x({6, c.s.size()});
        for (double& v : x.data()) v = n(rng);
        const Tensor o = warp::warp_frames(x, normalized_from(c.s, c.t), warp::Aggregation::Mean);
        for (std::size_t f = 0; f < 6; ++f) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t j = 0; j < c.s.size(); ++j) lo = std::min(lo, x.at(f, j)), hi = std::max(hi, x.at(f, j));
            for (std::size_t i = 0; i < c.t; ++i) {
                EXPECT_GE(o.at(f, i), lo - 1e-12);
                EXPECT_LE(o.at(f, i), hi + 1e-12);
            }
        }
    }
}

TEST(WarpFrames, MaxMatchesSupportScan) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    const auto c = testutil::water_filled(rng, 30);
    const auto w = normalized_from(c.s, c.t);
    Tensor x({4, c.s.size()});
    for (double& v : x.data()) v = n(rng);
    const Tensor o = warp::warp_frames(x, w, warp::Aggregation::Max);
    for (std::size_t f = 0; f < 4; ++f)
        for (std::size_t i = 0; i < c.t; ++i) {
            double best = -1e300;
            bool any = false;
            for (std::size_t j = 0; j < c.s.size(); ++j)
                if (w.weights.at(i, j) > 0) {
                    best = std::max(best, x.at(f, j) * w.weights.at(i, j));
                    any = true;
                }
            EXPECT_DOUBLE_EQ(o.at(f, i), any ? best : 0.0);
        }
}

TEST(ResolutionEncoding, FirstEntries) {
    const Tensor e = warp::positional_encoding(6, 4);
    EXPECT_EQ(e.at(0, 0), 0.0);
    EXPECT_EQ(e.at(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(e.at(0, 1), std::sin(1.0));
    EXPECT_DOUBLE_EQ(e.at(2, 3), std::sin(3.0 * std::pow(10000.0, -2.0 / 6.0)));
    EXPECT_DOUBLE_EQ(e.at(3, 3), std::cos(3.0 * std::pow(10000.0, -2.0 / 6.0)));
}

TEST(ResolutionEncoding, IdentityWarpGivesEncoding) {
    const auto eye = normalized_from(std::vector<double>(9, 1.0), 9);
    expect_near(warp::resolution_encoding(eye, 8), warp::positional_encoding(8, 9), 1e-15);
}

TEST(ResolutionEncoding, ColumnsAreWeightedSums) {
    std::mt19937_64 rng(9);
    const auto c = testutil::water_filled(rng, 30);
    const auto w = normalized_from(c.s, c.t);
    const std::size_t F = 10, T = c.s.size();
    const Tensor r = warp::resolution_encoding(w, F);
    for (std::size_t i = 0; i < c.t; ++i)
        for (std::size_t f = 0; f < F; ++f) {
            double acc = 0;
            for (std::size_t tau = 0; tau < T; ++tau) {
                const double angle = tau * std::pow(10000.0, -static_cast<double>(f - f % 2) / F);
                acc += w.weights.at(i, tau) * (f % 2 ? std::cos(angle) : std::sin(angle));
            }
            EXPECT_NEAR(r.at(f, i), acc, 1e-12);
        }
}

TEST(Activeness, Examples) {
    const std::vector<double> active{1.0, 1.0};
    EXPECT_EQ(warp::activeness(std::vector<double>{0.3, 0.3}, active, 0.5, 1e-4), 0.0);
    EXPECT_DOUBLE_EQ(warp::activeness(std::vector<double>{0.0, 1.0}, active, 0.5, 1e-4), 1.0);
    EXPECT_EQ(warp::activeness(std::vector<double>{0.2, 0.9}, std::vector<double>{0.0, 0.0}, 0.5, 1e-4), 0.0);
    EXPECT_EQ(warp::activeness(std::vector<double>{0.2, 0.9}, std::vector<double>{0.0, 1.0}, 0.5, 1e-4), 0.0);
    EXPECT_THROW(warp::activeness(std::vector<double>{0.2}, std::vector<double>{1.0}, 0.0, 1e-4), ConfigError);
}
