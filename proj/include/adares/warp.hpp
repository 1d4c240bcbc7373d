#pragma once

// Warp-matrix construction and frame warping.
//
// Importance scores s (length T, each in [0,1], total <= t) route every input frame j to
// output row ceil(cumsum(s)_j) - 1. The raw matrix holds s_j at that position. Normalisation
// then tops each row up to a total weight of 1 by moving weight down a column from the next
// row, so columns keep summing to s_j. Two implementations exist: a sequential in-place sweep
// and a vectorised form built from tape ops; they must agree.

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "adares/autodiff.hpp"

namespace adares::warp {

inline constexpr std::size_t kNoRow = std::numeric_limits<std::size_t>::max();

/// Output frame count for reduction rate delta: round((1 - delta) * T), at least 1.
inline std::size_t output_frames(std::size_t T, double delta) {
    if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("reduction rate must lie in [0, 1)");
    const auto t = static_cast<std::size_t>(std::llround((1.0 - delta) * static_cast<double>(T)));
    return std::clamp<std::size_t>(t, 1, T);
}

// ---- rescale ---------------------------------------------------------------

/// s_hat = raw * t / sum(raw); s = s_hat / max(s_hat, 1) elementwise.
inline std::vector<double> rescale(std::span<const double> raw, std::size_t t) {
    double total = 0.0;
    for (double v : raw) total += v;
    if (!(total > 0)) throw ConfigError("rescale needs scores with a positive sum");
    std::vector<double> s(raw.size());
    for (std::size_t k = 0; k < raw.size(); ++k) {
        const double hat = raw[k] * static_cast<double>(t) / total;
        s[k] = hat / std::max(hat, 1.0);
    }
    return s;
}

/// Batched rescale on the tape: raw [B, T] -> s [B, T].
inline Var rescale(const Var& raw, std::size_t t) {
    if (raw.shape().size() != 2) throw ShapeError("rescale expects [B, T] scores");
    for (double v : raw.value().data())
        if (v < 0) throw ConfigError("rescale needs nonnegative scores");
    Var total = ad::sum_axis(raw, 1, true);
    for (double v : total.value().data())
        if (!(v > 0)) throw ConfigError("rescale needs scores with a positive sum");
    Var hat = ad::mul_scalar(raw / total, static_cast<double>(t));
    return hat / ad::maximum(hat, 1.0);
}

// ---- raw warp matrix ---------------------------------------------------------

enum class Provenance { Eq5Raw, Normalized };

/// t x T warp weights; rows are output frames, columns input frames.
struct WarpMatrix {
    Tensor weights;
    Provenance provenance = Provenance::Eq5Raw;

    std::size_t rows() const { return weights.dim(0); }
    std::size_t cols() const { return weights.dim(1); }
};

inline double value_of(double x) { return x; }

/// Output row of every input frame (kNoRow while the running sum is still zero).
/// A cumulative sum landing exactly on an integer boundary belongs to the lower row.
template <typename Scalar>
std::vector<std::size_t> route_frames(std::span<const Scalar> s, std::size_t t) {
    if (t == 0) throw ConfigError("output frame count must be positive");
    const double tol = 1e-9 * std::max(1.0, static_cast<double>(t));
    std::vector<std::size_t> rows(s.size(), kNoRow);
    double c = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
        const double sj = value_of(s[j]);
        if (!(sj >= 0.0 && sj <= 1.0 + 1e-12)) throw ConfigError("importance scores must lie in [0, 1]");
        c += sj;
        if (c > static_cast<double>(t) + tol) {
            throw ConfigError("cumulative importance exceeds the output frame count");
        }
        if (c <= 0.0) continue;
        const auto r = static_cast<std::size_t>(std::ceil(c)) - 1;
        rows[j] = std::min(r, t - 1);
    }
    return rows;
}

/// Dense row-major t x T grid over an arbitrary scalar type.
template <typename Scalar>
struct Grid {
    std::size_t rows = 0, cols = 0;
    std::vector<Scalar> data;

    Grid(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, Scalar(0.0)) {}
    Scalar& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const Scalar& at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// W0[i, j] = s_j if i < cumsum(s)_j <= i + 1, else 0.
template <typename Scalar>
Grid<Scalar> build_warp_eq5(std::span<const Scalar> s, std::size_t t) {
    const auto rows = route_frames(s, t);
    Grid<Scalar> w(t, s.size());
    for (std::size_t j = 0; j < s.size(); ++j)
        if (rows[j] != kNoRow) w.at(rows[j], j) = s[j];
    return w;
}

inline WarpMatrix build_warp_eq5(std::span<const double> s, std::size_t t) {
    Grid<double> g = build_warp_eq5<double>(s, t);
    return WarpMatrix{Tensor({t, s.size()}, std::move(g.data)), Provenance::Eq5Raw};
}

inline constexpr double kNegativeWeightTolerance = 1e-12;

namespace detail {
template <typename Scalar>
void require_covered_columns(const Grid<Scalar>& w) {
    for (std::size_t j = 0; j < w.cols; ++j) {
        bool any = false;
        for (std::size_t i = 0; i < w.rows && !any; ++i) any = value_of(w.at(i, j)) > 0;
        if (!any) throw ConfigError("warp matrix has a zero-importance frame (column " + std::to_string(j) + ")");
    }
}
}  // namespace detail

/// Sequential in-place row top-up. Walks rows 0..t-2 and every column; on meeting the first
/// zero after a row's weights it assigns the shortfall there and takes it from the row below.
template <typename Scalar>
Grid<Scalar> normalize_warp_naive(Grid<Scalar> w) {
    detail::require_covered_columns(w);
    const std::size_t t = w.rows, T = w.cols;
    std::size_t i = 0, j = 0;
    Scalar acc(0.0);
    while (i + 1 < t && j < T) {
        if (value_of(w.at(i, j)) > 0) {
            acc = acc + w.at(i, j);
            ++j;
        } else {
            w.at(i, j) = Scalar(1.0) - acc;
            w.at(i + 1, j) = w.at(i + 1, j) - w.at(i, j);
            if (value_of(w.at(i, j)) < -kNegativeWeightTolerance || value_of(w.at(i + 1, j)) < -kNegativeWeightTolerance) {
                throw ConfigError("warp normalisation produced a negative weight; total importance exceeds t");
            }
            ++i;
            acc = Scalar(0.0);
        }
    }
    return w;
}

inline WarpMatrix normalize_warp_naive(const WarpMatrix& w0) {
    Grid<double> g(w0.rows(), w0.cols());
    g.data = w0.weights.storage();
    g = normalize_warp_naive(std::move(g));
    return WarpMatrix{Tensor({w0.rows(), w0.cols()}, std::move(g.data)), Provenance::Normalized};
}

// ---- tape versions -----------------------------------------------------------

/// One-hot routing masks [B, t, T] for a batch of score rows [B, T].
inline Tensor routing_mask(const Tensor& scores, std::size_t t) {
    const std::size_t B = scores.dim(0), T = scores.dim(1);
    Tensor mask({B, t, T});
    for (std::size_t b = 0; b < B; ++b) {
        const auto rows = route_frames<double>(std::span(scores.ptr() + b * T, T), t);
        for (std::size_t j = 0; j < T; ++j)
            if (rows[j] != kNoRow) mask.at(b, rows[j], j) = 1.0;
    }
    return mask;
}

/// Raw warp matrices [B, t, T] from scores [B, T]; differentiable in the scores,
/// with the row assignment held fixed.
inline Var build_warp_eq5(const Var& s, std::size_t t) {
    const std::size_t B = s.dim(0), T = s.dim(1);
    Var mask = s.tape()->constant(routing_mask(s.value(), t));
    return ad::reshape(s, {B, 1, T}) * mask;
}

/// Vectorised row top-up on [B, t, T] raw warp matrices:
///   P = cumsum over rows of (1 - row sums), broadcast across columns
///   M = sgn(W0);  Q = correlation of each row of M with [-1, 1], zero-padded in front
///   U = P * (-Q)+;  V = [0; P[0:t-1] * Q+[1:t]];  W = U - V + W0
inline Var normalize_warp_vectorized(const Var& w0) {
    if (w0.shape().size() != 3) throw ShapeError("normalize_warp_vectorized expects [B, t, T]");
    Tape& tape = *w0.tape();
    const std::size_t B = w0.dim(0), t = w0.dim(1), T = w0.dim(2);
    const Tensor& wv = w0.value();
    Tensor q_pos({B, t, T}), q_neg({B, t, T});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < T; ++j) {
            bool covered = false;
            for (std::size_t i = 0; i < t; ++i) covered = covered || wv.at(b, i, j) > 0;
            if (!covered) throw ConfigError("warp matrix has a zero-importance frame (column " + std::to_string(j) + ")");
        }
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 1; j < T; ++j) {
                const double q = (wv.at(b, i, j) > 0 ? 1.0 : 0.0) - (wv.at(b, i, j - 1) > 0 ? 1.0 : 0.0);
                q_pos.at(b, i, j) = std::max(q, 0.0);
                q_neg.at(b, i, j) = std::max(-q, 0.0);
            }
        }
    }
    Var deficit = ad::add_scalar(-ad::sum_axis(w0, 2), 1.0);        // [B, t]
    Var P = ad::reshape(ad::cumsum(deficit, 1), {B, t, 1});         // [B, t, 1]
    Var U = P * tape.constant(std::move(q_neg));
    Var shifted = t > 1 ? ad::concat({tape.constant(Tensor({B, 1, 1})), ad::slice(P, 1, 0, t - 1)}, 1)
                        : tape.constant(Tensor({B, 1, 1}));
    Var V = shifted * tape.constant(std::move(q_pos));
    Var w = U - V + w0;
    for (double v : w.value().data())
        if (v < -kNegativeWeightTolerance) {
            throw ConfigError("warp normalisation produced a negative weight; total importance exceeds t");
        }
    return w;
}

inline WarpMatrix normalize_warp_vectorized(const WarpMatrix& w0) {
    Tape tape(false);
    Var in = tape.constant(w0.weights.reshaped({1, w0.rows(), w0.cols()}));
    Var out = normalize_warp_vectorized(in);
    return WarpMatrix{out.value().reshaped({w0.rows(), w0.cols()}), Provenance::Normalized};
}

// ---- frame warping -----------------------------------------------------------

enum class Aggregation { Mean, Max };

inline constexpr double kRowSumTolerance = 1e-6;

/// Accepts row sums shaped [1, ..., 1, partial, 0, ..., 0]. The partial tail appears only when
/// the total importance is below t; a full-weight matrix must be exactly row-stochastic.
inline bool has_normalized_rows(std::span<const double> sums, double tol = kRowSumTolerance) {
    std::size_t i = 0;
    while (i < sums.size() && std::abs(sums[i] - 1.0) <= tol) ++i;
    if (i < sums.size() && sums[i] > -tol && sums[i] < 1.0 + tol) ++i;
    while (i < sums.size() && std::abs(sums[i]) <= tol) ++i;
    return i == sums.size();
}

namespace detail {
inline void require_mean_ready(const Tensor& w) {
    const std::size_t B = w.dim(0), t = w.dim(1), T = w.dim(2);
    std::vector<double> sums(t);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < t; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < T; ++j) acc += w.at(b, i, j);
            sums[i] = acc;
        }
        if (!has_normalized_rows(sums)) {
            throw ConfigError("mean aggregation needs a normalised warp matrix (rows summing to 1)");
        }
    }
}
}  // namespace detail

/// Warps x [B, F, T] with w [B, t, T] into [B, F, t].
inline Var warp_frames(const Var& x, const Var& w, Aggregation agg) {
    if (x.shape().size() != 3 || w.shape().size() != 3 || x.dim(0) != w.dim(0) || x.dim(2) != w.dim(2)) {
        throw ShapeError("warp_frames expects x [B,F,T] and w [B,t,T], got " + to_string(x.shape()) + " and " +
                         to_string(w.shape()));
    }
    if (agg == Aggregation::Max) return ad::warp_max(x, w);
    detail::require_mean_ready(w.value());
    return ad::matmul(x, ad::transpose(w));
}

inline Tensor warp_frames(const Tensor& x, const WarpMatrix& w, Aggregation agg) {
    if (x.rank() != 2 || w.weights.rank() != 2 || x.dim(1) != w.cols()) {
        throw ShapeError("warp_frames expects X [F,T] and W [t,T]");
    }
    if (agg == Aggregation::Mean && w.provenance == Provenance::Eq5Raw &&
        !has_normalized_rows(row_sums(w.weights))) {
        throw ConfigError("mean aggregation needs a normalised warp matrix (rows summing to 1)");
    }
    Tape tape(false);
    Var xv = tape.constant(x.reshaped({1, x.dim(0), x.dim(1)}));
    Var wv = tape.constant(w.weights.reshaped({1, w.rows(), w.cols()}));
    return warp_frames(xv, wv, agg).value().reshaped({x.dim(0), w.rows()});
}

// ---- resolution encoding -----------------------------------------------------

/// Sinusoidal positional encoding, F x T: sin on even rows, cos on odd rows, base 10000.
inline Tensor positional_encoding(std::size_t F, std::size_t T) {
    Tensor e({F, T});
    for (std::size_t f = 0; f < F; ++f) {
        const double pair = static_cast<double>(f - (f % 2));
        const double inv_wavelength = std::pow(10000.0, -pair / static_cast<double>(F));
        for (std::size_t tau = 0; tau < T; ++tau) {
            const double angle = static_cast<double>(tau) * inv_wavelength;
            e.at(f, tau) = (f % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return e;
}

/// E W^T for w [B, t, T] -> [B, F, t].
inline Var resolution_encoding(const Var& w, const Tensor& encoding) {
    if (encoding.rank() != 2 || encoding.dim(1) != w.dim(2)) throw ShapeError("positional encoding width mismatch");
    return ad::matmul(w.tape()->constant(encoding), ad::transpose(w));
}

inline Tensor resolution_encoding(const WarpMatrix& w, std::size_t F) {
    Tape tape(false);
    Var wv = tape.constant(w.weights.reshaped({1, w.rows(), w.cols()}));
    return resolution_encoding(wv, positional_encoding(F, w.cols())).value().reshaped({F, w.rows()});
}

// ---- activeness ----------------------------------------------------------------

/// Population std of the scores of frames with energy above epsilon, divided by delta.
/// Zero when fewer than two frames are active.
inline double activeness(std::span<const double> s, std::span<const double> energy, double delta, double epsilon) {
    if (!(delta > 0)) throw ConfigError("activeness is undefined for a zero reduction rate");
    if (s.size() != energy.size()) throw ShapeError("activeness: score and energy lengths differ");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (energy[i] > epsilon) {
            sum += s[i];
            ++n;
        }
    if (n <= 1) return 0.0;
    const double m = sum / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (energy[i] > epsilon) var += (s[i] - m) * (s[i] - m);
    return std::sqrt(var / static_cast<double>(n)) / delta;
}

}  // namespace adares::warp
