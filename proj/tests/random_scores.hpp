#pragma once

// Random importance vectors for warp tests.

#include <algorithm>
#include <random>
#include <vector>

namespace adares::testutil {

struct ScoreCase {
    std::vector<double> s;
    std::size_t t = 0;
};

/// Scores in (0, 1] summing to exactly t (up to rounding): raw draws are scaled by the
/// constant c solving sum(min(c * r_j, 1)) = t, found by bisection.
inline ScoreCase water_filled(std::mt19937_64& rng, std::size_t max_T = 64) {
    std::uniform_int_distribution<std::size_t> len(1, max_T);
    const std::size_t T = len(rng);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(1, T)(rng);
    std::uniform_real_distribution<double> u(0.02, 1.0);
    std::vector<double> r(T);
    for (double& v : r) v = u(rng);
    auto total = [&](double c) {
        double acc = 0;
        for (double v : r) acc += std::min(c * v, 1.0);
        return acc;
    };
    double lo = 0.0, hi = 1.0 / *std::min_element(r.begin(), r.end());
    for (int k = 0; k < 200; ++k) {
        const double mid = 0.5 * (lo + hi);
        (total(mid) < static_cast<double>(t) ? lo : hi) = mid;
    }
    ScoreCase out{std::vector<double>(T), t};
    for (std::size_t j = 0; j < T; ++j) out.s[j] = std::min(lo * r[j], 1.0);
    return out;
}

}  // namespace adares::testutil
