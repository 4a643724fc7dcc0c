#pragma once

#include <cmath>
#include <span>
#include <stdexcept>

namespace ehrseq {

// p-th percentile of an ascending-sorted sample, linear interpolation between
// closest ranks: rank r = (p / 100) * (m - 1), result lerps floor(r)..ceil(r).
inline double percentile_sorted(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw std::invalid_argument("percentile_sorted: empty sample");
    if (p < 0.0 || p > 100.0) throw std::invalid_argument("percentile_sorted: p out of [0, 100]");
    size_t m = sorted.size();
    if (m == 1) return sorted[0];
    double r = (p / 100.0) * static_cast<double>(m - 1);
    size_t lo = static_cast<size_t>(r);
    if (lo >= m - 1) return sorted[m - 1];
    double frac = r - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace ehrseq
