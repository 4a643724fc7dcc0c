#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace ehrseq {

// splitmix64 finalizer. Used to derive independent stream seeds from a
// (base seed, stream index) pair so parallel consumers never share state.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

// Deterministic RNG. The engine is std::mt19937_64, whose output sequence is
// pinned by the standard; the distributions are implemented here by hand
// because std:: distribution algorithms vary between standard libraries and
// would break cross-platform reproducibility of seeded runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n). Rejection on the low 2^64 mod n values.
    uint64_t bounded(uint64_t n) {
        assert(n > 0);
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = u64();
            if (r >= threshold) return r % n;
        }
    }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
        assert(lo <= hi);
        return lo + static_cast<int64_t>(bounded(static_cast<uint64_t>(hi - lo) + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; consumes two uniforms per pair, caches the second draw.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    double lognormal(double log_mean, double log_stddev) {
        return std::exp(normal(log_mean, log_stddev));
    }

    // Geometric on {1, 2, ...} with success probability p.
    int64_t geometric(double p) {
        if (p <= 0.0 || p > 1.0) throw std::invalid_argument("geometric: p must be in (0, 1]");
        if (p == 1.0) return 1;
        double u = 1.0 - uniform();  // (0, 1]
        return 1 + static_cast<int64_t>(std::floor(std::log(u) / std::log1p(-p)));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Indices of a size-k subset of [0, n), ascending. k must be <= n.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k);

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline std::vector<size_t> Rng::sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    // Partial Fisher-Yates over an index array.
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = 0; i < k; ++i) {
        size_t j = i + static_cast<size_t>(bounded(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace ehrseq
