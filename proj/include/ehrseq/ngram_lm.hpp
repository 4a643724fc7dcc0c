#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ehrseq/rng.hpp"
#include "ehrseq/tokenizer.hpp"

namespace ehrseq {

// Interpolated add-k n-gram model:
//   P(t | c) = sum_j lambda_j * (count_j(c_j, t) + kappa) / (count_j(c_j) + kappa * |V|)
// where c_j is the length j-1 suffix of c and contexts shorter than j-1 are
// left-padded with [BOS]. Smoothing keeps every conditional strictly positive.
class NGramModel {
public:
    struct Params {
        int order = 3;
        double kappa = 0.1;
        std::vector<double> lambdas;  // size == order; empty means uniform
        int32_t vocab_size = 0;
        int32_t bos_id = -1;  // required when order > 1
        int32_t eos_id = -1;  // optional; generation stops after sampling it
    };

    static NGramModel fit(std::span<const TokenSequence> sequences, Params params);
    static NGramModel fit_serial(std::span<const TokenSequence> sequences, Params params);

    const Params& params() const { return params_; }

    double prob(std::span<const int32_t> context, int32_t token) const;
    double log_prob(std::span<const int32_t> context, int32_t token) const;

    // Full next-token distribution over the vocabulary.
    std::vector<double> conditional(std::span<const int32_t> context) const;

    // Element i = log P(x_i | x_<i) with [BOS] padding at the left edge.
    std::vector<double> sequence_log_probs(std::span<const int32_t> sequence) const;

    int32_t sample_next(std::span<const int32_t> context, Rng& rng, double temperature = 1.0) const;
    std::vector<int32_t> generate(std::span<const int32_t> prefix, int steps, uint64_t seed,
                                  double temperature = 1.0) const;

    uint64_t total_tokens() const { return total_tokens_; }

    void save(std::ostream& out) const;
    static NGramModel load(std::istream& in);
    static NGramModel load_file(const std::string& path);

private:
    static NGramModel fit_impl(std::span<const TokenSequence> sequences, Params params,
                               bool parallel);
    void rebuild_context_totals();

    Params params_;
    uint64_t total_tokens_ = 0;
    // ngram_counts_[j-1]: packed j-token key -> count. Context totals are the
    // prefix sums of those counts, kept separately for O(1) lookup.
    std::vector<std::unordered_map<std::string, uint64_t>> ngram_counts_;
    std::vector<std::unordered_map<std::string, uint64_t>> context_totals_;
};

// Mean negative log-likelihood per token over a corpus; the held-out fit
// comparison metric.
double mean_nll(const NGramModel& model, std::span<const TokenSequence> sequences);

}  // namespace ehrseq
