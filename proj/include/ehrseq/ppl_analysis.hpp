#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ehrseq/ngram_lm.hpp"

namespace ehrseq {

// Per-token perplexity exp(-logprob). Rejects positive log-probs.
std::vector<double> per_token_ppl(std::span<const double> logprobs);

// Scores window[first_scored..] given the window prefix as context; returns
// one log-prob per scored position.
using SequenceScorer =
    std::function<std::vector<double>(std::span<const int32_t> window, size_t first_scored)>;

// Sliding-window evaluation: the first L positions get full available
// context; afterwards windows advance by `stride` and only each window's
// final `stride` tokens are scored, conditioned on the preceding L-stride
// tokens. Covers every position exactly once.
std::vector<double> strided_scores(const SequenceScorer& scorer, std::span<const int32_t> seq,
                                   int context_len, int stride = 32);
std::vector<double> strided_scores(const NGramModel& model, std::span<const int32_t> seq,
                                   int context_len, int stride = 32);

struct PositionPplCurve {
    std::vector<double> median_ppl;
    std::vector<uint64_t> support;  // patients with length > position
    std::vector<double> ema;        // empty until smoothing is applied
};

// Median per-token PPL at each position over all patients long enough to
// reach it. Median of an even count is the mean of the central two.
PositionPplCurve median_by_position(const std::vector<std::vector<double>>& ppl_vectors);

// s_0 = x_0; s_t = a*x_t + (1-a)*s_{t-1}, a = 2/(span+1).
std::vector<double> ema(std::span<const double> series, int span);

// Per-patient strided log-prob vectors for a corpus.
std::vector<std::vector<double>> score_corpus(const NGramModel& model,
                                              std::span<const TokenSequence> seqs, int context_len,
                                              int stride = 32);
std::vector<std::vector<double>> score_corpus_serial(const NGramModel& model,
                                                     std::span<const TokenSequence> seqs,
                                                     int context_len, int stride = 32);

// JSONL {"patient_id": str, "logprobs": [float]}; the interchange format for
// externally computed scores.
struct PatientLogProbs {
    std::string patient_id;
    std::vector<double> logprobs;
};

void write_logprobs_jsonl(std::ostream& out, const std::vector<PatientLogProbs>& rows);
std::vector<PatientLogProbs> read_logprobs_jsonl(std::istream& in);

// CSV position,median_ppl,support,ema.
void write_curve_csv(std::ostream& out, const PositionPplCurve& curve);

}  // namespace ehrseq
