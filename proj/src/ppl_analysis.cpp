#include "ehrseq/ppl_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "ehrseq/io.hpp"
#include "ehrseq/parallel.hpp"

namespace ehrseq {

std::vector<double> per_token_ppl(std::span<const double> logprobs) {
    std::vector<double> out(logprobs.size());
    for (size_t i = 0; i < logprobs.size(); ++i) {
        if (logprobs[i] > 0.0)
            throw std::invalid_argument("per_token_ppl: positive log-probability");
        out[i] = std::exp(-logprobs[i]);
    }
    return out;
}

std::vector<double> strided_scores(const SequenceScorer& scorer, std::span<const int32_t> seq,
                                   int context_len, int stride) {
    if (stride < 1) throw std::invalid_argument("stride must be >= 1");
    if (context_len < stride) throw std::invalid_argument("stride must not exceed context_len");
    const size_t n = seq.size();
    const size_t L = static_cast<size_t>(context_len);
    if (n == 0) return {};
    if (n <= L) return scorer(seq, 0);

    std::vector<double> out = scorer(seq.subspan(0, L), 0);
    out.reserve(n);
    size_t pos = L;
    const size_t carry = L - static_cast<size_t>(stride);
    while (pos < n) {
        size_t begin = pos - carry;
        size_t end = std::min(n, pos + static_cast<size_t>(stride));
        std::vector<double> scored = scorer(seq.subspan(begin, end - begin), pos - begin);
        out.insert(out.end(), scored.begin(), scored.end());
        pos = end;
    }
    return out;
}

std::vector<double> strided_scores(const NGramModel& model, std::span<const int32_t> seq,
                                   int context_len, int stride) {
    SequenceScorer scorer = [&model](std::span<const int32_t> window, size_t first_scored) {
        std::vector<double> out;
        out.reserve(window.size() - first_scored);
        for (size_t i = first_scored; i < window.size(); ++i)
            out.push_back(model.log_prob(window.subspan(0, i), window[i]));
        return out;
    };
    return strided_scores(scorer, seq, context_len, stride);
}

PositionPplCurve median_by_position(const std::vector<std::vector<double>>& ppl_vectors) {
    if (ppl_vectors.empty()) throw std::invalid_argument("median_by_position: empty corpus");
    size_t max_len = 0;
    for (const auto& v : ppl_vectors) max_len = std::max(max_len, v.size());

    PositionPplCurve curve;
    curve.median_ppl.resize(max_len);
    curve.support.resize(max_len);
    std::vector<std::vector<double>> buckets(max_len);
    for (const auto& v : ppl_vectors)
        for (size_t p = 0; p < v.size(); ++p) buckets[p].push_back(v[p]);

    parallel_for(max_len, [&](size_t p) {
        auto& b = buckets[p];
        std::sort(b.begin(), b.end());
        size_t k = b.size();
        curve.support[p] = k;
        curve.median_ppl[p] = k % 2 ? b[k / 2] : 0.5 * (b[k / 2 - 1] + b[k / 2]);
    });
    return curve;
}

std::vector<double> ema(std::span<const double> series, int span) {
    if (span < 1) throw std::invalid_argument("ema: span must be >= 1");
    if (series.empty()) throw std::invalid_argument("ema: empty series");
    double alpha = 2.0 / (span + 1.0);
    std::vector<double> out(series.size());
    out[0] = series[0];
    for (size_t t = 1; t < series.size(); ++t)
        out[t] = alpha * series[t] + (1.0 - alpha) * out[t - 1];
    return out;
}

static std::vector<std::vector<double>> score_corpus_impl(const NGramModel& model,
                                                          std::span<const TokenSequence> seqs,
                                                          int context_len, int stride,
                                                          bool parallel) {
    if (stride < 1) throw std::invalid_argument("stride must be >= 1");
    if (context_len < stride) throw std::invalid_argument("stride must not exceed context_len");
    // Validate before the parallel region; exceptions cannot cross it.
    for (const TokenSequence& s : seqs)
        for (int32_t t : s.token_ids)
            if (t < 0 || t >= model.params().vocab_size)
                throw std::invalid_argument("token id out of vocabulary range");
    std::vector<std::vector<double>> out(seqs.size());
    auto body = [&](size_t i) { out[i] = strided_scores(model, seqs[i].token_ids, context_len, stride); };
    if (parallel) parallel_for(seqs.size(), body);
    else serial_for(seqs.size(), body);
    return out;
}

std::vector<std::vector<double>> score_corpus(const NGramModel& model,
                                              std::span<const TokenSequence> seqs, int context_len,
                                              int stride) {
    return score_corpus_impl(model, seqs, context_len, stride, true);
}

std::vector<std::vector<double>> score_corpus_serial(const NGramModel& model,
                                                     std::span<const TokenSequence> seqs,
                                                     int context_len, int stride) {
    return score_corpus_impl(model, seqs, context_len, stride, false);
}

void write_logprobs_jsonl(std::ostream& out, const std::vector<PatientLogProbs>& rows) {
    for (const auto& r : rows) {
        nlohmann::json j;
        j["patient_id"] = r.patient_id;
        j["logprobs"] = r.logprobs;
        out << j.dump() << '\n';
    }
}

std::vector<PatientLogProbs> read_logprobs_jsonl(std::istream& in) {
    std::vector<PatientLogProbs> rows;
    std::string line;
    size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            PatientLogProbs r;
            r.patient_id = j.at("patient_id").get<std::string>();
            r.logprobs = j.at("logprobs").get<std::vector<double>>();
            rows.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw std::runtime_error("row " + std::to_string(row) + ": " + e.what());
        }
    }
    return rows;
}

void write_curve_csv(std::ostream& out, const PositionPplCurve& curve) {
    out << "position,median_ppl,support,ema\n";
    for (size_t p = 0; p < curve.median_ppl.size(); ++p) {
        out << p << ',' << dtos(curve.median_ppl[p]) << ',' << curve.support[p] << ',';
        if (p < curve.ema.size()) out << dtos(curve.ema[p]);
        out << '\n';
    }
}

}  // namespace ehrseq
