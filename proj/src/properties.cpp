#include "ehrseq/properties.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

#include "ehrseq/io.hpp"
#include "ehrseq/parallel.hpp"
#include "ehrseq/percentile.hpp"

namespace ehrseq {

std::optional<double> repetition_rate(std::span<const int32_t> symbols, int n) {
    if (n < 1) throw std::invalid_argument("repetition_rate: n must be >= 1");
    size_t len = symbols.size();
    if (len < static_cast<size_t>(n)) return std::nullopt;

    // Count distinct contiguous n-grams via byte-packed keys.
    std::unordered_map<std::string, uint32_t> counts;
    counts.reserve(len);
    std::string key(sizeof(int32_t) * static_cast<size_t>(n), '\0');
    for (size_t i = 0; i + n <= len; ++i) {
        std::memcpy(key.data(), symbols.data() + i, sizeof(int32_t) * static_cast<size_t>(n));
        ++counts[key];
    }
    size_t repeated = 0;
    for (const auto& [_, c] : counts)
        if (c > 1) ++repeated;
    return static_cast<double>(repeated) / static_cast<double>(counts.size());
}

IrregularityStats irregularity(const PatientTimeline& timeline) {
    const auto& events = timeline.events;
    if (events.size() < 2)
        throw std::invalid_argument("irregularity undefined for fewer than 2 events");

    size_t k = events.size() - 1;
    std::vector<double> deltas(k);
    for (size_t i = 0; i < k; ++i)
        deltas[i] = static_cast<double>(events[i + 1].time - events[i].time);

    double mean = 0;
    for (double d : deltas) mean += d;
    mean /= static_cast<double>(k);

    double var = 0;
    for (double d : deltas) var += (d - mean) * (d - mean);
    var /= static_cast<double>(k);  // population denominator over the deltas

    std::sort(deltas.begin(), deltas.end());
    double iqr = percentile_sorted(deltas, 75.0) - percentile_sorted(deltas, 25.0);
    return {mean, std::sqrt(var), iqr};
}

std::vector<int32_t> code_symbols(const PatientTimeline& timeline) {
    std::vector<int32_t> out;
    out.reserve(timeline.events.size());
    std::unordered_map<std::string, int32_t> intern;
    for (const Event& ev : timeline.events) {
        auto [it, inserted] = intern.try_emplace(ev.code, static_cast<int32_t>(intern.size()));
        out.push_back(it->second);
    }
    return out;
}

int QuartileAssignment::quartile_of(const std::string& patient_id) const {
    auto it = std::lower_bound(patient_quartile.begin(), patient_quartile.end(), patient_id,
                               [](const auto& pq, const std::string& pid) { return pq.first < pid; });
    if (it == patient_quartile.end() || it->first != patient_id) return -1;
    return it->second;
}

QuartileAssignment quartile_split(std::vector<std::pair<std::string, double>> values) {
    if (values.size() < 4)
        throw std::invalid_argument("quartile_split needs at least 4 defined values");
    std::sort(values.begin(), values.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second < b.second;
        return a.first < b.first;
    });
    size_t n = values.size();
    size_t base = n / 4, rem = n % 4;
    QuartileAssignment out;
    out.patient_quartile.reserve(n);
    size_t idx = 0;
    for (int q = 0; q < 4; ++q) {
        size_t sz = base + (static_cast<size_t>(q) < rem ? 1 : 0);
        for (size_t i = 0; i < sz; ++i, ++idx)
            out.patient_quartile.emplace_back(values[idx].first, q);
    }
    std::sort(out.patient_quartile.begin(), out.patient_quartile.end());
    return out;
}

HistogramReport histogram(std::span<const double> values, int bins, bool log10_scale,
                          std::string metric_name) {
    if (bins < 1) throw std::invalid_argument("histogram: bins must be >= 1");
    HistogramReport h;
    h.metric_name = std::move(metric_name);
    h.log10_scale = log10_scale;
    h.counts.assign(static_cast<size_t>(bins), 0);

    if (values.empty()) {
        h.edges.assign(static_cast<size_t>(bins) + 1, 0.0);
        return h;
    }
    std::vector<double> xs(values.begin(), values.end());
    if (log10_scale) {
        for (double& v : xs) {
            if (v <= 0.0)
                throw std::invalid_argument("histogram: log10 scale requires positive values");
            v = std::log10(v);
        }
    }
    double lo = *std::min_element(xs.begin(), xs.end());
    double hi = *std::max_element(xs.begin(), xs.end());
    if (lo == hi) hi = lo + 1.0;  // a degenerate range still needs real bin widths

    double width = (hi - lo) / bins;
    h.edges.resize(static_cast<size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b) {
        double e = lo + width * b;
        h.edges[b] = log10_scale ? std::pow(10.0, e) : e;
    }
    for (double x : xs) {
        int b = static_cast<int>((x - lo) / width);
        if (b >= bins) b = bins - 1;  // max value lands in the closed last bin
        if (b < 0) b = 0;
        ++h.counts[b];
    }
    return h;
}

void write_histogram_csv(std::ostream& out, const HistogramReport& h) {
    out << "bin_lo,bin_hi,count\n";
    for (size_t b = 0; b < h.counts.size(); ++b)
        out << dtos(h.edges[b]) << ',' << dtos(h.edges[b + 1]) << ',' << h.counts[b] << '\n';
}

namespace {

template <typename GetSymbols, typename GetTimes>
std::vector<PatientMetricRow> metrics_for_patient(const std::string& patient_id,
                                                  const GetSymbols& symbols,
                                                  const GetTimes& times,
                                                  const CorpusMetricsOptions& opts) {
    std::vector<PatientMetricRow> rows;
    for (int n : opts.rr_ns) {
        auto rr = repetition_rate(symbols, n);
        if (rr) rows.push_back({patient_id, "", "rr" + std::to_string(n), *rr});
    }
    if (times.size() >= 2) {
        size_t k = times.size() - 1;
        std::vector<double> deltas(k);
        for (size_t i = 0; i < k; ++i)
            deltas[i] = static_cast<double>(times[i + 1] - times[i]);
        double mean = 0;
        for (double d : deltas) mean += d;
        mean /= static_cast<double>(k);
        double var = 0;
        for (double d : deltas) var += (d - mean) * (d - mean);
        var /= static_cast<double>(k);
        std::sort(deltas.begin(), deltas.end());
        double iqr = percentile_sorted(deltas, 75.0) - percentile_sorted(deltas, 25.0);
        rows.push_back({patient_id, "", "irr_mean_s", mean});
        rows.push_back({patient_id, "", "irr_std_s", std::sqrt(var)});
        rows.push_back({patient_id, "", "irr_iqr_s", iqr});
    }
    return rows;
}

}  // namespace

static std::vector<PatientMetricRow> corpus_metrics_impl(std::span<const PatientTimeline> timelines,
                                                         const CorpusMetricsOptions& opts,
                                                         bool parallel) {
    std::vector<std::vector<PatientMetricRow>> per_patient(timelines.size());
    auto body = [&](size_t i) {
        const PatientTimeline& tl = timelines[i];
        if (tl.events.size() < static_cast<size_t>(opts.min_events)) return;
        std::vector<int32_t> syms = code_symbols(tl);
        std::vector<int64_t> times;
        times.reserve(tl.events.size());
        for (const Event& ev : tl.events) times.push_back(ev.time);
        per_patient[i] = metrics_for_patient(tl.patient_id, std::span<const int32_t>(syms),
                                             times, opts);
    };
    if (parallel) parallel_for(timelines.size(), body);
    else serial_for(timelines.size(), body);

    std::vector<PatientMetricRow> rows;
    for (auto& pr : per_patient)
        for (auto& r : pr) rows.push_back(std::move(r));
    return rows;
}

std::vector<PatientMetricRow> corpus_metrics(std::span<const PatientTimeline> timelines,
                                             const CorpusMetricsOptions& opts) {
    return corpus_metrics_impl(timelines, opts, true);
}

std::vector<PatientMetricRow> corpus_metrics_serial(std::span<const PatientTimeline> timelines,
                                                    const CorpusMetricsOptions& opts) {
    return corpus_metrics_impl(timelines, opts, false);
}

std::vector<PatientMetricRow> corpus_metrics_tokens(std::span<const TokenSequence> seqs,
                                                    const CorpusMetricsOptions& opts) {
    std::vector<std::vector<PatientMetricRow>> per_patient(seqs.size());
    parallel_for(seqs.size(), [&](size_t i) {
        const TokenSequence& s = seqs[i];
        if (s.token_ids.size() < static_cast<size_t>(opts.min_events)) return;
        per_patient[i] = metrics_for_patient(s.patient_id, std::span<const int32_t>(s.token_ids),
                                             s.source_times, opts);
    });
    std::vector<PatientMetricRow> rows;
    for (auto& pr : per_patient)
        for (auto& r : pr) rows.push_back(std::move(r));
    return rows;
}

void write_metrics_csv(std::ostream& out, const std::vector<PatientMetricRow>& rows) {
    out << "patient_id,task,metric_name,value\n";
    for (const auto& r : rows)
        out << csv_join({r.patient_id, r.task, r.metric, dtos(r.value)}) << '\n';
}

std::vector<PatientMetricRow> read_metrics_csv(std::istream& in) {
    std::vector<PatientMetricRow> rows;
    std::string line;
    bool saw_header = false;
    size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            saw_header = true;
            if (line != "patient_id,task,metric_name,value")
                throw std::runtime_error("row 1: expected metrics CSV header");
            continue;
        }
        auto f = csv_split(line);
        if (f.size() != 4)
            throw std::runtime_error("row " + std::to_string(row) + ": expected 4 columns");
        PatientMetricRow r;
        r.patient_id = f[0];
        r.task = f[1];
        r.metric = f[2];
        char* end = nullptr;
        r.value = std::strtod(f[3].c_str(), &end);
        if (end != f[3].c_str() + f[3].size() || f[3].empty())
            throw std::runtime_error("row " + std::to_string(row) + ": bad value");
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace ehrseq
