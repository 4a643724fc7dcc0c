#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ehrseq/event_stream.hpp"
#include "ehrseq/tokenizer.hpp"

namespace ehrseq {

// RR_n: fraction of the sequence's unique contiguous n-grams occurring more
// than once. nullopt when the sequence has fewer than n elements.
std::optional<double> repetition_rate(std::span<const int32_t> symbols, int n);

struct IrregularityStats {
    double mean_s = 0;  // mean inter-event gap, seconds
    double std_s = 0;   // population std over the gaps
    double iqr_s = 0;   // Q75 - Q25 of the gaps
};

// Gap statistics over the |events|-1 consecutive deltas. Throws below 2 events.
IrregularityStats irregularity(const PatientTimeline& timeline);

// Interns the event codes of a timeline as dense symbols, preserving order.
std::vector<int32_t> code_symbols(const PatientTimeline& timeline);

// Quartile index 0..3 per patient (0 = lowest values). Sort is by
// (value, patient_id); sizes are ceil(n/4) for the first n%4 groups.
struct QuartileAssignment {
    std::vector<std::pair<std::string, int>> patient_quartile;  // sorted by patient_id
    int quartile_of(const std::string& patient_id) const;       // -1 when absent
};

QuartileAssignment quartile_split(std::vector<std::pair<std::string, double>> values);

struct HistogramReport {
    std::string metric_name;
    bool log10_scale = false;
    std::vector<double> edges;     // bins+1 edges in value space
    std::vector<uint64_t> counts;  // right-open bins, last bin closed
};

HistogramReport histogram(std::span<const double> values, int bins, bool log10_scale,
                          std::string metric_name);

void write_histogram_csv(std::ostream& out, const HistogramReport& h);

// Per-patient metric rows for the corpus: rr1..rr4 plus irregularity
// mean/std/iqr, skipping undefined values. RR runs over event codes by
// default; rr_on_tokens switches it to a token sequence view supplied by the
// caller. Patients under min_events are excluded entirely.
struct PatientMetricRow {
    std::string patient_id;
    std::string task;  // empty outside task-scoped runs
    std::string metric;
    double value = 0;
};

struct CorpusMetricsOptions {
    int min_events = 0;
    std::vector<int> rr_ns = {1, 2, 3, 4};
};

std::vector<PatientMetricRow> corpus_metrics(std::span<const PatientTimeline> timelines,
                                             const CorpusMetricsOptions& opts);
std::vector<PatientMetricRow> corpus_metrics_serial(std::span<const PatientTimeline> timelines,
                                                    const CorpusMetricsOptions& opts);

// Same metrics over already-encoded token sequences (RR over token ids;
// irregularity over source_times).
std::vector<PatientMetricRow> corpus_metrics_tokens(std::span<const TokenSequence> seqs,
                                                    const CorpusMetricsOptions& opts);

void write_metrics_csv(std::ostream& out, const std::vector<PatientMetricRow>& rows);
std::vector<PatientMetricRow> read_metrics_csv(std::istream& in);

}  // namespace ehrseq
