#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace ehrseq {

// One coded observation. `value` is absent, categorical, or numeric;
// `time` is epoch seconds UTC.
struct Event {
    int64_t time = 0;
    std::string code;
    std::variant<std::monostate, std::string, double> value;
    std::optional<std::string> visit_id;

    bool has_value() const { return value.index() != 0; }
    bool is_categorical() const { return value.index() == 1; }
    bool is_numeric() const { return value.index() == 2; }
    const std::string& categorical() const { return std::get<std::string>(value); }
    double numeric() const { return std::get<double>(value); }

    bool operator==(const Event&) const = default;
};

struct PatientTimeline {
    std::string patient_id;
    std::vector<Event> events;  // nondecreasing in time

    bool operator==(const PatientTimeline&) const = default;
};

struct TaskLabel {
    std::string patient_id;
    int64_t prediction_time = 0;
    bool label = false;
    std::string task_name;

    bool operator==(const TaskLabel&) const = default;
};

struct DatasetSplit {
    std::vector<std::string> train, val, test;  // disjoint; each sorted
};

enum class WireFormat { Jsonl, Csv };

struct IngestOptions {
    WireFormat format = WireFormat::Jsonl;
    // When set, out-of-order events within a patient are an error instead of
    // being sorted.
    bool strict_sorted = false;
};

// Reads a whole event collection. Returns timelines sorted by patient_id;
// events within a patient are stably sorted by time, so equal-time events
// keep their input order. Row counts are conserved: every input row lands in
// exactly one timeline. Malformed rows abort the ingest with a 1-based row
// number in the error message.
std::vector<PatientTimeline> ingest(std::istream& in, const IngestOptions& opts = {});
std::vector<PatientTimeline> ingest_file(const std::string& path, const IngestOptions& opts = {});

void write_events(std::ostream& out, const std::vector<PatientTimeline>& timelines, WireFormat format);

// Events with time <= prediction_time, in timeline order.
PatientTimeline slice_before(const PatientTimeline& timeline, int64_t prediction_time);

size_t total_events(const std::vector<PatientTimeline>& timelines);

struct SplitFractions {
    double train = 0.8, val = 0.1, test = 0.1;
};

// Seeded shuffle then contiguous slices of floor(n*f_train) / floor(n*f_val) /
// remainder. Fractions must be positive and sum to 1.
DatasetSplit split_patients(std::vector<std::string> patient_ids, const SplitFractions& fractions,
                            uint64_t seed);

// Subset of `timelines` whose patient_id is in the sorted id list `ids`.
std::vector<PatientTimeline> select_patients(const std::vector<PatientTimeline>& timelines,
                                             const std::vector<std::string>& ids);

// labels CSV: header patient_id,prediction_time,label,task_name; label is 0/1.
std::vector<TaskLabel> read_labels_csv(std::istream& in);
void write_labels_csv(std::ostream& out, const std::vector<TaskLabel>& labels);

}  // namespace ehrseq
