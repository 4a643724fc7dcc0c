#include "ehrseq/event_stream.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "ehrseq/io.hpp"
#include "ehrseq/rng.hpp"

namespace ehrseq {

namespace {

using nlohmann::json;

[[noreturn]] void row_error(size_t row, const std::string& what) {
    throw std::runtime_error("row " + std::to_string(row) + ": " + what);
}

int64_t parse_time_field(const json& j, size_t row) {
    if (!j.is_number_integer() && !j.is_number_unsigned())
        row_error(row, "time must be an integer (epoch seconds)");
    return j.get<int64_t>();
}

Event parse_event_json(const std::string& line, size_t row, std::string& patient_out) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        row_error(row, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) row_error(row, "row is not a JSON object");
    if (!j.contains("patient_id") || !j["patient_id"].is_string() || j["patient_id"].get<std::string>().empty())
        row_error(row, "missing or empty patient_id");
    if (!j.contains("code") || !j["code"].is_string() || j["code"].get<std::string>().empty())
        row_error(row, "missing or empty code");
    if (!j.contains("time")) row_error(row, "missing time");

    patient_out = j["patient_id"].get<std::string>();
    Event ev;
    ev.time = parse_time_field(j["time"], row);
    ev.code = j["code"].get<std::string>();

    if (j.contains("value") && !j["value"].is_null()) {
        const json& v = j["value"];
        if (v.is_object() && v.contains("cat") && v["cat"].is_string() && v.size() == 1) {
            ev.value = v["cat"].get<std::string>();
        } else if (v.is_object() && v.contains("num") && v["num"].is_number() && v.size() == 1) {
            double num = v["num"].get<double>();
            if (!std::isfinite(num)) row_error(row, "non-finite numeric value");
            ev.value = num;
        } else {
            row_error(row, "value must be null, {\"cat\": str} or {\"num\": float}");
        }
    }
    if (j.contains("visit_id") && !j["visit_id"].is_null()) {
        if (!j["visit_id"].is_string()) row_error(row, "visit_id must be a string or null");
        ev.visit_id = j["visit_id"].get<std::string>();
    }
    return ev;
}

Event parse_event_csv(const std::string& line, size_t row, std::string& patient_out) {
    std::vector<std::string> f;
    try {
        f = csv_split(line);
    } catch (const std::exception& e) {
        row_error(row, e.what());
    }
    if (f.size() != 6) row_error(row, "expected 6 columns, got " + std::to_string(f.size()));
    if (f[0].empty()) row_error(row, "missing or empty patient_id");
    if (f[2].empty()) row_error(row, "missing or empty code");

    patient_out = f[0];
    Event ev;
    ev.code = f[2];
    {
        const std::string& t = f[1];
        auto res = std::from_chars(t.data(), t.data() + t.size(), ev.time);
        if (res.ec != std::errc() || res.ptr != t.data() + t.size())
            row_error(row, "unparseable time '" + t + "'");
    }
    const std::string& vt = f[3];
    if (vt == "cat") {
        ev.value = f[4];
    } else if (vt == "num") {
        char* end = nullptr;
        double num = std::strtod(f[4].c_str(), &end);
        if (end != f[4].c_str() + f[4].size() || f[4].empty())
            row_error(row, "unparseable numeric value '" + f[4] + "'");
        if (!std::isfinite(num)) row_error(row, "non-finite numeric value");
        ev.value = num;
    } else if (!vt.empty()) {
        row_error(row, "value_type must be empty, 'cat' or 'num'");
    }
    if (!f[5].empty()) ev.visit_id = f[5];
    return ev;
}

json event_to_json(const std::string& patient_id, const Event& ev) {
    json j;
    j["patient_id"] = patient_id;
    j["time"] = ev.time;
    j["code"] = ev.code;
    if (ev.is_categorical()) j["value"] = json{{"cat", ev.categorical()}};
    else if (ev.is_numeric()) j["value"] = json{{"num", ev.numeric()}};
    else j["value"] = nullptr;
    j["visit_id"] = ev.visit_id ? json(*ev.visit_id) : json(nullptr);
    return j;
}

const char* kCsvHeader = "patient_id,time,code,value_type,value,visit_id";

}  // namespace

std::vector<PatientTimeline> ingest(std::istream& in, const IngestOptions& opts) {
    std::map<std::string, std::vector<Event>> by_patient;
    std::unordered_map<std::string, int64_t> last_time;

    std::string line;
    size_t row = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (opts.format == WireFormat::Csv && !saw_header) {
            saw_header = true;
            if (line != kCsvHeader) row_error(row, std::string("expected header '") + kCsvHeader + "'");
            continue;
        }
        std::string patient_id;
        Event ev = opts.format == WireFormat::Jsonl ? parse_event_json(line, row, patient_id)
                                                    : parse_event_csv(line, row, patient_id);
        if (opts.strict_sorted) {
            auto it = last_time.find(patient_id);
            if (it != last_time.end() && ev.time < it->second)
                row_error(row, "events out of order for patient " + patient_id + " (strict mode)");
            last_time[patient_id] = ev.time;
        }
        by_patient[patient_id].push_back(std::move(ev));
    }

    std::vector<PatientTimeline> out;
    out.reserve(by_patient.size());
    for (auto& [pid, events] : by_patient) {
        std::stable_sort(events.begin(), events.end(),
                         [](const Event& a, const Event& b) { return a.time < b.time; });
        out.push_back(PatientTimeline{pid, std::move(events)});
    }
    return out;
}

std::vector<PatientTimeline> ingest_file(const std::string& path, const IngestOptions& opts) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    return ingest(in, opts);
}

void write_events(std::ostream& out, const std::vector<PatientTimeline>& timelines, WireFormat format) {
    if (format == WireFormat::Csv) out << kCsvHeader << '\n';
    for (const auto& tl : timelines) {
        for (const auto& ev : tl.events) {
            if (format == WireFormat::Jsonl) {
                out << event_to_json(tl.patient_id, ev).dump() << '\n';
            } else {
                std::string value_type, value;
                if (ev.is_categorical()) {
                    value_type = "cat";
                    value = ev.categorical();
                } else if (ev.is_numeric()) {
                    value_type = "num";
                    value = dtos(ev.numeric());
                }
                out << csv_join({tl.patient_id, std::to_string(ev.time), ev.code, value_type, value,
                                 ev.visit_id.value_or("")})
                    << '\n';
            }
        }
    }
}

PatientTimeline slice_before(const PatientTimeline& timeline, int64_t prediction_time) {
    PatientTimeline out;
    out.patient_id = timeline.patient_id;
    auto end = std::upper_bound(timeline.events.begin(), timeline.events.end(), prediction_time,
                                [](int64_t t, const Event& ev) { return t < ev.time; });
    out.events.assign(timeline.events.begin(), end);
    return out;
}

size_t total_events(const std::vector<PatientTimeline>& timelines) {
    size_t n = 0;
    for (const auto& tl : timelines) n += tl.events.size();
    return n;
}

DatasetSplit split_patients(std::vector<std::string> patient_ids, const SplitFractions& fractions,
                            uint64_t seed) {
    if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0)
        throw std::invalid_argument("split fractions must be nonnegative");
    double sum = fractions.train + fractions.val + fractions.test;
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must sum to 1");

    std::sort(patient_ids.begin(), patient_ids.end());
    if (std::adjacent_find(patient_ids.begin(), patient_ids.end()) != patient_ids.end())
        throw std::invalid_argument("duplicate patient_id in split input");

    Rng rng(derive_seed(seed, 0));
    rng.shuffle(patient_ids);

    size_t n = patient_ids.size();
    size_t n_train = static_cast<size_t>(fractions.train * static_cast<double>(n));
    size_t n_val = static_cast<size_t>(fractions.val * static_cast<double>(n));
    size_t n_test = static_cast<size_t>(fractions.test * static_cast<double>(n));
    // Remainder from the floors goes train -> val -> test.
    size_t rem = n - (n_train + n_val + n_test);
    if (rem > 0) { ++n_train; --rem; }
    if (rem > 0) { ++n_val; --rem; }
    if (rem > 0) { ++n_test; --rem; }

    DatasetSplit split;
    split.train.assign(patient_ids.begin(), patient_ids.begin() + n_train);
    split.val.assign(patient_ids.begin() + n_train, patient_ids.begin() + n_train + n_val);
    split.test.assign(patient_ids.begin() + n_train + n_val, patient_ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

std::vector<PatientTimeline> select_patients(const std::vector<PatientTimeline>& timelines,
                                             const std::vector<std::string>& ids) {
    std::vector<PatientTimeline> out;
    for (const auto& tl : timelines)
        if (std::binary_search(ids.begin(), ids.end(), tl.patient_id)) out.push_back(tl);
    return out;
}

std::vector<TaskLabel> read_labels_csv(std::istream& in) {
    std::vector<TaskLabel> labels;
    std::string line;
    size_t row = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            saw_header = true;
            if (line != "patient_id,prediction_time,label,task_name")
                row_error(row, "expected header 'patient_id,prediction_time,label,task_name'");
            continue;
        }
        auto f = csv_split(line);
        if (f.size() != 4) row_error(row, "expected 4 columns, got " + std::to_string(f.size()));
        if (f[0].empty()) row_error(row, "missing patient_id");
        if (f[3].empty()) row_error(row, "missing task_name");
        TaskLabel lab;
        lab.patient_id = f[0];
        auto res = std::from_chars(f[1].data(), f[1].data() + f[1].size(), lab.prediction_time);
        if (res.ec != std::errc() || res.ptr != f[1].data() + f[1].size())
            row_error(row, "unparseable prediction_time '" + f[1] + "'");
        if (f[2] == "0") lab.label = false;
        else if (f[2] == "1") lab.label = true;
        else row_error(row, "label must be 0 or 1");
        lab.task_name = f[3];
        labels.push_back(std::move(lab));
    }
    return labels;
}

void write_labels_csv(std::ostream& out, const std::vector<TaskLabel>& labels) {
    out << "patient_id,prediction_time,label,task_name\n";
    for (const auto& lab : labels)
        out << csv_join({lab.patient_id, std::to_string(lab.prediction_time),
                         lab.label ? "1" : "0", lab.task_name})
            << '\n';
}

}  // namespace ehrseq
