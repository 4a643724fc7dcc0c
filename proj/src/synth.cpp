#include "ehrseq/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "ehrseq/parallel.hpp"
#include "ehrseq/properties.hpp"
#include "ehrseq/rng.hpp"

namespace ehrseq::synth {

using nlohmann::json;

namespace {
// Domain tags keep patient, label, and any future streams independent even
// when the caller reuses one seed everywhere.
constexpr uint64_t kPatientDomain = 0x434f5250;
constexpr uint64_t kLabelDomain = 0x4c41424c;
}  // namespace

std::string code_name(int rank) { return "C" + std::to_string(rank); }

void validate(const SynthConfig& c) {
    auto check = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("synth config: " + what);
    };
    check(c.n_patients >= 0, "n_patients must be >= 0");
    check(c.vocab_size >= 1, "vocab_size must be >= 1");
    check(c.zipf_exponent > 0, "zipf_exponent must be > 0");
    check(c.events_per_patient.log_sigma >= 0, "events_per_patient.log_sigma must be >= 0");
    check(c.min_events >= 1, "min_events must be >= 1");
    check(c.max_events == 0 || c.max_events >= c.min_events,
          "max_events must be 0 or >= min_events");
    check(c.mean_events_per_visit >= 1.0, "mean_events_per_visit must be >= 1");
    check(c.within_visit_gap_s.log_sigma >= 0, "within_visit_gap_s.log_sigma must be >= 0");
    check(c.between_visit_gap_days.log_sigma >= 0,
          "between_visit_gap_days.log_sigma must be >= 0");
    check(c.between_gap_sigma_min >= 0 && c.between_gap_sigma_max >= c.between_gap_sigma_min,
          "between_gap_sigma range must satisfy 0 <= min <= max");
    check(c.copy_forward_min >= 0 && c.copy_forward_max <= 1 &&
              c.copy_forward_min <= c.copy_forward_max,
          "copy_forward range must lie in [0,1]");
    check(c.drift_rate >= 0 && c.drift_rate <= 1, "drift_rate must be in [0,1]");
    check(c.drift_fraction >= 0 && c.drift_fraction <= 1, "drift_fraction must be in [0,1]");
    check(c.drift_step >= 0, "drift_step must be >= 0");
    check(c.active_set_size >= 1 && c.active_set_size <= c.vocab_size,
          "active_set_size must be in [1, vocab_size]");
    check(c.numeric_value_prob >= 0 && c.categorical_value_prob >= 0 &&
              c.numeric_value_prob + c.categorical_value_prob <= 1,
          "value probabilities must be nonnegative and sum to <= 1");
    check(c.categories_per_code >= 1, "categories_per_code must be >= 1");
    check(c.start_time_min < c.start_time_max, "start_time range must be nonempty");
    const auto& l = c.label;
    check(l.risk_codes.size() == l.weights.size(), "label risk_codes/weights length mismatch");
    for (int rc : l.risk_codes)
        check(rc >= 0 && rc < c.vocab_size, "label risk code rank out of range");
    check(l.noise_base >= 0, "label noise_base must be >= 0");
    check(l.noise_metric == "none" || l.noise_metric == "rr1" || l.noise_metric == "irr_std",
          "label noise_metric must be none, rr1 or irr_std");
    check(l.noise_metric_weight >= 0, "label noise_metric_weight must be >= 0");
    check(l.pred_frac_min >= 0 && l.pred_frac_max <= 1 && l.pred_frac_min <= l.pred_frac_max,
          "label pred_frac range must lie in [0,1]");
    check(l.min_events_for_label >= 2, "label min_events_for_label must be >= 2");
    check(l.labels_per_patient >= 0, "labels_per_patient must be >= 0");
}

std::vector<double> zipf_cumulative(int vocab_size, double exponent) {
    std::vector<double> cum(static_cast<size_t>(vocab_size) + 1, 0.0);
    for (int r = 0; r < vocab_size; ++r)
        cum[static_cast<size_t>(r) + 1] =
            cum[static_cast<size_t>(r)] + std::pow(static_cast<double>(r + 1), -exponent);
    return cum;
}

namespace {

// Zipf-weighted rank in [lo, hi) using the precomputed cumulative weights.
int zipf_rank(Rng& rng, const std::vector<double>& cum, int lo, int hi) {
    double u = rng.uniform(cum[static_cast<size_t>(lo)], cum[static_cast<size_t>(hi)]);
    auto it = std::upper_bound(cum.begin() + lo + 1, cum.begin() + hi, u);
    int r = static_cast<int>(it - cum.begin()) - 1;
    return std::clamp(r, lo, hi - 1);
}

std::vector<int> sample_active_set(Rng& rng, const std::vector<double>& cum, int offset, int size,
                                   int vocab_size) {
    int lo = std::min(offset, vocab_size - size);
    std::vector<int> set;
    std::unordered_set<int> used;
    // Rejection for distinctness; falls back to sequential ranks if the
    // remaining range is too collision-prone to finish quickly.
    int attempts = 0;
    while (static_cast<int>(set.size()) < size && attempts < size * 64) {
        int r = zipf_rank(rng, cum, lo, vocab_size);
        ++attempts;
        if (used.insert(r).second) set.push_back(r);
    }
    for (int r = lo; static_cast<int>(set.size()) < size && r < vocab_size; ++r)
        if (used.insert(r).second) set.push_back(r);
    return set;
}

}  // namespace

PatientTimeline generate_patient(const SynthConfig& c, uint64_t seed, size_t index,
                                 const std::vector<double>& zipf_cum) {
    Rng rng(derive_seed(derive_seed(seed, kPatientDomain), index));

    PatientTimeline tl;
    {
        std::string num = std::to_string(index);
        std::string width = std::to_string(std::max(1, c.n_patients - 1));
        tl.patient_id = "p" + std::string(width.size() - num.size(), '0') + num;
    }

    int64_t n_events = std::llround(rng.lognormal(c.events_per_patient.log_mean,
                                                  c.events_per_patient.log_sigma));
    n_events = std::max<int64_t>(n_events, c.min_events);
    if (c.max_events > 0) n_events = std::min<int64_t>(n_events, c.max_events);

    double between_sigma = c.between_gap_sigma_max > c.between_gap_sigma_min
                               ? rng.uniform(c.between_gap_sigma_min, c.between_gap_sigma_max)
                               : c.between_visit_gap_days.log_sigma;
    double p_rep = c.copy_forward_max > c.copy_forward_min
                       ? rng.uniform(c.copy_forward_min, c.copy_forward_max)
                       : c.copy_forward_min;

    int offset = 0;
    std::vector<int> active = sample_active_set(rng, zipf_cum, offset, c.active_set_size,
                                                c.vocab_size);
    std::vector<std::vector<int>> visit_blocks;

    int64_t t = rng.uniform_int(c.start_time_min, c.start_time_max - 1);
    int64_t emitted = 0;
    int visit_index = 0;
    tl.events.reserve(static_cast<size_t>(n_events));

    while (emitted < n_events) {
        if (visit_index > 0) {
            if (c.drift_rate > 0 && rng.bernoulli(c.drift_rate)) {
                offset += c.drift_step;
                int replace = static_cast<int>(std::ceil(c.drift_fraction * active.size()));
                if (replace > 0) {
                    int lo = std::min(offset, c.vocab_size - c.active_set_size);
                    std::unordered_set<int> used(active.begin(), active.end());
                    active.erase(active.begin(),
                                 active.begin() + std::min<size_t>(replace, active.size()));
                    int attempts = 0;
                    while (static_cast<int>(active.size()) < c.active_set_size &&
                           attempts < c.active_set_size * 64) {
                        int r = zipf_rank(rng, zipf_cum, lo, c.vocab_size);
                        ++attempts;
                        if (used.insert(r).second) active.push_back(r);
                    }
                    for (int r = lo;
                         static_cast<int>(active.size()) < c.active_set_size && r < c.vocab_size;
                         ++r)
                        if (used.insert(r).second) active.push_back(r);
                }
            }
            double gap_days = rng.lognormal(c.between_visit_gap_days.log_mean, between_sigma);
            t += std::max<int64_t>(1, std::llround(gap_days * 86400.0));
        }

        std::vector<int> block;
        if (!visit_blocks.empty() && rng.bernoulli(p_rep)) {
            block = visit_blocks[rng.bounded(visit_blocks.size())];
        } else {
            int64_t n_v = std::min<int64_t>(rng.geometric(1.0 / c.mean_events_per_visit),
                                            static_cast<int64_t>(active.size()));
            // Within-visit codes are drawn without replacement, like the
            // distinct diagnoses of one encounter.
            std::vector<int> pool = active;
            rng.shuffle(pool);
            block.assign(pool.begin(), pool.begin() + n_v);
        }
        if (static_cast<int64_t>(block.size()) > n_events - emitted)
            block.resize(static_cast<size_t>(n_events - emitted));

        std::string visit_id = "v" + std::to_string(visit_index);
        for (size_t e = 0; e < block.size(); ++e) {
            if (e > 0)
                t += std::max<int64_t>(1, std::llround(rng.lognormal(c.within_visit_gap_s.log_mean,
                                                                     c.within_visit_gap_s.log_sigma)));
            Event ev;
            ev.time = t;
            ev.code = code_name(block[e]);
            ev.visit_id = visit_id;
            double u = rng.uniform();
            if (u < c.numeric_value_prob) {
                ev.value = rng.lognormal(0.0, 1.0) * (1.0 + block[e] % 10);
            } else if (u < c.numeric_value_prob + c.categorical_value_prob) {
                ev.value = "c" + std::to_string(rng.bounded(
                                     static_cast<uint64_t>(c.categories_per_code)));
            }
            tl.events.push_back(std::move(ev));
        }
        emitted += static_cast<int64_t>(block.size());
        visit_blocks.push_back(std::move(block));
        ++visit_index;
    }
    return tl;
}

static std::vector<PatientTimeline> generate_corpus_impl(const SynthConfig& c, uint64_t seed,
                                                         bool parallel) {
    validate(c);
    std::vector<double> zipf_cum = zipf_cumulative(c.vocab_size, c.zipf_exponent);
    std::vector<PatientTimeline> corpus(static_cast<size_t>(c.n_patients));
    auto body = [&](size_t i) { corpus[i] = generate_patient(c, seed, i, zipf_cum); };
    if (parallel) parallel_for(corpus.size(), body);
    else serial_for(corpus.size(), body);
    return corpus;
}

std::vector<PatientTimeline> generate_corpus(const SynthConfig& c, uint64_t seed) {
    return generate_corpus_impl(c, seed, true);
}

std::vector<PatientTimeline> generate_corpus_serial(const SynthConfig& c, uint64_t seed) {
    return generate_corpus_impl(c, seed, false);
}

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// [0,1] rank of each patient by metric value, ties broken by patient_id so
// the ranking is a total order.
std::unordered_map<std::string, double> metric_ranks(
    std::vector<std::pair<std::string, double>> values) {
    std::sort(values.begin(), values.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second < b.second;
        return a.first < b.first;
    });
    std::unordered_map<std::string, double> ranks;
    size_t n = values.size();
    for (size_t i = 0; i < n; ++i)
        ranks[values[i].first] =
            n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
    return ranks;
}

}  // namespace

std::vector<TaskLabel> generate_labels(std::span<const PatientTimeline> corpus,
                                       const SynthConfig& c, uint64_t seed,
                                       std::vector<LabelGroundTruth>* truth) {
    validate(c);
    if (corpus.empty()) throw std::invalid_argument("generate_labels: empty corpus");
    const auto& lm = c.label;

    std::unordered_map<std::string, double> ranks;
    if (lm.noise_metric != "none") {
        std::vector<std::pair<std::string, double>> values;
        for (const auto& tl : corpus) {
            if (tl.events.size() < static_cast<size_t>(lm.min_events_for_label)) continue;
            if (lm.noise_metric == "rr1") {
                auto syms = code_symbols(tl);
                auto rr = repetition_rate(syms, 1);
                if (rr) values.emplace_back(tl.patient_id, *rr);
            } else {
                values.emplace_back(tl.patient_id, irregularity(tl).std_s);
            }
        }
        ranks = metric_ranks(std::move(values));
    }

    std::vector<std::string> risk_names;
    for (int rc : lm.risk_codes) risk_names.push_back(code_name(rc));

    std::vector<TaskLabel> labels;
    for (size_t i = 0; i < corpus.size(); ++i) {
        const PatientTimeline& tl = corpus[i];
        int64_t n = static_cast<int64_t>(tl.events.size());
        if (n < lm.min_events_for_label) continue;
        Rng rng(derive_seed(derive_seed(seed, kLabelDomain), i));

        double metric_rank = 0.0;
        if (lm.noise_metric != "none") {
            auto it = ranks.find(tl.patient_id);
            if (it == ranks.end()) continue;  // metric undefined for this patient
            metric_rank = it->second;
        }
        double sigma = lm.noise_base * (1.0 + lm.noise_metric_weight * metric_rank);

        for (int rep = 0; rep < lm.labels_per_patient; ++rep) {
            int64_t lo = static_cast<int64_t>(std::ceil(lm.pred_frac_min * (n - 1)));
            int64_t hi = static_cast<int64_t>(std::floor(lm.pred_frac_max * (n - 1)));
            if (hi < lo) hi = lo;
            int64_t j = rng.uniform_int(lo, hi);
            int64_t pred_time = tl.events[static_cast<size_t>(j)].time;

            double logit = lm.bias;
            for (size_t k = 0; k < risk_names.size(); ++k) {
                uint64_t count = 0;
                for (const Event& ev : tl.events) {
                    if (ev.time > pred_time) break;
                    if (ev.code == risk_names[k]) ++count;
                }
                logit += lm.weights[k] * std::log1p(static_cast<double>(count));
            }
            double noisy = sigma > 0 ? logit + sigma * rng.normal() : logit;
            bool y = noisy > 0;

            labels.push_back({tl.patient_id, pred_time, y, lm.task_name});
            if (truth) {
                LabelGroundTruth gt;
                gt.patient_id = tl.patient_id;
                gt.prediction_time = pred_time;
                gt.logit = logit;
                gt.noise_sigma = sigma;
                gt.p_true = sigma > 0 ? normal_cdf(logit / sigma) : (logit > 0 ? 1.0 : 0.0);
                truth->push_back(std::move(gt));
            }
        }
    }
    return labels;
}

// ---- config (de)serialization ----

namespace {

LogNormalSpec lognormal_from_json(const json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("log_mean") || !j.contains("log_sigma"))
        throw std::invalid_argument("synth config: " + where +
                                    " must be {\"log_mean\": x, \"log_sigma\": s}");
    return {j.at("log_mean").get<double>(), j.at("log_sigma").get<double>()};
}

json lognormal_to_json(const LogNormalSpec& s) {
    return json{{"log_mean", s.log_mean}, {"log_sigma", s.log_sigma}};
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

SynthConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("synth config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("synth config: root must be an object");

    static const std::unordered_set<std::string> known = {
        "n_patients", "vocab_size", "zipf_exponent", "events_per_patient", "min_events",
        "max_events", "mean_events_per_visit", "within_visit_gap_s", "between_visit_gap_days",
        "between_gap_sigma_range", "copy_forward_prob", "drift_rate", "drift_fraction",
        "drift_step", "active_set_size", "numeric_value_prob", "categorical_value_prob",
        "categories_per_code", "start_time_range", "label"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw std::invalid_argument("synth config: unknown key '" + it.key() + "'");

    SynthConfig c;
    read_field(j, "n_patients", c.n_patients);
    read_field(j, "vocab_size", c.vocab_size);
    read_field(j, "zipf_exponent", c.zipf_exponent);
    if (j.contains("events_per_patient"))
        c.events_per_patient = lognormal_from_json(j["events_per_patient"], "events_per_patient");
    read_field(j, "min_events", c.min_events);
    read_field(j, "max_events", c.max_events);
    read_field(j, "mean_events_per_visit", c.mean_events_per_visit);
    if (j.contains("within_visit_gap_s"))
        c.within_visit_gap_s = lognormal_from_json(j["within_visit_gap_s"], "within_visit_gap_s");
    if (j.contains("between_visit_gap_days"))
        c.between_visit_gap_days =
            lognormal_from_json(j["between_visit_gap_days"], "between_visit_gap_days");
    if (j.contains("between_gap_sigma_range")) {
        auto v = j["between_gap_sigma_range"].get<std::vector<double>>();
        if (v.size() != 2)
            throw std::invalid_argument("synth config: between_gap_sigma_range must be [min, max]");
        c.between_gap_sigma_min = v[0];
        c.between_gap_sigma_max = v[1];
    }
    if (j.contains("copy_forward_prob")) {
        const json& v = j["copy_forward_prob"];
        if (v.is_number()) {
            c.copy_forward_min = c.copy_forward_max = v.get<double>();
        } else {
            auto r = v.get<std::vector<double>>();
            if (r.size() != 2)
                throw std::invalid_argument(
                    "synth config: copy_forward_prob must be p or [min, max]");
            c.copy_forward_min = r[0];
            c.copy_forward_max = r[1];
        }
    }
    read_field(j, "drift_rate", c.drift_rate);
    read_field(j, "drift_fraction", c.drift_fraction);
    read_field(j, "drift_step", c.drift_step);
    read_field(j, "active_set_size", c.active_set_size);
    read_field(j, "numeric_value_prob", c.numeric_value_prob);
    read_field(j, "categorical_value_prob", c.categorical_value_prob);
    read_field(j, "categories_per_code", c.categories_per_code);
    if (j.contains("start_time_range")) {
        auto v = j["start_time_range"].get<std::vector<int64_t>>();
        if (v.size() != 2)
            throw std::invalid_argument("synth config: start_time_range must be [min, max]");
        c.start_time_min = v[0];
        c.start_time_max = v[1];
    }
    if (j.contains("label")) {
        const json& lj = j["label"];
        static const std::unordered_set<std::string> known_label = {
            "task_name", "risk_codes", "weights", "bias", "noise_base", "noise_metric",
            "noise_metric_weight", "pred_frac_range", "min_events_for_label",
            "labels_per_patient"};
        for (auto it = lj.begin(); it != lj.end(); ++it)
            if (!known_label.count(it.key()))
                throw std::invalid_argument("synth config: unknown label key '" + it.key() + "'");
        auto& l = c.label;
        read_field(lj, "task_name", l.task_name);
        read_field(lj, "risk_codes", l.risk_codes);
        read_field(lj, "weights", l.weights);
        read_field(lj, "bias", l.bias);
        read_field(lj, "noise_base", l.noise_base);
        read_field(lj, "noise_metric", l.noise_metric);
        read_field(lj, "noise_metric_weight", l.noise_metric_weight);
        if (lj.contains("pred_frac_range")) {
            auto v = lj["pred_frac_range"].get<std::vector<double>>();
            if (v.size() != 2)
                throw std::invalid_argument("synth config: pred_frac_range must be [min, max]");
            l.pred_frac_min = v[0];
            l.pred_frac_max = v[1];
        }
        read_field(lj, "min_events_for_label", l.min_events_for_label);
        read_field(lj, "labels_per_patient", l.labels_per_patient);
    }
    validate(c);
    return c;
}

std::string config_to_json(const SynthConfig& c) {
    json j;
    j["n_patients"] = c.n_patients;
    j["vocab_size"] = c.vocab_size;
    j["zipf_exponent"] = c.zipf_exponent;
    j["events_per_patient"] = lognormal_to_json(c.events_per_patient);
    j["min_events"] = c.min_events;
    j["max_events"] = c.max_events;
    j["mean_events_per_visit"] = c.mean_events_per_visit;
    j["within_visit_gap_s"] = lognormal_to_json(c.within_visit_gap_s);
    j["between_visit_gap_days"] = lognormal_to_json(c.between_visit_gap_days);
    j["between_gap_sigma_range"] = {c.between_gap_sigma_min, c.between_gap_sigma_max};
    j["copy_forward_prob"] = {c.copy_forward_min, c.copy_forward_max};
    j["drift_rate"] = c.drift_rate;
    j["drift_fraction"] = c.drift_fraction;
    j["drift_step"] = c.drift_step;
    j["active_set_size"] = c.active_set_size;
    j["numeric_value_prob"] = c.numeric_value_prob;
    j["categorical_value_prob"] = c.categorical_value_prob;
    j["categories_per_code"] = c.categories_per_code;
    j["start_time_range"] = {c.start_time_min, c.start_time_max};
    json lj;
    lj["task_name"] = c.label.task_name;
    lj["risk_codes"] = c.label.risk_codes;
    lj["weights"] = c.label.weights;
    lj["bias"] = c.label.bias;
    lj["noise_base"] = c.label.noise_base;
    lj["noise_metric"] = c.label.noise_metric;
    lj["noise_metric_weight"] = c.label.noise_metric_weight;
    lj["pred_frac_range"] = {c.label.pred_frac_min, c.label.pred_frac_max};
    lj["min_events_for_label"] = c.label.min_events_for_label;
    lj["labels_per_patient"] = c.label.labels_per_patient;
    j["label"] = std::move(lj);
    return j.dump(1);
}

}  // namespace ehrseq::synth
