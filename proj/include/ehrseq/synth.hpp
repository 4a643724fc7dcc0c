#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ehrseq/event_stream.hpp"

namespace ehrseq::synth {

struct LogNormalSpec {
    double log_mean = 0;
    double log_sigma = 0;
};

// Knobs for corpus shape (heavy-tailed event counts, visit structure,
// irregular gaps), repetition (copy-forward), progression drift, and the
// label-generating model. Defaults target a median near 121 and mean near
// 1,364 events per patient.
struct SynthConfig {
    int n_patients = 100;
    int vocab_size = 1000;
    double zipf_exponent = 1.1;

    LogNormalSpec events_per_patient{4.795790545596741 /* ln 121 */, 2.201117323270598};
    int min_events = 2;
    int max_events = 0;  // 0 = uncapped

    double mean_events_per_visit = 4.0;
    LogNormalSpec within_visit_gap_s{std::log(120.0), 0.8};
    LogNormalSpec between_visit_gap_days{std::log(30.0), 1.0};
    // When max > min, each patient draws its own between-visit log-sigma
    // uniformly from this range (irregularity heterogeneity across patients).
    double between_gap_sigma_min = 0.0;
    double between_gap_sigma_max = 0.0;

    // Per-patient copy-forward probability drawn from [min, max]: a visit
    // re-emits a uniformly chosen earlier visit's code block.
    double copy_forward_min = 0.0;
    double copy_forward_max = 0.0;

    // Progression drift: before a visit, with probability drift_rate the
    // patient's active code set rotates; each rotation advances the Zipf rank
    // offset by drift_step and replaces drift_fraction of the set.
    double drift_rate = 0.0;
    double drift_fraction = 0.25;
    int drift_step = 0;
    int active_set_size = 32;

    double numeric_value_prob = 0.2;
    double categorical_value_prob = 0.1;
    int categories_per_code = 5;

    int64_t start_time_min = 946684800;   // 2000-01-01T00:00:00Z
    int64_t start_time_max = 1262304000;  // 2010-01-01T00:00:00Z

    struct LabelModel {
        std::string task_name = "risk";
        std::vector<int> risk_codes;  // ranks into the synthetic code table
        std::vector<double> weights;
        double bias = 0.0;
        double noise_base = 0.0;
        // Noise sigma = noise_base * (1 + noise_metric_weight * metric_rank)
        // with metric_rank the patient's [0,1] rank by rr1 or irr_std.
        std::string noise_metric = "none";  // none | rr1 | irr_std
        double noise_metric_weight = 0.0;
        double pred_frac_min = 0.5;  // prediction index as a fraction of timeline length
        double pred_frac_max = 0.9;
        int min_events_for_label = 4;
        int labels_per_patient = 1;
    } label;
};

std::string code_name(int rank);

SynthConfig parse_config(const std::string& json_text);
std::string config_to_json(const SynthConfig& config);
void validate(const SynthConfig& config);

// Deterministic given seed; per-patient RNG streams are keyed by
// (seed, patient index) so parallel generation matches serial exactly.
std::vector<PatientTimeline> generate_corpus(const SynthConfig& config, uint64_t seed);
std::vector<PatientTimeline> generate_corpus_serial(const SynthConfig& config, uint64_t seed);
PatientTimeline generate_patient(const SynthConfig& config, uint64_t seed, size_t index,
                                 const std::vector<double>& zipf_cum);

std::vector<double> zipf_cumulative(int vocab_size, double exponent);

struct LabelGroundTruth {
    std::string patient_id;
    int64_t prediction_time = 0;
    double logit = 0;
    double noise_sigma = 0;
    double p_true = 0;  // P(label = 1) under the generating model
};

std::vector<TaskLabel> generate_labels(std::span<const PatientTimeline> corpus,
                                       const SynthConfig& config, uint64_t seed,
                                       std::vector<LabelGroundTruth>* truth = nullptr);

}  // namespace ehrseq::synth
