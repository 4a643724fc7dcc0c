#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ehrseq/event_stream.hpp"
#include "ehrseq/ngram_lm.hpp"
#include "ehrseq/properties.hpp"
#include "ehrseq/tokenizer.hpp"

namespace ehrseq {

// ---- windowing and featurization ----

// Token ids at/before prediction_time, truncated to the most recent
// min(L, available) tokens. May be empty.
std::vector<int32_t> context_window(const TokenSequence& seq, int64_t prediction_time, int L);

struct FeatureVector {
    std::vector<double> values;
    std::string featurizer_id;
    bool empty_window = false;
};

// d = |V| vector of log(1 + count). Empty windows give the zero vector with
// the flag set, so cold-start patients stay evaluable.
FeatureVector featurize_bag(std::span<const int32_t> window, int32_t vocab_size);

// The model's next-token distribution given the window; the count-LM stand-in
// for a last-position frozen representation.
FeatureVector featurize_lm_conditional(std::span<const int32_t> window, const NGramModel& lm);

// External frozen embeddings, JSONL {"patient_id", "prediction_time", "vector"}.
struct PatientEmbedding {
    std::string patient_id;
    int64_t prediction_time = 0;
    std::vector<double> vector;
};
std::vector<PatientEmbedding> read_embeddings_jsonl(std::istream& in);
void write_embeddings_jsonl(std::ostream& out, const std::vector<PatientEmbedding>& rows);

// ---- sparse features and the logistic head ----

struct FeatureMatrix {
    size_t n_rows = 0;
    size_t n_cols = 0;
    std::vector<size_t> row_ptr{0};
    std::vector<int32_t> col;
    std::vector<double> val;

    void add_dense_row(std::span<const double> x);
    void add_sparse_row(std::span<const std::pair<int32_t, double>> entries);  // cols ascending
};

struct LogisticHead {
    std::vector<double> weights;
    double bias = 0;
    double l2_lambda = 0;

    double predict(std::span<const double> x) const;
    std::vector<double> predict(const FeatureMatrix& X) const;
};

// Mean log-loss + lambda * ||w||^2 (bias unpenalized) and its gradient;
// exposed for finite-difference verification.
double logistic_loss(const FeatureMatrix& X, std::span<const uint8_t> y,
                     std::span<const double> w, double bias, double lambda);
void logistic_gradient(const FeatureMatrix& X, std::span<const uint8_t> y,
                       std::span<const double> w, double bias, double lambda,
                       std::span<double> grad_w, double& grad_b);

struct TrainOptions {
    double grad_tol = 1e-7;
    int max_iters = 10000;
};

struct TrainResult {
    LogisticHead head;
    double val_auroc = 0;
    int iters = 0;
    double grad_norm = 0;
};

// Full-batch gradient descent with backtracking line search per lambda in the
// grid; lambda selected by validation AUROC, ties going to the larger lambda.
TrainResult train_head(const FeatureMatrix& Xtr, std::span<const uint8_t> ytr,
                       const FeatureMatrix& Xval, std::span<const uint8_t> yval,
                       std::span<const double> l2_grid, const TrainOptions& opts = {});

inline const std::vector<double>& default_l2_grid() {
    static const std::vector<double> grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
    return grid;
}

// ---- metrics ----

// Mann-Whitney AUC via average ranks; ties count half. Throws when only one
// class is present.
double auroc(std::span<const double> scores, std::span<const uint8_t> labels);
double brier(std::span<const double> probs, std::span<const uint8_t> labels);

enum class Metric { Auroc, Brier };

struct MetricCi {
    double lo = 0, hi = 0;
};

struct BootstrapCis {
    MetricCi auroc_ci, brier_ci;
    int n_resamples = 0;
    int auroc_excluded = 0;  // single-class resamples where AUROC is undefined
};

// Percentile CIs from n seeded resamples; resample r uses the RNG stream
// derived from (seed, r), so parallel and sequential runs agree bit-for-bit.
BootstrapCis bootstrap_cis(std::span<const double> probs, std::span<const uint8_t> labels,
                           int n_resamples, uint64_t seed);

struct BootstrapComparison {
    double point_a = 0, point_b = 0;
    MetricCi ci_a, ci_b, diff_ci;
    double win_rate = 0;       // strict wins for model b over valid resamples
    bool significant = false;  // diff CI excludes 0
    int n_resamples = 0;
    int n_excluded = 0;
};

// Paired bootstrap: each resample's indices are shared between both models.
BootstrapComparison bootstrap_compare(std::span<const double> pred_a,
                                      std::span<const double> pred_b,
                                      std::span<const uint8_t> labels, Metric metric,
                                      int n_resamples, uint64_t seed);
BootstrapComparison bootstrap_compare_serial(std::span<const double> pred_a,
                                             std::span<const double> pred_b,
                                             std::span<const uint8_t> labels, Metric metric,
                                             int n_resamples, uint64_t seed);

// ---- reports ----

struct EvalReport {
    std::string task;
    std::string model_id;
    double auroc = 0, brier = 0;
    MetricCi auroc_ci, brier_ci;
    int n_test = 0;
    double chosen_l2 = 0;
    std::optional<std::array<double, 4>> quartile_brier;
    std::optional<double> win_rate;
    std::string to_json_string() const;
};

// ---- quartile-stratified Brier ----

struct TaskPredictions {
    std::string task;
    std::vector<std::string> patient_ids;
    std::vector<double> probs;
    std::vector<uint8_t> labels;
};

struct StratifiedBrierTable {
    std::vector<std::string> tasks;
    std::vector<std::array<double, 4>> task_cells;     // NaN for excluded cells
    std::vector<std::array<uint64_t, 4>> task_counts;  // examples per cell
    std::array<double, 4> overall{};                   // unweighted mean over defined tasks
    std::array<int, 4> overall_task_counts{};
    std::vector<std::string> excluded;  // "task/Qn" cells with no examples
    std::string to_json_string() const;
};

// quartiles[i] pairs with tasks[i]; every labeled patient must have a
// quartile in its task's assignment.
StratifiedBrierTable stratified_brier(std::span<const TaskPredictions> tasks,
                                      std::span<const QuartileAssignment> quartiles);

// ---- task assembly, few-shot, zero-shot ----

struct TaskData {
    std::string task;
    FeatureMatrix Xtr, Xval, Xtest;
    std::vector<uint8_t> ytr, yval, ytest;
    std::vector<TaskLabel> test_labels;  // row-parallel with Xtest
};

using Featurizer = std::function<FeatureVector(const TokenSequence* seq, const TaskLabel& label)>;

Featurizer make_bag_featurizer(int32_t vocab_size, int context_len);
Featurizer make_lm_featurizer(const NGramModel& lm, int context_len);
Featurizer make_external_featurizer(const std::vector<PatientEmbedding>& embeddings);

// Routes each label's features into the split holding its patient. Labels for
// patients outside every split are dropped; a missing token sequence
// featurizes as an empty window.
TaskData assemble_task_data(const std::vector<TokenSequence>& seqs,
                            std::span<const TaskLabel> labels, const DatasetSplit& split,
                            const Featurizer& featurize);

struct EvaluateOptions {
    std::vector<double> l2_grid = default_l2_grid();
    TrainOptions train;
    int bootstrap_n = 1000;
    uint64_t seed = 0;
    std::string model_id = "model";
};

struct EvaluationOutput {
    EvalReport report;
    LogisticHead head;
    std::vector<double> test_probs;
};

EvaluationOutput evaluate_task(const TaskData& data, const EvaluateOptions& opts);

// k-shot subsample of a split: all-or-sampled k positives (resampled with
// replacement when fewer than k exist) plus k negatives under the same rule.
std::vector<size_t> sample_few_shot(std::span<const uint8_t> y, int k, Rng& rng);

EvaluationOutput few_shot_evaluate(const TaskData& data, int k, uint64_t seed,
                                   const EvaluateOptions& opts);

// ---- zero-shot generation probing ----

struct GenerationHorizon {
    enum class Unit { Tokens, Days };
    Unit unit = Unit::Tokens;
    int64_t budget = 0;
    int max_steps = 4096;  // hard cap for day-denominated horizons
    std::unordered_map<int32_t, int> att_days;
};

std::unordered_map<int32_t, int> att_day_map(const Vocabulary& vocab);

// Fraction of n_timelines sampled continuations that contain a positive token
// within the horizon.
double zero_shot_prob(const NGramModel& lm, std::span<const int32_t> window,
                      std::span<const int32_t> positive_tokens, const GenerationHorizon& horizon,
                      int n_timelines, uint64_t seed, double temperature = 1.0);

// ---- prediction interchange for model comparison ----

struct PredictionRow {
    std::string patient_id;
    int64_t prediction_time = 0;
    std::string task;
    uint8_t label = 0;
    double prob = 0;
};

void write_predictions_csv(std::ostream& out, const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> read_predictions_csv(std::istream& in);

}  // namespace ehrseq
