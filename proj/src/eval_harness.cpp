#include "ehrseq/eval_harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "ehrseq/io.hpp"
#include "ehrseq/parallel.hpp"
#include "ehrseq/percentile.hpp"

namespace ehrseq {

using nlohmann::json;

// ---- windowing and featurization ----

std::vector<int32_t> context_window(const TokenSequence& seq, int64_t prediction_time, int L) {
    if (L < 1) throw std::invalid_argument("context_window: L must be >= 1");
    // source_times are nondecreasing, so the visible prefix is contiguous.
    auto end = std::upper_bound(seq.source_times.begin(), seq.source_times.end(), prediction_time);
    size_t n_visible = static_cast<size_t>(end - seq.source_times.begin());
    size_t take = std::min(n_visible, static_cast<size_t>(L));
    return std::vector<int32_t>(seq.token_ids.begin() + (n_visible - take),
                                seq.token_ids.begin() + n_visible);
}

FeatureVector featurize_bag(std::span<const int32_t> window, int32_t vocab_size) {
    FeatureVector fv;
    fv.featurizer_id = "bag";
    fv.values.assign(static_cast<size_t>(vocab_size), 0.0);
    fv.empty_window = window.empty();
    if (window.empty()) return fv;
    std::vector<uint32_t> counts(static_cast<size_t>(vocab_size), 0);
    for (int32_t t : window) {
        if (t < 0 || t >= vocab_size)
            throw std::invalid_argument("featurize_bag: token id out of range");
        ++counts[static_cast<size_t>(t)];
    }
    for (size_t i = 0; i < counts.size(); ++i)
        if (counts[i]) fv.values[i] = std::log1p(static_cast<double>(counts[i]));
    return fv;
}

FeatureVector featurize_lm_conditional(std::span<const int32_t> window, const NGramModel& lm) {
    FeatureVector fv;
    fv.featurizer_id = "lm-conditional";
    fv.empty_window = window.empty();
    if (window.empty()) {
        fv.values.assign(static_cast<size_t>(lm.params().vocab_size), 0.0);
        return fv;
    }
    fv.values = lm.conditional(window);
    return fv;
}

std::vector<PatientEmbedding> read_embeddings_jsonl(std::istream& in) {
    std::vector<PatientEmbedding> rows;
    std::string line;
    size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            PatientEmbedding e;
            e.patient_id = j.at("patient_id").get<std::string>();
            e.prediction_time = j.at("prediction_time").get<int64_t>();
            e.vector = j.at("vector").get<std::vector<double>>();
            rows.push_back(std::move(e));
        } catch (const std::exception& ex) {
            throw std::runtime_error("row " + std::to_string(row) + ": " + ex.what());
        }
    }
    return rows;
}

void write_embeddings_jsonl(std::ostream& out, const std::vector<PatientEmbedding>& rows) {
    for (const auto& e : rows) {
        json j;
        j["patient_id"] = e.patient_id;
        j["prediction_time"] = e.prediction_time;
        j["vector"] = e.vector;
        out << j.dump() << '\n';
    }
}

// ---- sparse features ----

void FeatureMatrix::add_dense_row(std::span<const double> x) {
    if (n_rows == 0 && n_cols == 0) n_cols = x.size();
    if (x.size() != n_cols) throw std::invalid_argument("feature dimension mismatch");
    for (size_t j = 0; j < x.size(); ++j) {
        if (!std::isfinite(x[j])) throw std::invalid_argument("non-finite feature value");
        if (x[j] != 0.0) {
            col.push_back(static_cast<int32_t>(j));
            val.push_back(x[j]);
        }
    }
    row_ptr.push_back(col.size());
    ++n_rows;
}

void FeatureMatrix::add_sparse_row(std::span<const std::pair<int32_t, double>> entries) {
    int32_t prev = -1;
    for (const auto& [j, v] : entries) {
        if (j <= prev || j < 0 || static_cast<size_t>(j) >= n_cols)
            throw std::invalid_argument("sparse row columns must be ascending and in range");
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite feature value");
        prev = j;
        if (v != 0.0) {
            col.push_back(j);
            val.push_back(v);
        }
    }
    row_ptr.push_back(col.size());
    ++n_rows;
}

namespace {

FeatureMatrix subset_rows(const FeatureMatrix& X, std::span<const size_t> rows) {
    FeatureMatrix out;
    out.n_cols = X.n_cols;
    for (size_t r : rows) {
        for (size_t k = X.row_ptr[r]; k < X.row_ptr[r + 1]; ++k) {
            out.col.push_back(X.col[k]);
            out.val.push_back(X.val[k]);
        }
        out.row_ptr.push_back(out.col.size());
        ++out.n_rows;
    }
    return out;
}

double sigmoid(double s) {
    if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
    double e = std::exp(s);
    return e / (1.0 + e);
}

double softplus(double x) {  // log(1 + exp(x)), overflow-safe
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

std::vector<double> row_scores(const FeatureMatrix& X, std::span<const double> w, double bias) {
    std::vector<double> s(X.n_rows);
    parallel_for(X.n_rows, [&](size_t i) {
        double acc = bias;
        for (size_t k = X.row_ptr[i]; k < X.row_ptr[i + 1]; ++k)
            acc += X.val[k] * w[static_cast<size_t>(X.col[k])];
        s[i] = acc;
    });
    return s;
}

// Column-major copy for thread-count-invariant gradient accumulation: each
// column's contributions are summed in ascending row order no matter how the
// columns are scheduled.
struct CscMatrix {
    size_t n_rows = 0, n_cols = 0;
    std::vector<size_t> col_ptr;
    std::vector<int32_t> row;
    std::vector<double> val;

    static CscMatrix from_csr(const FeatureMatrix& X) {
        CscMatrix m;
        m.n_rows = X.n_rows;
        m.n_cols = X.n_cols;
        m.col_ptr.assign(X.n_cols + 1, 0);
        for (int32_t c : X.col) ++m.col_ptr[static_cast<size_t>(c) + 1];
        for (size_t j = 0; j < X.n_cols; ++j) m.col_ptr[j + 1] += m.col_ptr[j];
        m.row.resize(X.col.size());
        m.val.resize(X.col.size());
        std::vector<size_t> fill(m.col_ptr.begin(), m.col_ptr.end() - 1);
        for (size_t i = 0; i < X.n_rows; ++i)
            for (size_t k = X.row_ptr[i]; k < X.row_ptr[i + 1]; ++k) {
                size_t dst = fill[static_cast<size_t>(X.col[k])]++;
                m.row[dst] = static_cast<int32_t>(i);
                m.val[dst] = X.val[k];
            }
        return m;
    }
};

}  // namespace

double LogisticHead::predict(std::span<const double> x) const {
    if (x.size() != weights.size()) throw std::invalid_argument("feature dimension mismatch");
    double s = bias;
    for (size_t j = 0; j < x.size(); ++j) s += x[j] * weights[j];
    return sigmoid(s);
}

std::vector<double> LogisticHead::predict(const FeatureMatrix& X) const {
    if (X.n_cols != weights.size()) throw std::invalid_argument("feature dimension mismatch");
    std::vector<double> p = row_scores(X, weights, bias);
    for (double& v : p) v = sigmoid(v);
    return p;
}

double logistic_loss(const FeatureMatrix& X, std::span<const uint8_t> y,
                     std::span<const double> w, double bias, double lambda) {
    if (X.n_rows != y.size() || X.n_cols != w.size())
        throw std::invalid_argument("logistic_loss: shape mismatch");
    std::vector<double> s = row_scores(X, w, bias);
    double loss = 0;
    for (size_t i = 0; i < s.size(); ++i) loss += y[i] ? softplus(-s[i]) : softplus(s[i]);
    loss /= static_cast<double>(std::max<size_t>(s.size(), 1));
    double reg = 0;
    for (double wj : w) reg += wj * wj;
    return loss + lambda * reg;
}

void logistic_gradient(const FeatureMatrix& X, std::span<const uint8_t> y,
                       std::span<const double> w, double bias, double lambda,
                       std::span<double> grad_w, double& grad_b) {
    if (X.n_rows != y.size() || X.n_cols != w.size() || grad_w.size() != w.size())
        throw std::invalid_argument("logistic_gradient: shape mismatch");
    std::vector<double> s = row_scores(X, w, bias);
    const double inv_n = 1.0 / static_cast<double>(std::max<size_t>(X.n_rows, 1));
    std::fill(grad_w.begin(), grad_w.end(), 0.0);
    grad_b = 0;
    for (size_t i = 0; i < X.n_rows; ++i) {
        double delta = sigmoid(s[i]) - static_cast<double>(y[i]);
        grad_b += delta;
        for (size_t k = X.row_ptr[i]; k < X.row_ptr[i + 1]; ++k)
            grad_w[static_cast<size_t>(X.col[k])] += X.val[k] * delta;
    }
    grad_b *= inv_n;
    for (size_t j = 0; j < grad_w.size(); ++j)
        grad_w[j] = grad_w[j] * inv_n + 2.0 * lambda * w[j];
}

namespace {

struct GdState {
    std::vector<double> w;
    double b = 0;
    double loss = 0;
    int iters = 0;
    double grad_norm = 0;
};

// Full-batch descent, Barzilai-Borwein initial step with Armijo backtracking.
// Gradients accumulate column-wise over the CSC copy in fixed row order, so
// the result is independent of thread count.
GdState minimize_logistic(const FeatureMatrix& X, const CscMatrix& Xc, std::span<const uint8_t> y,
                          double lambda, const TrainOptions& opts) {
    const size_t d = X.n_cols;
    const size_t n = X.n_rows;
    const double inv_n = 1.0 / static_cast<double>(std::max<size_t>(n, 1));

    GdState st;
    st.w.assign(d, 0.0);

    std::vector<double> delta(n);
    auto compute_loss = [&](std::span<const double> w, double b) {
        std::vector<double> s = row_scores(X, w, b);
        double loss = 0;
        for (size_t i = 0; i < n; ++i) loss += y[i] ? softplus(-s[i]) : softplus(s[i]);
        loss *= inv_n;
        double reg = 0;
        for (double wj : w) reg += wj * wj;
        return loss + lambda * reg;
    };
    auto compute_grad = [&](std::span<const double> w, double b, std::vector<double>& gw,
                            double& gb) {
        std::vector<double> s = row_scores(X, w, b);
        parallel_for(n, [&](size_t i) { delta[i] = sigmoid(s[i]) - static_cast<double>(y[i]); });
        gw.assign(d, 0.0);
        parallel_for(d, [&](size_t j) {
            double acc = 0;
            for (size_t k = Xc.col_ptr[j]; k < Xc.col_ptr[j + 1]; ++k)
                acc += Xc.val[k] * delta[static_cast<size_t>(Xc.row[k])];
            gw[j] = acc * inv_n + 2.0 * lambda * w[j];
        });
        gb = 0;
        for (size_t i = 0; i < n; ++i) gb += delta[i];
        gb *= inv_n;
    };

    std::vector<double> g(d), g_new(d), w_new(d);
    double gb = 0, gb_new = 0;
    st.loss = compute_loss(st.w, st.b);
    compute_grad(st.w, st.b, g, gb);

    double t = 1.0;
    std::vector<double> prev_dx;
    double prev_dxb = 0;
    bool have_prev = false;
    std::vector<double> prev_dg;
    double prev_dgb = 0;

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        double gnorm_sq = gb * gb;
        for (double gj : g) gnorm_sq += gj * gj;
        st.grad_norm = std::sqrt(gnorm_sq);
        st.iters = iter;
        if (st.grad_norm <= opts.grad_tol) return st;

        if (have_prev) {
            double dx_dg = prev_dxb * prev_dgb, dx_dx = prev_dxb * prev_dxb;
            for (size_t j = 0; j < d; ++j) {
                dx_dg += prev_dx[j] * prev_dg[j];
                dx_dx += prev_dx[j] * prev_dx[j];
            }
            t = dx_dg > 0 ? dx_dx / dx_dg : t * 2.0;
            t = std::clamp(t, 1e-12, 1e12);
        }

        double f_new = 0;
        for (;;) {
            for (size_t j = 0; j < d; ++j) w_new[j] = st.w[j] - t * g[j];
            double b_new = st.b - t * gb;
            f_new = compute_loss(w_new, b_new);
            if (f_new <= st.loss - 1e-4 * t * gnorm_sq || t < 1e-18) {
                compute_grad(w_new, b_new, g_new, gb_new);
                prev_dx.resize(d);
                prev_dg.resize(d);
                for (size_t j = 0; j < d; ++j) {
                    prev_dx[j] = w_new[j] - st.w[j];
                    prev_dg[j] = g_new[j] - g[j];
                }
                prev_dxb = b_new - st.b;
                prev_dgb = gb_new - gb;
                have_prev = true;
                st.w.swap(w_new);
                st.b = b_new;
                st.loss = f_new;
                g.swap(g_new);
                gb = gb_new;
                break;
            }
            t *= 0.5;
        }
        if (t < 1e-18) break;  // step underflow: no further progress possible
    }
    double gnorm_sq = gb * gb;
    for (double gj : g) gnorm_sq += gj * gj;
    st.grad_norm = std::sqrt(gnorm_sq);
    st.iters = opts.max_iters;
    return st;
}

double mean_log_loss(std::span<const double> probs, std::span<const uint8_t> labels) {
    double loss = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        double p = std::clamp(probs[i], 1e-15, 1.0 - 1e-15);
        loss -= labels[i] ? std::log(p) : std::log1p(-p);
    }
    return loss / static_cast<double>(std::max<size_t>(probs.size(), 1));
}

}  // namespace

TrainResult train_head(const FeatureMatrix& Xtr, std::span<const uint8_t> ytr,
                       const FeatureMatrix& Xval, std::span<const uint8_t> yval,
                       std::span<const double> l2_grid, const TrainOptions& opts) {
    if (Xtr.n_rows != ytr.size() || Xval.n_rows != yval.size())
        throw std::invalid_argument("train_head: label/row count mismatch");
    if (Xtr.n_rows == 0) throw std::invalid_argument("train_head: empty training set");
    if (l2_grid.empty()) throw std::invalid_argument("train_head: empty l2 grid");
    bool has_pos = false, has_neg = false;
    for (uint8_t yi : ytr) (yi ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw std::invalid_argument("train_head: training set must contain both classes");

    bool val_has_pos = false, val_has_neg = false;
    for (uint8_t yi : yval) (yi ? val_has_pos : val_has_neg) = true;
    // A single-class validation set cannot rank by AUROC; fall back to
    // validation log-loss so degenerate splits stay trainable.
    const bool select_by_auroc = val_has_pos && val_has_neg;

    std::vector<double> grid(l2_grid.begin(), l2_grid.end());
    std::sort(grid.begin(), grid.end());

    CscMatrix Xc = CscMatrix::from_csr(Xtr);
    TrainResult best;
    double best_score = -std::numeric_limits<double>::infinity();
    bool first = true;
    for (double lambda : grid) {
        if (lambda < 0) throw std::invalid_argument("l2 lambda must be >= 0");
        GdState st = minimize_logistic(Xtr, Xc, ytr, lambda, opts);
        LogisticHead head{st.w, st.b, lambda};
        std::vector<double> val_probs = head.predict(Xval);
        double score = Xval.n_rows == 0
                           ? 0.0
                           : (select_by_auroc ? auroc(val_probs, yval)
                                              : -mean_log_loss(val_probs, yval));
        // >= so equal scores promote the larger lambda (grid is ascending).
        if (first || score >= best_score) {
            best_score = score;
            best.head = std::move(head);
            best.val_auroc = select_by_auroc && Xval.n_rows > 0 ? score : 0.0;
            best.iters = st.iters;
            best.grad_norm = st.grad_norm;
            first = false;
        }
    }
    return best;
}

// ---- metrics ----

double auroc(std::span<const double> scores, std::span<const uint8_t> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
    size_t n = scores.size();
    size_t n_pos = 0;
    for (uint8_t y : labels) n_pos += y ? 1 : 0;
    size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw std::invalid_argument("auroc undefined: only one class present");

    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tie groups; U = R_pos - n_pos(n_pos+1)/2.
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k)
            if (labels[idx[k]]) rank_sum_pos += avg_rank;
        i = j;
    }
    double u = rank_sum_pos -
               0.5 * static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double brier(std::span<const double> probs, std::span<const uint8_t> labels) {
    if (probs.size() != labels.size()) throw std::invalid_argument("brier: size mismatch");
    if (probs.empty()) throw std::invalid_argument("brier: empty input");
    double sum = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        if (!(probs[i] >= 0.0 && probs[i] <= 1.0))
            throw std::invalid_argument("brier: probability out of [0,1]");
        double d = probs[i] - static_cast<double>(labels[i]);
        sum += d * d;
    }
    return sum / static_cast<double>(probs.size());
}

// ---- bootstrap ----

namespace {

MetricCi percentile_ci(std::vector<double> values) {
    if (values.empty()) {
        double nan = std::numeric_limits<double>::quiet_NaN();
        return {nan, nan};
    }
    std::sort(values.begin(), values.end());
    return {percentile_sorted(values, 2.5), percentile_sorted(values, 97.5)};
}

struct ResamplePair {
    double a = 0, b = 0;
    bool valid = true;
};

template <typename MetricFn>
void run_resamples(size_t n_examples, int n_resamples, uint64_t seed, bool parallel,
                   const MetricFn& metric_fn, std::vector<ResamplePair>& out) {
    out.assign(static_cast<size_t>(n_resamples), {});
    auto body = [&](size_t r) {
        Rng rng(derive_seed(seed, r));
        std::vector<size_t> idx(n_examples);
        for (size_t i = 0; i < n_examples; ++i) idx[i] = rng.bounded(n_examples);
        out[r] = metric_fn(idx);
    };
    if (parallel) parallel_for(static_cast<size_t>(n_resamples), body);
    else serial_for(static_cast<size_t>(n_resamples), body);
}

}  // namespace

BootstrapCis bootstrap_cis(std::span<const double> probs, std::span<const uint8_t> labels,
                           int n_resamples, uint64_t seed) {
    if (probs.size() != labels.size() || probs.empty())
        throw std::invalid_argument("bootstrap_cis: invalid inputs");
    if (n_resamples < 1) throw std::invalid_argument("bootstrap_cis: n_resamples must be >= 1");
    brier(probs, labels);  // validates probability range before the parallel region

    struct Draw {
        double auc = 0, br = 0;
        bool auc_valid = false;
    };
    std::vector<Draw> draws(static_cast<size_t>(n_resamples));
    parallel_for(static_cast<size_t>(n_resamples), [&](size_t r) {
        Rng rng(derive_seed(seed, r));
        size_t n = probs.size();
        std::vector<double> p(n);
        std::vector<uint8_t> y(n);
        size_t n_pos = 0;
        for (size_t i = 0; i < n; ++i) {
            size_t k = rng.bounded(n);
            p[i] = probs[k];
            y[i] = labels[k];
            n_pos += y[i] ? 1 : 0;
        }
        draws[r].br = brier(p, y);
        if (n_pos > 0 && n_pos < n) {
            draws[r].auc = auroc(p, y);
            draws[r].auc_valid = true;
        }
    });

    BootstrapCis out;
    out.n_resamples = n_resamples;
    std::vector<double> aucs, brs;
    for (const Draw& d : draws) {
        brs.push_back(d.br);
        if (d.auc_valid) aucs.push_back(d.auc);
        else ++out.auroc_excluded;
    }
    out.auroc_ci = percentile_ci(std::move(aucs));
    out.brier_ci = percentile_ci(std::move(brs));
    return out;
}

static BootstrapComparison bootstrap_compare_impl(std::span<const double> pred_a,
                                                  std::span<const double> pred_b,
                                                  std::span<const uint8_t> labels, Metric metric,
                                                  int n_resamples, uint64_t seed, bool parallel) {
    if (pred_a.size() != labels.size() || pred_b.size() != labels.size())
        throw std::invalid_argument("bootstrap_compare: paired inputs must have equal length");
    if (labels.empty()) throw std::invalid_argument("bootstrap_compare: empty test set");
    if (n_resamples < 1) throw std::invalid_argument("bootstrap_compare: n_resamples must be >= 1");

    auto point = [&](std::span<const double> p) {
        return metric == Metric::Auroc ? auroc(p, labels) : brier(p, labels);
    };
    // Point estimates first: they validate the inputs (class presence,
    // probability range) before any parallel resampling starts.
    const double point_a = point(pred_a);
    const double point_b = point(pred_b);

    std::vector<ResamplePair> pairs;
    run_resamples(
        labels.size(), n_resamples, seed, parallel,
        [&](const std::vector<size_t>& idx) {
            size_t n = idx.size();
            std::vector<double> pa(n), pb(n);
            std::vector<uint8_t> y(n);
            size_t n_pos = 0;
            for (size_t i = 0; i < n; ++i) {
                pa[i] = pred_a[idx[i]];
                pb[i] = pred_b[idx[i]];
                y[i] = labels[idx[i]];
                n_pos += y[i] ? 1 : 0;
            }
            ResamplePair rp;
            if (metric == Metric::Auroc) {
                if (n_pos == 0 || n_pos == n) {
                    rp.valid = false;
                    return rp;
                }
                rp.a = auroc(pa, y);
                rp.b = auroc(pb, y);
            } else {
                rp.a = brier(pa, y);
                rp.b = brier(pb, y);
            }
            return rp;
        },
        pairs);

    BootstrapComparison out;
    out.point_a = point_a;
    out.point_b = point_b;
    out.n_resamples = n_resamples;
    std::vector<double> as, bs, diffs;
    size_t wins = 0, valid = 0;
    for (const ResamplePair& rp : pairs) {
        if (!rp.valid) {
            ++out.n_excluded;
            continue;
        }
        ++valid;
        as.push_back(rp.a);
        bs.push_back(rp.b);
        diffs.push_back(rp.b - rp.a);
        bool b_better = metric == Metric::Auroc ? rp.b > rp.a : rp.b < rp.a;
        if (b_better) ++wins;
    }
    out.ci_a = percentile_ci(std::move(as));
    out.ci_b = percentile_ci(std::move(bs));
    out.diff_ci = percentile_ci(std::move(diffs));
    out.win_rate = valid ? static_cast<double>(wins) / static_cast<double>(valid) : 0.0;
    out.significant = valid > 0 && (out.diff_ci.lo > 0.0 || out.diff_ci.hi < 0.0);
    return out;
}

BootstrapComparison bootstrap_compare(std::span<const double> pred_a,
                                      std::span<const double> pred_b,
                                      std::span<const uint8_t> labels, Metric metric,
                                      int n_resamples, uint64_t seed) {
    return bootstrap_compare_impl(pred_a, pred_b, labels, metric, n_resamples, seed, true);
}

BootstrapComparison bootstrap_compare_serial(std::span<const double> pred_a,
                                             std::span<const double> pred_b,
                                             std::span<const uint8_t> labels, Metric metric,
                                             int n_resamples, uint64_t seed) {
    return bootstrap_compare_impl(pred_a, pred_b, labels, metric, n_resamples, seed, false);
}

// ---- reports ----

std::string EvalReport::to_json_string() const {
    json j;
    j["task"] = task;
    j["model_id"] = model_id;
    j["auroc"] = auroc;
    j["brier"] = brier;
    j["auroc_ci"] = {auroc_ci.lo, auroc_ci.hi};
    j["brier_ci"] = {brier_ci.lo, brier_ci.hi};
    j["n_test"] = n_test;
    j["chosen_l2"] = chosen_l2;
    if (quartile_brier) j["quartile_brier"] = *quartile_brier;
    if (win_rate) j["win_rate"] = *win_rate;
    return j.dump(1);
}

// ---- quartile-stratified Brier ----

StratifiedBrierTable stratified_brier(std::span<const TaskPredictions> tasks,
                                      std::span<const QuartileAssignment> quartiles) {
    if (tasks.size() != quartiles.size())
        throw std::invalid_argument("stratified_brier: one quartile assignment per task");
    StratifiedBrierTable table;
    std::array<double, 4> overall_sum{};
    for (size_t t = 0; t < tasks.size(); ++t) {
        const TaskPredictions& tp = tasks[t];
        if (tp.probs.size() != tp.labels.size() || tp.probs.size() != tp.patient_ids.size())
            throw std::invalid_argument("stratified_brier: ragged task predictions");
        std::array<double, 4> sum{};
        std::array<uint64_t, 4> cnt{};
        for (size_t i = 0; i < tp.probs.size(); ++i) {
            int q = quartiles[t].quartile_of(tp.patient_ids[i]);
            if (q < 0)
                throw std::invalid_argument("stratified_brier: patient " + tp.patient_ids[i] +
                                            " has no quartile in task " + tp.task);
            double d = tp.probs[i] - static_cast<double>(tp.labels[i]);
            sum[static_cast<size_t>(q)] += d * d;
            ++cnt[static_cast<size_t>(q)];
        }
        std::array<double, 4> cells{};
        for (int q = 0; q < 4; ++q) {
            if (cnt[q] == 0) {
                cells[q] = std::numeric_limits<double>::quiet_NaN();
                table.excluded.push_back(tp.task + "/Q" + std::to_string(q + 1));
            } else {
                cells[q] = sum[q] / static_cast<double>(cnt[q]);
                overall_sum[q] += cells[q];
                ++table.overall_task_counts[q];
            }
        }
        table.tasks.push_back(tp.task);
        table.task_cells.push_back(cells);
        table.task_counts.push_back(cnt);
    }
    for (int q = 0; q < 4; ++q)
        table.overall[q] = table.overall_task_counts[q]
                               ? overall_sum[q] / table.overall_task_counts[q]
                               : std::numeric_limits<double>::quiet_NaN();
    return table;
}

std::string StratifiedBrierTable::to_json_string() const {
    json j;
    json tasks_j = json::array();
    for (size_t t = 0; t < tasks.size(); ++t) {
        json tj;
        tj["task"] = tasks[t];
        json cells = json::array();
        for (int q = 0; q < 4; ++q)
            cells.push_back(std::isnan(task_cells[t][q]) ? json(nullptr) : json(task_cells[t][q]));
        tj["brier"] = std::move(cells);
        tj["counts"] = task_counts[t];
        tasks_j.push_back(std::move(tj));
    }
    j["tasks"] = std::move(tasks_j);
    json overall_j = json::array();
    for (int q = 0; q < 4; ++q)
        overall_j.push_back(std::isnan(overall[q]) ? json(nullptr) : json(overall[q]));
    j["overall"] = std::move(overall_j);
    j["overall_task_counts"] = overall_task_counts;
    j["excluded"] = excluded;
    return j.dump(1);
}

// ---- task assembly and evaluation ----

Featurizer make_bag_featurizer(int32_t vocab_size, int context_len) {
    return [vocab_size, context_len](const TokenSequence* seq, const TaskLabel& label) {
        std::vector<int32_t> window;
        if (seq) window = context_window(*seq, label.prediction_time, context_len);
        return featurize_bag(window, vocab_size);
    };
}

Featurizer make_lm_featurizer(const NGramModel& lm, int context_len) {
    return [&lm, context_len](const TokenSequence* seq, const TaskLabel& label) {
        std::vector<int32_t> window;
        if (seq) window = context_window(*seq, label.prediction_time, context_len);
        return featurize_lm_conditional(window, lm);
    };
}

Featurizer make_external_featurizer(const std::vector<PatientEmbedding>& embeddings) {
    auto table = std::make_shared<std::unordered_map<std::string, std::vector<double>>>();
    for (const PatientEmbedding& e : embeddings) {
        std::string key = e.patient_id + "\x1f" + std::to_string(e.prediction_time);
        if (!table->emplace(std::move(key), e.vector).second)
            throw std::invalid_argument("duplicate embedding for " + e.patient_id);
    }
    return [table](const TokenSequence*, const TaskLabel& label) {
        auto it = table->find(label.patient_id + "\x1f" + std::to_string(label.prediction_time));
        if (it == table->end())
            throw std::runtime_error("missing embedding for " + label.patient_id + " at " +
                                     std::to_string(label.prediction_time));
        FeatureVector fv;
        fv.featurizer_id = "external";
        fv.values = it->second;
        return fv;
    };
}

TaskData assemble_task_data(const std::vector<TokenSequence>& seqs,
                            std::span<const TaskLabel> labels, const DatasetSplit& split,
                            const Featurizer& featurize) {
    std::unordered_map<std::string, const TokenSequence*> by_patient;
    by_patient.reserve(seqs.size());
    for (const TokenSequence& s : seqs)
        if (!by_patient.emplace(s.patient_id, &s).second)
            throw std::invalid_argument("duplicate patient_id in token sequences: " + s.patient_id);

    TaskData data;
    for (const TaskLabel& label : labels) {
        if (!data.task.empty() && label.task_name != data.task)
            throw std::invalid_argument("assemble_task_data expects a single task, got " +
                                        data.task + " and " + label.task_name);
        data.task = label.task_name;
        auto it = by_patient.find(label.patient_id);
        const TokenSequence* seq = it == by_patient.end() ? nullptr : it->second;
        FeatureVector fv = featurize(seq, label);

        FeatureMatrix* X = nullptr;
        std::vector<uint8_t>* y = nullptr;
        if (std::binary_search(split.train.begin(), split.train.end(), label.patient_id)) {
            X = &data.Xtr;
            y = &data.ytr;
        } else if (std::binary_search(split.val.begin(), split.val.end(), label.patient_id)) {
            X = &data.Xval;
            y = &data.yval;
        } else if (std::binary_search(split.test.begin(), split.test.end(), label.patient_id)) {
            X = &data.Xtest;
            y = &data.ytest;
            data.test_labels.push_back(label);
        } else {
            continue;  // patient assigned to no split
        }
        X->add_dense_row(fv.values);
        y->push_back(label.label ? 1 : 0);
    }
    // Splits sharing no labeled patients still need a consistent width.
    size_t d = std::max({data.Xtr.n_cols, data.Xval.n_cols, data.Xtest.n_cols});
    for (FeatureMatrix* X : {&data.Xtr, &data.Xval, &data.Xtest})
        if (X->n_rows == 0) X->n_cols = d;
    return data;
}

EvaluationOutput evaluate_task(const TaskData& data, const EvaluateOptions& opts) {
    TrainResult tr = train_head(data.Xtr, data.ytr, data.Xval, data.yval, opts.l2_grid, opts.train);
    EvaluationOutput out;
    out.head = tr.head;
    out.test_probs = tr.head.predict(data.Xtest);
    out.report.task = data.task;
    out.report.model_id = opts.model_id;
    out.report.n_test = static_cast<int>(data.ytest.size());
    out.report.chosen_l2 = tr.head.l2_lambda;
    out.report.auroc = auroc(out.test_probs, data.ytest);
    out.report.brier = brier(out.test_probs, data.ytest);
    BootstrapCis cis = bootstrap_cis(out.test_probs, data.ytest, opts.bootstrap_n,
                                     derive_seed(opts.seed, 0x626f6f74));
    out.report.auroc_ci = cis.auroc_ci;
    out.report.brier_ci = cis.brier_ci;
    return out;
}

std::vector<size_t> sample_few_shot(std::span<const uint8_t> y, int k, Rng& rng) {
    if (k < 1) throw std::invalid_argument("few-shot k must be >= 1");
    std::vector<size_t> pos, neg;
    for (size_t i = 0; i < y.size(); ++i) (y[i] ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty())
        throw std::invalid_argument("few-shot sampling needs both classes present");

    auto pick = [&](const std::vector<size_t>& cls) {
        std::vector<size_t> out;
        if (cls.size() >= static_cast<size_t>(k)) {
            for (size_t i : rng.sample_without_replacement(cls.size(), static_cast<size_t>(k)))
                out.push_back(cls[i]);
        } else {
            // All distinct examples, then resample with replacement up to k.
            out = cls;
            while (out.size() < static_cast<size_t>(k))
                out.push_back(cls[rng.bounded(cls.size())]);
        }
        return out;
    };
    std::vector<size_t> idx = pick(pos);  // positives drawn first, then negatives
    std::vector<size_t> nidx = pick(neg);
    idx.insert(idx.end(), nidx.begin(), nidx.end());
    return idx;
}

EvaluationOutput few_shot_evaluate(const TaskData& data, int k, uint64_t seed,
                                   const EvaluateOptions& opts) {
    Rng rng(derive_seed(seed, 0x66657773));
    std::vector<size_t> tr_idx = sample_few_shot(data.ytr, k, rng);
    std::vector<size_t> val_idx = sample_few_shot(data.yval, k, rng);

    TaskData sub;
    sub.task = data.task;
    sub.Xtr = subset_rows(data.Xtr, tr_idx);
    sub.Xval = subset_rows(data.Xval, val_idx);
    sub.Xtest = data.Xtest;
    for (size_t i : tr_idx) sub.ytr.push_back(data.ytr[i]);
    for (size_t i : val_idx) sub.yval.push_back(data.yval[i]);
    sub.ytest = data.ytest;
    sub.test_labels = data.test_labels;
    return evaluate_task(sub, opts);
}

// ---- zero-shot ----

std::unordered_map<int32_t, int> att_day_map(const Vocabulary& vocab) {
    std::unordered_map<int32_t, int> days;
    for (const TokenDef& t : vocab.tokens()) {
        if (t.kind != TokenKind::Att || t.name == "VS" || t.name == "VE") continue;
        days[t.id] = att_gap_floor_days(t.name);
    }
    return days;
}

double zero_shot_prob(const NGramModel& lm, std::span<const int32_t> window,
                      std::span<const int32_t> positive_tokens, const GenerationHorizon& horizon,
                      int n_timelines, uint64_t seed, double temperature) {
    if (positive_tokens.empty())
        throw std::invalid_argument("zero_shot_prob: empty positive token set");
    if (n_timelines < 1) throw std::invalid_argument("zero_shot_prob: n_timelines must be >= 1");
    if (horizon.budget < 0) throw std::invalid_argument("zero_shot_prob: negative horizon");
    if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
    for (int32_t t : window)
        if (t < 0 || t >= lm.params().vocab_size)
            throw std::invalid_argument("zero_shot_prob: window token out of range");

    std::unordered_set<int32_t> positives(positive_tokens.begin(), positive_tokens.end());
    const bool by_days = horizon.unit == GenerationHorizon::Unit::Days;
    const int32_t eos = lm.params().eos_id;

    std::vector<uint8_t> hits(static_cast<size_t>(n_timelines), 0);
    parallel_for(static_cast<size_t>(n_timelines), [&](size_t r) {
        Rng rng(derive_seed(seed, r));
        std::vector<int32_t> ctx(window.begin(), window.end());
        int64_t elapsed_days = 0;
        int64_t generated = 0;
        for (;;) {
            if (by_days) {
                if (generated >= horizon.max_steps) break;
            } else if (generated >= horizon.budget) {
                break;
            }
            int32_t t = lm.sample_next(ctx, rng, temperature);
            ++generated;
            if (by_days) {
                auto it = horizon.att_days.find(t);
                if (it != horizon.att_days.end()) elapsed_days += it->second;
                if (elapsed_days > horizon.budget) break;  // gap crosses the horizon
            }
            if (positives.count(t)) {
                hits[r] = 1;
                break;
            }
            if (eos >= 0 && t == eos) break;
            ctx.push_back(t);
        }
    });
    uint64_t n_hit = 0;
    for (uint8_t h : hits) n_hit += h;
    return static_cast<double>(n_hit) / static_cast<double>(n_timelines);
}

// ---- prediction interchange ----

void write_predictions_csv(std::ostream& out, const std::vector<PredictionRow>& rows) {
    out << "patient_id,prediction_time,task,label,prob\n";
    for (const auto& r : rows)
        out << csv_join({r.patient_id, std::to_string(r.prediction_time), r.task,
                         r.label ? "1" : "0", dtos(r.prob)})
            << '\n';
}

std::vector<PredictionRow> read_predictions_csv(std::istream& in) {
    std::vector<PredictionRow> rows;
    std::string line;
    size_t row = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            saw_header = true;
            if (line != "patient_id,prediction_time,task,label,prob")
                throw std::runtime_error("row 1: expected predictions CSV header");
            continue;
        }
        auto f = csv_split(line);
        if (f.size() != 5)
            throw std::runtime_error("row " + std::to_string(row) + ": expected 5 columns");
        PredictionRow r;
        r.patient_id = f[0];
        auto res = std::from_chars(f[1].data(), f[1].data() + f[1].size(), r.prediction_time);
        if (res.ec != std::errc() || res.ptr != f[1].data() + f[1].size())
            throw std::runtime_error("row " + std::to_string(row) + ": bad prediction_time");
        r.task = f[2];
        if (f[3] == "0") r.label = 0;
        else if (f[3] == "1") r.label = 1;
        else throw std::runtime_error("row " + std::to_string(row) + ": label must be 0 or 1");
        char* end = nullptr;
        r.prob = std::strtod(f[4].c_str(), &end);
        if (end != f[4].c_str() + f[4].size() || f[4].empty())
            throw std::runtime_error("row " + std::to_string(row) + ": bad prob");
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace ehrseq
