// Times each OpenMP kernel against its serial reference on one synthetic
// corpus and checks the results are identical. Exits nonzero on any mismatch,
// so it doubles as a consistency check at benchmark scale.

#include <chrono>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ehrseq/eval_harness.hpp"
#include "ehrseq/io.hpp"
#include "ehrseq/ngram_lm.hpp"
#include "ehrseq/parallel.hpp"
#include "ehrseq/ppl_analysis.hpp"
#include "ehrseq/properties.hpp"
#include "ehrseq/rng.hpp"
#include "ehrseq/synth.hpp"
#include "ehrseq/tokenizer.hpp"

using namespace ehrseq;

namespace {

template <typename F>
double time_ms(int repeats, F&& fn) {
    double best = 1e300;
    for (int r = 0; r < repeats; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

bool all_equal = true;

void report(const std::string& name, double serial_ms, double parallel_ms, bool equal) {
    std::printf("%-18s %10.1f ms %10.1f ms %7.2fx   %s\n", name.c_str(), serial_ms, parallel_ms,
                serial_ms / parallel_ms, equal ? "identical" : "MISMATCH");
    if (!equal) all_equal = false;
}

bool rows_equal(const std::vector<PatientMetricRow>& a, const std::vector<PatientMetricRow>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].patient_id != b[i].patient_id || a[i].task != b[i].task ||
            a[i].metric != b[i].metric ||
            std::memcmp(&a[i].value, &b[i].value, sizeof(double)) != 0)
            return false;
    return true;
}

std::string model_bytes(const NGramModel& m) {
    std::ostringstream os;
    m.save(os);
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"serial vs parallel kernel benchmark", "ehrseq-bench"};
    int n_patients = 2000;
    int repeats = 3;
    int threads = 0;
    uint64_t seed = 20240901;
    app.add_option("--patients", n_patients, "corpus size");
    app.add_option("--repeats", repeats, "timing repeats (best is reported)");
    app.add_option("--threads", threads, "cap worker threads");
    app.add_option("--seed", seed, "corpus seed");
    CLI11_PARSE(app, argc, argv);
    if (threads > 0) set_max_threads(threads);

    synth::SynthConfig sc;
    sc.n_patients = n_patients;
    sc.vocab_size = 500;
    sc.active_set_size = 24;
    sc.copy_forward_min = 0.2;
    sc.copy_forward_max = 0.5;

    std::printf("corpus: %d patients, threads <= %d\n", n_patients, max_threads());
    std::printf("%-18s %13s %13s %9s   %s\n", "kernel", "serial", "parallel", "speedup",
                "check");

    auto corpus_s = generate_corpus_serial(sc, seed);
    std::vector<PatientTimeline> corpus;
    {
        double ts = time_ms(repeats, [&] { corpus_s = generate_corpus_serial(sc, seed); });
        double tp = time_ms(repeats, [&] { corpus = synth::generate_corpus(sc, seed); });
        report("generate-corpus", ts, tp, corpus == corpus_s);
    }

    Vocabulary vocab = build_vocabulary(corpus, 400, true);
    {
        Vocabulary vs = vocab;
        double ts = time_ms(repeats, [&] { vs = build_vocabulary_serial(corpus, 400, true); });
        double tp = time_ms(repeats, [&] { vocab = build_vocabulary(corpus, 400, true); });
        report("build-vocabulary", ts, tp, vocab.to_json_string() == vs.to_json_string());
    }

    auto tokens = encode_corpus(corpus, vocab, true);
    {
        auto tks = tokens;
        double ts = time_ms(repeats, [&] { tks = encode_corpus_serial(corpus, vocab, true); });
        double tp = time_ms(repeats, [&] { tokens = encode_corpus(corpus, vocab, true); });
        report("encode-corpus", ts, tp, tokens == tks);
    }

    {
        CorpusMetricsOptions mo;
        auto ms = corpus_metrics_serial(corpus, mo);
        auto mp = ms;
        double ts = time_ms(repeats, [&] { ms = corpus_metrics_serial(corpus, mo); });
        double tp = time_ms(repeats, [&] { mp = corpus_metrics(corpus, mo); });
        report("corpus-metrics", ts, tp, rows_equal(ms, mp));
    }

    NGramModel::Params params;
    params.order = 3;
    params.kappa = 0.1;
    params.vocab_size = vocab.size();
    params.bos_id = vocab.special("[BOS]");
    params.eos_id = vocab.special("[EOS]");
    NGramModel lm = NGramModel::fit(tokens, params);
    {
        NGramModel lms = lm;
        double ts = time_ms(repeats, [&] { lms = NGramModel::fit_serial(tokens, params); });
        double tp = time_ms(repeats, [&] { lm = NGramModel::fit(tokens, params); });
        report("fit-lm", ts, tp, model_bytes(lm) == model_bytes(lms));
    }

    {
        auto ss = score_corpus_serial(lm, tokens, 256, 32);
        auto sp = ss;
        double ts = time_ms(repeats, [&] { ss = score_corpus_serial(lm, tokens, 256, 32); });
        double tp = time_ms(repeats, [&] { sp = score_corpus(lm, tokens, 256, 32); });
        report("score-corpus", ts, tp, ss == sp);
    }

    {
        // Synthetic paired predictions; enough rows that resampling dominates.
        Rng rng(seed);
        size_t n = 20000;
        std::vector<double> a(n), b(n);
        std::vector<uint8_t> y(n);
        for (size_t i = 0; i < n; ++i) {
            y[i] = rng.uniform() < 0.3;
            a[i] = rng.uniform();
            b[i] = 0.5 * a[i] + 0.5 * (y[i] ? 0.8 : 0.2);
        }
        auto cs = bootstrap_compare_serial(a, b, y, Metric::Auroc, 2000, seed);
        auto cp = cs;
        double ts = time_ms(
            repeats, [&] { cs = bootstrap_compare_serial(a, b, y, Metric::Auroc, 2000, seed); });
        double tp =
            time_ms(repeats, [&] { cp = bootstrap_compare(a, b, y, Metric::Auroc, 2000, seed); });
        bool eq = std::memcmp(&cs.point_a, &cp.point_a, sizeof(double)) == 0 &&
                  std::memcmp(&cs.point_b, &cp.point_b, sizeof(double)) == 0 &&
                  cs.diff_ci.lo == cp.diff_ci.lo && cs.diff_ci.hi == cp.diff_ci.hi &&
                  cs.ci_a.lo == cp.ci_a.lo && cs.ci_a.hi == cp.ci_a.hi &&
                  cs.ci_b.lo == cp.ci_b.lo && cs.ci_b.hi == cp.ci_b.hi &&
                  cs.win_rate == cp.win_rate && cs.n_excluded == cp.n_excluded;
        report("bootstrap-compare", ts, tp, eq);
    }

    if (!all_equal) {
        std::fprintf(stderr, "parallel results diverged from serial references\n");
        return 1;
    }
    return 0;
}
