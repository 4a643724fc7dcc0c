#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ehrseq/ngram_lm.hpp"
#include "ehrseq/rng.hpp"

using namespace ehrseq;

namespace {

TokenSequence seq_of(std::vector<int32_t> ids) {
    TokenSequence s;
    s.patient_id = "p";
    s.token_ids = std::move(ids);
    s.source_times.assign(s.token_ids.size(), 0);
    return s;
}

std::vector<TokenSequence> random_corpus(Rng& rng, int n_seqs, int max_len, int32_t vocab) {
    std::vector<TokenSequence> out;
    for (int i = 0; i < n_seqs; ++i) {
        std::vector<int32_t> ids(1 + rng.bounded(static_cast<uint64_t>(max_len)));
        for (auto& t : ids) t = static_cast<int32_t>(rng.bounded(static_cast<uint64_t>(vocab)));
        out.push_back(seq_of(std::move(ids)));
    }
    return out;
}

}  // namespace

TEST_CASE("unigram probabilities equal the add-kappa counting oracle") {
    // Tokens [0,1,0]: c(0)=2, c(1)=1, N=3. V=3, kappa=0.5, so kV=1.5.
    NGramModel::Params p;
    p.order = 1;
    p.kappa = 0.5;
    p.vocab_size = 3;
    auto corpus = std::vector<TokenSequence>{seq_of({0, 1, 0})};
    NGramModel m = NGramModel::fit(corpus, p);
    CHECK(m.total_tokens() == 3);
    CHECK(m.prob({}, 0) == doctest::Approx(2.5 / 4.5).epsilon(1e-15));
    CHECK(m.prob({}, 1) == doctest::Approx(1.5 / 4.5).epsilon(1e-15));
    CHECK(m.prob({}, 2) == doctest::Approx(0.5 / 4.5).epsilon(1e-15));
    // Context is ignored at order 1.
    CHECK(m.prob(std::vector<int32_t>{1, 2}, 0) == m.prob({}, 0));
}

TEST_CASE("bigram interpolation matches the hand computation") {
    // Corpus [0,1,0,1] with BOS=2, V=4 (id 3 never occurs), kappa=0.1,
    // lambdas {0.4, 0.6}.
    // Unigrams: c(0)=2, c(1)=2, N=4. Bigrams: (B,0)=1, (0,1)=2, (1,0)=1;
    // context totals B=1, 0=2, 1=1 (the trailing 1 has no successor).
    NGramModel::Params p;
    p.order = 2;
    p.kappa = 0.1;
    p.vocab_size = 4;
    p.bos_id = 2;
    p.lambdas = {0.4, 0.6};
    auto corpus = std::vector<TokenSequence>{seq_of({0, 1, 0, 1})};
    NGramModel m = NGramModel::fit(corpus, p);

    double kV = 0.1 * 4;
    double uni0 = (2 + 0.1) / (4 + kV), uni1 = (2 + 0.1) / (4 + kV);
    CHECK(m.prob(std::vector<int32_t>{0}, 1) ==
          doctest::Approx(0.4 * uni1 + 0.6 * (2 + 0.1) / (2 + kV)).epsilon(1e-15));
    CHECK(m.prob(std::vector<int32_t>{1}, 0) ==
          doctest::Approx(0.4 * uni0 + 0.6 * (1 + 0.1) / (1 + kV)).epsilon(1e-15));
    // Empty context pads with BOS: context total for B is 1.
    CHECK(m.prob({}, 0) ==
          doctest::Approx(0.4 * uni0 + 0.6 * (1 + 0.1) / (1 + kV)).epsilon(1e-15));
    // A never-seen context falls back to pure smoothing in the bigram term.
    CHECK(m.prob(std::vector<int32_t>{3}, 0) ==
          doctest::Approx(0.4 * uni0 + 0.6 * 0.1 / kV).epsilon(1e-15));
}

TEST_CASE("conditional distributions sum to one over random contexts") {
    Rng rng(42);
    auto corpus = random_corpus(rng, 30, 60, 12);
    for (int order : {1, 2, 3}) {
        NGramModel::Params p;
        p.order = order;
        p.kappa = 0.05;
        p.vocab_size = 12;
        p.bos_id = 11;
        NGramModel m = NGramModel::fit(corpus, p);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<int32_t> ctx(rng.bounded(6));
            for (auto& t : ctx) t = static_cast<int32_t>(rng.bounded(12));
            auto ps = m.conditional(ctx);
            REQUIRE(ps.size() == 12);
            double sum = 0;
            for (size_t t = 0; t < ps.size(); ++t) {
                CHECK(ps[t] > 0.0);
                CHECK(ps[t] == m.prob(ctx, static_cast<int32_t>(t)));
                sum += ps[t];
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("uniform corpus gives exactly uniform probabilities at power-of-two vocab") {
    // One occurrence of every token: (1 + k) / (V + kV) == 1/V exactly when
    // the denominator is a power-of-two multiple of the numerator.
    const int32_t V = 32;
    std::vector<int32_t> ids(V);
    for (int32_t t = 0; t < V; ++t) ids[t] = t;
    NGramModel::Params p;
    p.order = 1;
    p.kappa = 0.1;
    p.vocab_size = V;
    auto corpus = std::vector<TokenSequence>{seq_of(ids)};
    NGramModel m = NGramModel::fit(corpus, p);
    for (int32_t t = 0; t < V; ++t) CHECK(m.prob({}, t) == 1.0 / V);
    CHECK(std::exp(-m.log_prob({}, 0)) == static_cast<double>(V));
}

TEST_CASE("sequence_log_probs chains conditionals with BOS padding") {
    Rng rng(7);
    auto corpus = random_corpus(rng, 10, 40, 8);
    NGramModel::Params p;
    p.order = 3;
    p.kappa = 0.2;
    p.vocab_size = 8;
    p.bos_id = 7;
    NGramModel m = NGramModel::fit(corpus, p);

    std::vector<int32_t> xs{3, 1, 4, 1, 5, 2};
    auto lps = m.sequence_log_probs(xs);
    REQUIRE(lps.size() == xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        CHECK(lps[i] == m.log_prob(std::span<const int32_t>(xs).subspan(0, i), xs[i]));
        CHECK(lps[i] < 0.0);
    }
    CHECK_THROWS(m.sequence_log_probs(std::vector<int32_t>{99}));
    CHECK_THROWS(m.prob({}, -1));
}

TEST_CASE("parameter validation rejects bad settings") {
    auto corpus = std::vector<TokenSequence>{seq_of({0, 1})};
    auto fit_with = [&](auto mutate) {
        NGramModel::Params p;
        p.order = 2;
        p.kappa = 0.1;
        p.vocab_size = 3;
        p.bos_id = 2;
        mutate(p);
        return NGramModel::fit(corpus, p);
    };
    CHECK_THROWS(fit_with([](auto& p) { p.order = 0; }));
    CHECK_THROWS(fit_with([](auto& p) { p.kappa = 0.0; }));
    CHECK_THROWS(fit_with([](auto& p) { p.kappa = -1.0; }));
    CHECK_THROWS(fit_with([](auto& p) { p.vocab_size = 0; }));
    CHECK_THROWS(fit_with([](auto& p) { p.bos_id = -1; }));
    CHECK_THROWS(fit_with([](auto& p) { p.bos_id = 3; }));
    CHECK_THROWS(fit_with([](auto& p) { p.lambdas = {0.5}; }));
    CHECK_THROWS(fit_with([](auto& p) { p.lambdas = {0.5, 0.6}; }));
    CHECK_THROWS(fit_with([](auto& p) { p.lambdas = {1.5, -0.5}; }));
    CHECK_THROWS(fit_with([](auto& p) { p.eos_id = 5; }));
    CHECK_NOTHROW(fit_with([](auto&) {}));

    // Token outside the declared vocabulary.
    auto bad = std::vector<TokenSequence>{seq_of({0, 5})};
    NGramModel::Params p;
    p.order = 1;
    p.kappa = 0.1;
    p.vocab_size = 3;
    CHECK_THROWS(NGramModel::fit(bad, p));
    std::vector<TokenSequence> empty;
    CHECK_THROWS(NGramModel::fit(empty, p));
}

TEST_CASE("parallel fit, serial fit, and save/load agree bytewise") {
    Rng rng(123);
    auto corpus = random_corpus(rng, 80, 120, 20);
    NGramModel::Params p;
    p.order = 3;
    p.kappa = 0.1;
    p.vocab_size = 20;
    p.bos_id = 19;
    p.eos_id = 18;

    NGramModel par = NGramModel::fit(corpus, p);
    NGramModel ser = NGramModel::fit_serial(corpus, p);
    std::ostringstream b1, b2, b3, b4;
    par.save(b1);
    ser.save(b2);
    par.save(b3);  // saving twice must be stable
    CHECK(b1.str() == b2.str());
    CHECK(b1.str() == b3.str());

    std::istringstream in(b1.str());
    NGramModel loaded = NGramModel::load(in);
    loaded.save(b4);
    CHECK(b4.str() == b1.str());
    CHECK(loaded.total_tokens() == par.total_tokens());

    // Loaded model scores identically (not just approximately).
    std::vector<int32_t> probe{1, 2, 3, 4, 5, 6, 7};
    CHECK(loaded.sequence_log_probs(probe) == par.sequence_log_probs(probe));

    std::istringstream junk("XXXX");
    CHECK_THROWS(NGramModel::load(junk));
    std::istringstream truncated(b1.str().substr(0, 30));
    CHECK_THROWS(NGramModel::load(truncated));
}

TEST_CASE("generation is seeded, bounded, and stops after EOS") {
    // Strongly peaked corpus: token 2 is always followed by EOS=3.
    std::vector<TokenSequence> corpus;
    for (int i = 0; i < 50; ++i) corpus.push_back(seq_of({0, 1, 2, 3}));
    NGramModel::Params p;
    p.order = 2;
    p.kappa = 0.01;
    p.vocab_size = 5;
    p.bos_id = 4;
    p.eos_id = 3;
    NGramModel m = NGramModel::fit(corpus, p);

    std::vector<int32_t> prefix{0};
    auto g1 = m.generate(prefix, 64, 9);
    auto g2 = m.generate(prefix, 64, 9);
    CHECK(g1 == g2);
    auto g3 = m.generate(prefix, 64, 10);
    CHECK(g1.size() >= prefix.size());
    CHECK(g1.size() <= prefix.size() + 64);
    // A sampled EOS is kept and ends the continuation.
    int eos_count = 0;
    for (size_t i = prefix.size(); i < g1.size(); ++i)
        if (g1[i] == 3) {
            ++eos_count;
            CHECK(i == g1.size() - 1);
        }
    CHECK(eos_count <= 1);
    (void)g3;

    CHECK(m.generate(prefix, 0, 1) == prefix);
    CHECK_THROWS(m.generate(prefix, -1, 1));
}

TEST_CASE("temperature reshapes sampling toward p^(1/T)") {
    // Unigram with P(0)=0.25, P(1)=0.75 approximately; at T=0.5 the
    // renormalized distribution is p^2/sum = {0.1, 0.9}.
    std::vector<TokenSequence> corpus{seq_of({0, 1, 1, 1})};
    NGramModel::Params p;
    p.order = 1;
    p.kappa = 1e-9;
    p.vocab_size = 2;
    NGramModel m = NGramModel::fit(corpus, p);

    Rng rng(555);
    int n = 40000, ones_t1 = 0, ones_half = 0;
    for (int i = 0; i < n; ++i) ones_t1 += m.sample_next({}, rng, 1.0);
    for (int i = 0; i < n; ++i) ones_half += m.sample_next({}, rng, 0.5);
    CHECK(static_cast<double>(ones_t1) / n == doctest::Approx(0.75).epsilon(0.02));
    CHECK(static_cast<double>(ones_half) / n == doctest::Approx(0.90).epsilon(0.02));
    CHECK_THROWS(m.sample_next({}, rng, 0.0));
    CHECK_THROWS(m.sample_next({}, rng, -1.0));
}

TEST_CASE("mean_nll averages negative log-probs per token") {
    Rng rng(2);
    auto corpus = random_corpus(rng, 20, 30, 6);
    NGramModel::Params p;
    p.order = 2;
    p.kappa = 0.1;
    p.vocab_size = 6;
    p.bos_id = 5;
    NGramModel m = NGramModel::fit(corpus, p);

    double total = 0;
    size_t count = 0;
    for (const auto& s : corpus) {
        for (double lp : m.sequence_log_probs(s.token_ids)) {
            total -= lp;
            ++count;
        }
    }
    CHECK(mean_nll(m, corpus) == doctest::Approx(total / count).epsilon(1e-12));
    std::vector<TokenSequence> empty;
    CHECK_THROWS(mean_nll(m, empty));
}

TEST_CASE("higher order fits its own generating process at least as well") {
    // Deterministic cycle 0->1->2->0: a bigram model should beat unigram NLL.
    std::vector<TokenSequence> corpus;
    for (int i = 0; i < 30; ++i) {
        std::vector<int32_t> ids;
        for (int j = 0; j < 60; ++j) ids.push_back(j % 3);
        corpus.push_back(seq_of(std::move(ids)));
    }
    NGramModel::Params p1;
    p1.order = 1;
    p1.kappa = 0.1;
    p1.vocab_size = 4;
    NGramModel::Params p2 = p1;
    p2.order = 2;
    p2.bos_id = 3;
    double nll1 = mean_nll(NGramModel::fit(corpus, p1), corpus);
    double nll2 = mean_nll(NGramModel::fit(corpus, p2), corpus);
    CHECK(nll2 < nll1);
}
