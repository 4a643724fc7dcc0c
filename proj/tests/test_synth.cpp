#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "ehrseq/properties.hpp"
#include "ehrseq/synth.hpp"

using namespace ehrseq;
using namespace ehrseq::synth;

namespace {

bool timelines_equal(const std::vector<PatientTimeline>& a,
                     const std::vector<PatientTimeline>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].patient_id != b[i].patient_id) return false;
        if (a[i].events.size() != b[i].events.size()) return false;
        for (size_t e = 0; e < a[i].events.size(); ++e) {
            const Event& x = a[i].events[e];
            const Event& y = b[i].events[e];
            if (x.time != y.time || x.code != y.code || x.value != y.value ||
                x.visit_id != y.visit_id)
                return false;
        }
    }
    return true;
}

int code_rank(const std::string& code) { return std::stoi(code.substr(1)); }

SynthConfig small_config() {
    SynthConfig c;
    c.n_patients = 30;
    c.vocab_size = 50;
    c.active_set_size = 8;
    c.min_events = 2;
    c.max_events = 200;
    return c;
}

double mean_rr(const std::vector<PatientTimeline>& corpus, int n) {
    double total = 0;
    size_t count = 0;
    for (const auto& tl : corpus) {
        auto rr = repetition_rate(code_symbols(tl), n);
        if (rr) {
            total += *rr;
            ++count;
        }
    }
    REQUIRE(count > 0);
    return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("zipf cumulative weights are the harmonic-like partial sums") {
    auto cum = zipf_cumulative(4, 1.0);
    REQUIRE(cum.size() == 5);
    CHECK(cum[0] == 0.0);
    CHECK(cum[1] == 1.0);
    CHECK(cum[2] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(cum[3] == doctest::Approx(1.5 + 1.0 / 3.0).epsilon(1e-15));
    CHECK(cum[4] == doctest::Approx(1.5 + 1.0 / 3.0 + 0.25).epsilon(1e-15));
    for (size_t i = 1; i < cum.size(); ++i) CHECK(cum[i] > cum[i - 1]);

    auto steep = zipf_cumulative(3, 2.0);
    CHECK(steep[2] - steep[1] == doctest::Approx(0.25));
}

TEST_CASE("code_name formats ranks") {
    CHECK(code_name(0) == "C0");
    CHECK(code_name(17) == "C17");
}

TEST_CASE("config json round-trips canonically") {
    SynthConfig c = small_config();
    c.copy_forward_min = 0.1;
    c.copy_forward_max = 0.4;
    c.between_gap_sigma_min = 0.2;
    c.between_gap_sigma_max = 1.5;
    c.label.risk_codes = {1, 2};
    c.label.weights = {0.5, -0.5};
    c.label.noise_metric = "rr1";
    c.label.noise_base = 0.3;

    std::string js = config_to_json(c);
    SynthConfig back = parse_config(js);
    CHECK(config_to_json(back) == js);
    CHECK(back.copy_forward_max == 0.4);
    CHECK(back.label.risk_codes == std::vector<int>{1, 2});

    // Defaults apply for omitted keys; scalar copy_forward_prob sets both ends.
    SynthConfig d = parse_config("{}");
    CHECK(d.n_patients == 100);
    CHECK(d.vocab_size == 1000);
    SynthConfig s = parse_config("{\"copy_forward_prob\": 0.3}");
    CHECK(s.copy_forward_min == 0.3);
    CHECK(s.copy_forward_max == 0.3);
}

TEST_CASE("config parsing rejects unknown keys and bad values") {
    CHECK_THROWS_AS(parse_config("{\"zipf_exp\": 1.0}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"label\": {\"bogus\": 1}}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("not json"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("[1,2]"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"vocab_size\": 0}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"zipf_exponent\": 0}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"copy_forward_prob\": [0.5, 0.2]}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"copy_forward_prob\": [0.1, 0.2, 0.3]}"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"start_time_range\": [5, 5]}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"active_set_size\": 2000}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"events_per_patient\": {\"log_mean\": 1}}"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"label\": {\"noise_metric\": \"entropy\"}}"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"label\": {\"risk_codes\": [9999]}}"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"label\": {\"risk_codes\": [1], \"weights\": []}}"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"label\": {\"min_events_for_label\": 1}}"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config("{\"label\": {\"pred_frac_range\": [0.9, 0.5]}}"),
                    std::invalid_argument);
}

TEST_CASE("generated corpora have visit structure and bounded shapes") {
    SynthConfig c = small_config();
    c.numeric_value_prob = 0.3;
    c.categorical_value_prob = 0.3;
    auto corpus = generate_corpus(c, 42);
    REQUIRE(corpus.size() == 30);

    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto& tl = corpus[i];
        // Zero-padded index ids in generation order.
        CHECK(tl.patient_id.size() == 3);
        CHECK(tl.patient_id == "p" + std::string(i < 10 ? "0" : "") + std::to_string(i));
        CHECK(tl.events.size() >= 2);
        CHECK(tl.events.size() <= 200);

        int last_visit = -1;
        std::set<int> seen_visits;
        for (size_t e = 0; e < tl.events.size(); ++e) {
            const Event& ev = tl.events[e];
            if (e > 0) CHECK(ev.time > tl.events[e - 1].time);  // strictly increasing
            int rank = code_rank(ev.code);
            CHECK(ev.code[0] == 'C');
            CHECK(rank >= 0);
            CHECK(rank < c.vocab_size);
            REQUIRE(ev.visit_id.has_value());
            int v = std::stoi(ev.visit_id->substr(1));
            // Visits are consecutive runs, never revisited.
            if (v != last_visit) {
                CHECK(!seen_visits.count(v));
                CHECK(v == last_visit + 1);
                seen_visits.insert(v);
                last_visit = v;
            }
            if (std::holds_alternative<double>(ev.value)) {
                CHECK(std::get<double>(ev.value) > 0);
            } else if (std::holds_alternative<std::string>(ev.value)) {
                const auto& s = std::get<std::string>(ev.value);
                CHECK(s[0] == 'c');
                CHECK(std::stoi(s.substr(1)) < c.categories_per_code);
            }
        }
    }
}

TEST_CASE("generation is seed-deterministic and parallel matches serial") {
    SynthConfig c = small_config();
    auto a = generate_corpus(c, 7);
    auto b = generate_corpus(c, 7);
    CHECK(timelines_equal(a, b));
    auto s = generate_corpus_serial(c, 7);
    CHECK(timelines_equal(a, s));
    auto other = generate_corpus(c, 8);
    CHECK(!timelines_equal(a, other));

    SynthConfig bad = c;
    bad.active_set_size = 0;
    CHECK_THROWS(generate_corpus(bad, 7));
}

TEST_CASE("event count bounds are enforced and the median tracks the lognormal") {
    SynthConfig c;
    c.n_patients = 400;
    c.vocab_size = 100;
    c.min_events = 5;
    c.max_events = 5000;
    auto corpus = generate_corpus(c, 11);
    std::vector<size_t> counts;
    for (const auto& tl : corpus) {
        CHECK(tl.events.size() >= 5);
        CHECK(tl.events.size() <= 5000);
        counts.push_back(tl.events.size());
    }
    std::sort(counts.begin(), counts.end());
    double median = 0.5 * (static_cast<double>(counts[199]) + static_cast<double>(counts[200]));
    // Configured median is exp(4.7958) = 121; the cap only trims the far tail.
    CHECK(median > 70);
    CHECK(median < 210);
    CHECK(counts.back() > counts.front());  // heavy-tailed spread survives
}

TEST_CASE("copy-forward raises n-gram repetition") {
    SynthConfig base;
    base.n_patients = 20;
    base.vocab_size = 100;
    base.active_set_size = 16;
    base.min_events = 200;
    base.max_events = 200;
    base.numeric_value_prob = 0;
    base.categorical_value_prob = 0;

    SynthConfig copying = base;
    copying.copy_forward_min = copying.copy_forward_max = 0.9;

    double rr_base = mean_rr(generate_corpus(base, 3), 3);
    double rr_copy = mean_rr(generate_corpus(copying, 3), 3);
    CHECK(rr_copy > rr_base + 0.2);
    CHECK(rr_copy > 0.5);
}

TEST_CASE("drift rotates active codes toward higher ranks over the timeline") {
    SynthConfig c;
    c.n_patients = 20;
    c.vocab_size = 300;
    c.active_set_size = 8;
    c.min_events = 240;
    c.max_events = 240;
    c.drift_rate = 1.0;
    c.drift_fraction = 0.5;
    c.drift_step = 4;
    c.numeric_value_prob = 0;
    c.categorical_value_prob = 0;

    auto corpus = generate_corpus(c, 19);
    double early = 0, late = 0;
    for (const auto& tl : corpus) {
        size_t n = tl.events.size();
        for (size_t e = 0; e < 40; ++e) early += code_rank(tl.events[e].code);
        for (size_t e = n - 40; e < n; ++e) late += code_rank(tl.events[e].code);
    }
    early /= 20 * 40;
    late /= 20 * 40;
    CHECK(late > early + 50);

    // Without drift the same seed keeps ranks stationary.
    SynthConfig flat = c;
    flat.drift_rate = 0;
    auto still = generate_corpus(flat, 19);
    double early2 = 0, late2 = 0;
    for (const auto& tl : still) {
        size_t n = tl.events.size();
        for (size_t e = 0; e < 40; ++e) early2 += code_rank(tl.events[e].code);
        for (size_t e = n - 40; e < n; ++e) late2 += code_rank(tl.events[e].code);
    }
    early2 /= 20 * 40;
    late2 /= 20 * 40;
    CHECK(std::abs(late2 - early2) < 25);
}

TEST_CASE("noise-free labels follow the risk-code logit exactly") {
    // Hand-built corpus: the label fires iff C3 appears by the prediction time.
    std::vector<PatientTimeline> corpus(3);
    corpus[0].patient_id = "a";
    corpus[0].events = {{100, "C3", {}, std::string("v0")},
                        {200, "C1", {}, std::string("v0")},
                        {300, "C2", {}, std::string("v1")}};
    corpus[1].patient_id = "b";
    corpus[1].events = {{100, "C1", {}, std::string("v0")},
                        {200, "C2", {}, std::string("v0")},
                        {300, "C4", {}, std::string("v1")}};
    corpus[2].patient_id = "short";
    corpus[2].events = {{100, "C3", {}, std::string("v0")}};

    SynthConfig c;
    c.vocab_size = 10;
    c.active_set_size = 8;
    c.label.task_name = "risk3";
    c.label.risk_codes = {3};
    c.label.weights = {2.0};
    c.label.bias = -1.0;
    c.label.noise_base = 0.0;
    c.label.pred_frac_min = 1.0;  // predict at the last event
    c.label.pred_frac_max = 1.0;
    c.label.min_events_for_label = 2;

    std::vector<LabelGroundTruth> truth;
    auto labels = generate_labels(corpus, c, 5, &truth);
    REQUIRE(labels.size() == 2);  // "short" is below min_events_for_label
    REQUIRE(truth.size() == 2);
    CHECK(labels[0].patient_id == "a");
    CHECK(labels[0].task_name == "risk3");
    CHECK(labels[0].prediction_time == 300);
    CHECK(labels[0].label == true);  // -1 + 2*log1p(1) = 0.386 > 0
    CHECK(labels[1].patient_id == "b");
    CHECK(labels[1].label == false);  // -1 + 0
    CHECK(truth[0].logit == doctest::Approx(-1.0 + 2.0 * std::log1p(1.0)).epsilon(1e-15));
    CHECK(truth[0].noise_sigma == 0.0);
    CHECK(truth[0].p_true == 1.0);
    CHECK(truth[1].p_true == 0.0);

    CHECK_THROWS(generate_labels(std::vector<PatientTimeline>{}, c, 5));
}

TEST_CASE("label noise scales with the configured metric rank") {
    // rr1 ranks: "lo" all-distinct codes (rr1 0), "mid", "hi" all-same (rr1 ~1).
    auto mk = [](std::string id, std::vector<std::string> codes) {
        PatientTimeline tl;
        tl.patient_id = std::move(id);
        int64_t t = 0;
        for (auto& code : codes)
            tl.events.push_back({t += 100, std::move(code), {}, std::string("v0")});
        return tl;
    };
    std::vector<PatientTimeline> corpus{
        mk("lo", {"C1", "C2", "C3", "C4"}),
        mk("mid", {"C1", "C1", "C2", "C3"}),
        mk("hi", {"C1", "C1", "C1", "C1"}),
    };

    SynthConfig c;
    c.vocab_size = 10;
    c.active_set_size = 8;
    c.label.risk_codes = {1};
    c.label.weights = {1.0};
    c.label.noise_base = 0.5;
    c.label.noise_metric = "rr1";
    c.label.noise_metric_weight = 1.0;
    c.label.min_events_for_label = 2;

    std::vector<LabelGroundTruth> truth;
    generate_labels(corpus, c, 9, &truth);
    REQUIRE(truth.size() == 3);
    CHECK(truth[0].noise_sigma == doctest::Approx(0.5));   // rank 0
    CHECK(truth[1].noise_sigma == doctest::Approx(0.75));  // rank 0.5
    CHECK(truth[2].noise_sigma == doctest::Approx(1.0));   // rank 1
    for (const auto& gt : truth) {
        double phi = 0.5 * std::erfc(-(gt.logit / gt.noise_sigma) / std::sqrt(2.0));
        CHECK(gt.p_true == doctest::Approx(phi).epsilon(1e-12));
    }

    SynthConfig irr = c;
    irr.label.noise_metric = "irr_std";
    std::vector<LabelGroundTruth> truth2;
    generate_labels(corpus, irr, 9, &truth2);
    REQUIRE(truth2.size() == 3);  // runs end to end on the gap-spread metric
}

TEST_CASE("labels are deterministic and pred times respect the window") {
    SynthConfig c = small_config();
    c.min_events = 20;
    c.max_events = 60;
    c.label.risk_codes = {0, 1};
    c.label.weights = {1.0, -0.5};
    c.label.bias = -0.2;
    c.label.noise_base = 0.4;
    c.label.min_events_for_label = 4;
    c.label.labels_per_patient = 3;
    c.label.pred_frac_min = 0.5;
    c.label.pred_frac_max = 0.9;

    auto corpus = generate_corpus(c, 23);
    auto l1 = generate_labels(corpus, c, 31);
    auto l2 = generate_labels(corpus, c, 31);
    REQUIRE(l1.size() == l2.size());
    REQUIRE(l1.size() == corpus.size() * 3);
    bool any_pos = false, any_neg = false;
    for (size_t i = 0; i < l1.size(); ++i) {
        CHECK(l1[i].patient_id == l2[i].patient_id);
        CHECK(l1[i].prediction_time == l2[i].prediction_time);
        CHECK(l1[i].label == l2[i].label);
        (l1[i].label ? any_pos : any_neg) = true;
    }
    CHECK(any_pos);
    CHECK(any_neg);

    // Prediction indices stay inside the configured fraction of the timeline.
    size_t row = 0;
    for (const auto& tl : corpus) {
        int64_t n = static_cast<int64_t>(tl.events.size());
        int64_t lo_t = tl.events[static_cast<size_t>(std::ceil(0.5 * (n - 1)))].time;
        int64_t hi_t = tl.events.back().time;
        for (int rep = 0; rep < 3; ++rep, ++row) {
            CHECK(l1[row].prediction_time >= lo_t);
            CHECK(l1[row].prediction_time <= hi_t);
        }
    }

    auto l3 = generate_labels(corpus, c, 32);
    bool differs = false;
    for (size_t i = 0; i < l1.size(); ++i)
        differs |= l1[i].label != l3[i].label || l1[i].prediction_time != l3[i].prediction_time;
    CHECK(differs);
}
