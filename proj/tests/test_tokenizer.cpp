#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "ehrseq/rng.hpp"
#include "ehrseq/tokenizer.hpp"

using namespace ehrseq;

namespace {

// Independent percentile oracle: sorted values, rank r = (p/100)(m-1),
// linear interpolation between the bracketing order statistics.
double percentile_oracle(const std::vector<double>& sorted, double p) {
    size_t m = sorted.size();
    double r = (p / 100.0) * static_cast<double>(m - 1);
    size_t lo = static_cast<size_t>(r);
    if (lo + 1 >= m) return sorted.back();
    return sorted[lo] + (r - lo) * (sorted[lo + 1] - sorted[lo]);
}

PatientTimeline timeline_of(std::string id, std::vector<Event> events) {
    PatientTimeline tl;
    tl.patient_id = std::move(id);
    tl.events = std::move(events);
    return tl;
}

// Code A valueless x5, code B numeric 1..100 one event each.
std::vector<PatientTimeline> reference_corpus() {
    std::vector<Event> events;
    for (int i = 0; i < 5; ++i) events.push_back({i, "A", {}, std::nullopt});
    for (int v = 1; v <= 100; ++v)
        events.push_back({100 + v, "B", static_cast<double>(v), std::nullopt});
    return {timeline_of("p1", std::move(events))};
}

}  // namespace

TEST_CASE("reference corpus: deciles outrank the code and cutpoints match the oracle") {
    auto corpus = reference_corpus();
    Vocabulary vocab = build_vocabulary(corpus, 11, false);

    // 11 kept candidates + 7 specials; B's ten decile bins (freq 10 each)
    // outrank A (freq 5), ties between deciles break by ascending decile.
    REQUIRE(vocab.size() == 18);
    for (int d = 0; d < 10; ++d) {
        const TokenDef& t = vocab.tokens()[d];
        CHECK(t.kind == TokenKind::NumericDecile);
        CHECK(t.code == "B");
        CHECK(t.decile == d);
        CHECK(t.train_frequency == 10);
    }
    CHECK(vocab.tokens()[10].kind == TokenKind::Code);
    CHECK(vocab.tokens()[10].code == "A");
    CHECK(vocab.tokens()[10].train_frequency == 5);
    for (size_t i = 0; i < kSpecialTokenNames.size(); ++i) {
        CHECK(vocab.tokens()[11 + i].kind == TokenKind::Special);
        CHECK(vocab.tokens()[11 + i].name == kSpecialTokenNames[i]);
    }

    std::vector<double> sorted;
    for (int v = 1; v <= 100; ++v) sorted.push_back(v);
    auto cp = vocab.cutpoints("B");
    REQUIRE(cp.size() == 9);
    for (int i = 0; i < 9; ++i) {
        CHECK(cp[i] == percentile_oracle(sorted, 10.0 * (i + 1)));
        CHECK(cp[i] == doctest::Approx(10.9 + 9.9 * i).epsilon(1e-12));
    }
}

TEST_CASE("decile_of counts cutpoints strictly below the value") {
    auto corpus = reference_corpus();
    Vocabulary vocab = build_vocabulary(corpus, 11, false);
    CHECK(vocab.decile_of("B", 55.0) == 5);
    CHECK(vocab.decile_of("B", 0.0) == 0);       // below all cutpoints
    CHECK(vocab.decile_of("B", 1e9) == 9);       // above all cutpoints clamps
    CHECK(vocab.decile_of("B", -1e9) == 0);
    auto cp = vocab.cutpoints("B");
    CHECK(vocab.decile_of("B", cp[0]) == 0);     // equality is not strictly-less
    CHECK(vocab.decile_of("B", cp[8]) == 8);
    CHECK_THROWS(vocab.decile_of("A", 1.0));
}

TEST_CASE("each code's decile bins hold equal counts within one") {
    Rng rng(404);
    std::vector<Event> events;
    std::map<std::string, std::vector<double>> values_by_code;
    for (int i = 0; i < 3000; ++i) {
        std::string code = "LAB" + std::to_string(rng.bounded(5));
        double v = rng.uniform(-50.0, 50.0);
        values_by_code[code].push_back(v);
        events.push_back({i, code, v, std::nullopt});
    }
    auto corpus = std::vector<PatientTimeline>{timeline_of("p", std::move(events))};
    Vocabulary vocab = build_vocabulary(corpus, 50, false);

    for (auto& [code, values] : values_by_code) {
        std::array<int, 10> bins{};
        for (double v : values) ++bins[vocab.decile_of(code, v)];
        int lo = *std::min_element(bins.begin(), bins.end());
        int hi = *std::max_element(bins.begin(), bins.end());
        CHECK(hi - lo <= 1);
    }
}

TEST_CASE("candidate ranking: frequency desc, then kind, code, value") {
    std::vector<Event> events;
    // freq 3: valueless Z; freq 3: categorical M=x; freq 2: valueless A.
    for (int i = 0; i < 3; ++i) events.push_back({i, "Z", {}, std::nullopt});
    for (int i = 0; i < 3; ++i) events.push_back({10 + i, "M", std::string("x"), std::nullopt});
    for (int i = 0; i < 2; ++i) events.push_back({20 + i, "A", {}, std::nullopt});
    events.push_back({30, "M", std::string("y"), std::nullopt});
    auto corpus = std::vector<PatientTimeline>{timeline_of("p", std::move(events))};

    Vocabulary vocab = build_vocabulary(corpus, 10, false);
    const auto& toks = vocab.tokens();
    // Z and M=x tie at 3; Code kind sorts before Categorical.
    CHECK(toks[0].code == "Z");
    CHECK(toks[0].kind == TokenKind::Code);
    CHECK(toks[1].code == "M");
    CHECK(toks[1].value == "x");
    CHECK(toks[2].code == "A");
    CHECK(toks[3].value == "y");

    // top_k truncation drops the tail candidate entirely.
    Vocabulary cut = build_vocabulary(corpus, 3, false);
    CHECK(cut.size() == 3 + 7);
    CHECK(cut.categorical_token("M", "y") == -1);
    CHECK(cut.code_token("A") >= 0);
}

TEST_CASE("specials and att blocks are appended in fixed order") {
    auto corpus = reference_corpus();
    Vocabulary vocab = build_vocabulary(corpus, 11, true);
    CHECK(vocab.size() == 11 + 7 + 25);
    CHECK(vocab.has_att());
    const auto& names = att_token_names();
    REQUIRE(names.size() == 25);
    CHECK(names.front() == "D_1");
    CHECK(names[5] == "D_6");
    CHECK(names[6] == "W_1");
    CHECK(names[9] == "W_4");
    CHECK(names[10] == "M_1");
    CHECK(names[21] == "M_12");
    CHECK(names[22] == "LT");
    CHECK(names[23] == "VS");
    CHECK(names[24] == "VE");
    for (size_t i = 0; i < names.size(); ++i)
        CHECK(vocab.att(names[i]) == static_cast<int32_t>(18 + i));
    CHECK(vocab.special("[BOS]") == 11);
    CHECK(vocab.special("[MASK]") == 17);

    Vocabulary no_att = build_vocabulary(corpus, 11, false);
    CHECK(!no_att.has_att());
    CHECK_THROWS_AS(no_att.att("VS"), std::logic_error);
}

TEST_CASE("gap day table matches the fixture and its boundaries") {
    CHECK(att_name_for_gap_days(3) == "D_3");
    CHECK(att_name_for_gap_days(10) == "W_1");
    CHECK(att_name_for_gap_days(30) == "M_1");
    CHECK(att_name_for_gap_days(400) == "LT");
    CHECK(att_name_for_gap_days(0) == "");

    CHECK(att_name_for_gap_days(-2) == "");
    CHECK(att_name_for_gap_days(1) == "D_1");
    CHECK(att_name_for_gap_days(6) == "D_6");
    CHECK(att_name_for_gap_days(7) == "W_1");
    CHECK(att_name_for_gap_days(13) == "W_1");
    CHECK(att_name_for_gap_days(14) == "W_2");
    CHECK(att_name_for_gap_days(27) == "W_3");
    CHECK(att_name_for_gap_days(28) == "M_1");
    CHECK(att_name_for_gap_days(55) == "M_1");
    CHECK(att_name_for_gap_days(56) == "M_2");
    CHECK(att_name_for_gap_days(336) == "M_12");
    CHECK(att_name_for_gap_days(364) == "M_12");
    CHECK(att_name_for_gap_days(365) == "LT");

    CHECK(att_gap_floor_days("D_3") == 3);
    CHECK(att_gap_floor_days("W_2") == 14);
    CHECK(att_gap_floor_days("M_12") == 336);
    CHECK(att_gap_floor_days("LT") == 365);
    CHECK(att_gap_floor_days("VS") == 0);
    CHECK(att_gap_floor_days("VE") == 0);
    CHECK_THROWS(att_gap_floor_days("[BOS]"));
}

TEST_CASE("encode maps events through value shape and drops OOV") {
    auto corpus = reference_corpus();
    Vocabulary vocab = build_vocabulary(corpus, 11, false);
    PatientTimeline tl = timeline_of("q", {
        {0, "A", {}, std::nullopt},
        {1, "B", 55.0, std::nullopt},
        {2, "C", {}, std::nullopt},               // unknown code: dropped
        {3, "A", std::string("oops"), std::nullopt},  // unseen categorical: dropped
        {4, "C", 3.0, std::nullopt},              // numeric without cutpoints: dropped
        {5, "B", 1e9, std::nullopt},              // clamps to decile 9
    });
    TokenSequence seq = encode(tl, vocab);
    CHECK(seq.patient_id == "q");
    REQUIRE(seq.token_ids.size() == 3);
    CHECK(seq.token_ids[0] == vocab.code_token("A"));
    CHECK(seq.token_ids[1] == vocab.numeric_token("B", 5));
    CHECK(seq.token_ids[2] == vocab.numeric_token("B", 9));
    CHECK(seq.source_times == std::vector<int64_t>{0, 1, 5});
}

TEST_CASE("encode_with_att wraps visits and inserts gap tokens") {
    auto corpus = reference_corpus();
    Vocabulary vocab = build_vocabulary(corpus, 11, true);
    const int64_t day = 86400;

    int64_t v2_start = 3600 + 3 * day;       // 3 whole days after v1 ends
    int64_t v2_end = v2_start + 60;
    int64_t v3_start = v2_end + 1000;        // same day: no ATT token
    PatientTimeline tl = timeline_of("p", {
        {0, "A", {}, std::string("v1")},
        {3600, "B", 55.0, std::string("v1")},
        {v2_start, "A", {}, std::string("v2")},
        {v2_end, "A", {}, std::string("v2")},
        {v3_start, "B", 1.0, std::string("v3")},
    });
    TokenSequence seq = encode_with_att(tl, vocab);

    int32_t vs = vocab.att("VS"), ve = vocab.att("VE");
    int32_t a = vocab.code_token("A");
    std::vector<int32_t> expect{vs, a,  vocab.numeric_token("B", 5), ve,
                                vocab.att("D_3"), vs, a, a, ve,
                                vs, vocab.numeric_token("B", 0), ve};
    CHECK(seq.token_ids == expect);
    std::vector<int64_t> expect_times{0, 0, 3600, 3600,
                                      v2_start, v2_start, v2_start, v2_end, v2_end,
                                      v3_start, v3_start, v3_start};
    CHECK(seq.source_times == expect_times);
}

TEST_CASE("encode_with_att gap fixture: 3d, 10d, 30d, 400d, same-day") {
    auto corpus = reference_corpus();
    Vocabulary vocab = build_vocabulary(corpus, 11, true);
    const int64_t day = 86400;
    std::vector<int64_t> gaps_days{3, 10, 30, 400, 0};
    std::vector<std::string> expected{"D_3", "W_1", "M_1", "LT", ""};

    std::vector<Event> events;
    int64_t t = 0;
    events.push_back({t, "A", {}, std::string("v0")});
    for (size_t i = 0; i < gaps_days.size(); ++i) {
        t += gaps_days[i] * day;
        if (gaps_days[i] == 0) t += 120;  // same-day revisit, short of one day
        events.push_back({t, "A", {}, std::string("v" + std::to_string(i + 1))});
    }
    TokenSequence seq = encode_with_att(timeline_of("p", std::move(events)), vocab);

    std::vector<std::string> got;
    for (int32_t id : seq.token_ids) {
        const TokenDef& tok = vocab.tokens()[id];
        if (tok.kind == TokenKind::Att && tok.name != "VS" && tok.name != "VE")
            got.push_back(tok.name);
    }
    std::vector<std::string> want;
    for (const auto& e : expected)
        if (!e.empty()) want.push_back(e);
    CHECK(got == want);

    // Visit count: one VS/VE pair per visit regardless of gap tokens.
    size_t n_vs = std::count(seq.token_ids.begin(), seq.token_ids.end(), vocab.att("VS"));
    size_t n_ve = std::count(seq.token_ids.begin(), seq.token_ids.end(), vocab.att("VE"));
    CHECK(n_vs == 6);
    CHECK(n_ve == 6);
}

TEST_CASE("revisiting a visit_id later starts a fresh visit") {
    auto corpus = reference_corpus();
    Vocabulary vocab = build_vocabulary(corpus, 11, true);
    PatientTimeline tl = timeline_of("p", {
        {0, "A", {}, std::string("v1")},
        {10 * 86400, "A", {}, std::string("v2")},
        {20 * 86400, "A", {}, std::string("v1")},
    });
    TokenSequence seq = encode_with_att(tl, vocab);
    size_t n_vs = std::count(seq.token_ids.begin(), seq.token_ids.end(), vocab.att("VS"));
    CHECK(n_vs == 3);
}

TEST_CASE("encode_with_att validates visit ids and vocabulary capability") {
    auto corpus = reference_corpus();
    Vocabulary with = build_vocabulary(corpus, 11, true);
    Vocabulary without = build_vocabulary(corpus, 11, false);
    PatientTimeline missing = timeline_of("p", {{0, "A", {}, std::nullopt}});
    PatientTimeline ok = timeline_of("p", {{0, "A", {}, std::string("v")}});
    CHECK_THROWS_AS(encode_with_att(missing, with), std::invalid_argument);
    CHECK_THROWS_AS(encode_with_att(ok, without), std::invalid_argument);
    CHECK_THROWS_AS(encode_corpus(std::vector<PatientTimeline>{missing}, with, true),
                    std::invalid_argument);
}

TEST_CASE("strip_att recovers the plain encoding on random timelines") {
    Rng rng(2024);
    std::vector<PatientTimeline> timelines;
    for (int p = 0; p < 1000; ++p) {
        std::vector<Event> events;
        int64_t t = static_cast<int64_t>(rng.bounded(1000));
        int n_visits = 1 + static_cast<int>(rng.bounded(6));
        for (int v = 0; v < n_visits; ++v) {
            if (v > 0) t += static_cast<int64_t>(rng.bounded(500 * 86400));
            std::string vid = "v" + std::to_string(v);
            int n_ev = 1 + static_cast<int>(rng.bounded(5));
            for (int e = 0; e < n_ev; ++e) {
                Event ev;
                ev.time = t;
                ev.visit_id = vid;
                uint64_t kind = rng.bounded(3);
                ev.code = "C" + std::to_string(rng.bounded(8));
                if (kind == 1) ev.value = rng.uniform(0.0, 10.0);
                else if (kind == 2) ev.value = std::string(1, static_cast<char>('a' + rng.bounded(3)));
                events.push_back(std::move(ev));
                t += static_cast<int64_t>(rng.bounded(3600));
            }
        }
        timelines.push_back(timeline_of("p" + std::to_string(p), std::move(events)));
    }

    for (int top_k : {1000, 12}) {  // 12 forces OOV drops
        Vocabulary vocab = build_vocabulary(timelines, top_k, true);
        auto with_att = encode_corpus(timelines, vocab, true);
        auto plain = encode_corpus(timelines, vocab, false);
        REQUIRE(with_att.size() == plain.size());
        for (size_t i = 0; i < plain.size(); ++i)
            CHECK(strip_att(with_att[i], vocab) == plain[i]);
    }
}

TEST_CASE("vocabulary json round-trips byte-identically") {
    Rng rng(5);
    std::vector<Event> events;
    for (int i = 0; i < 500; ++i) {
        Event ev;
        ev.time = i;
        ev.code = "C" + std::to_string(rng.bounded(10));
        uint64_t kind = rng.bounded(3);
        if (kind == 1) ev.value = rng.uniform(0.0, 1.0);
        else if (kind == 2) ev.value = std::string("cat") + std::to_string(rng.bounded(4));
        events.push_back(std::move(ev));
    }
    auto corpus = std::vector<PatientTimeline>{timeline_of("p", std::move(events))};
    Vocabulary vocab = build_vocabulary(corpus, 40, true);

    std::string first = vocab.to_json_string();
    std::istringstream in(first);
    Vocabulary loaded = Vocabulary::load(in);
    CHECK(loaded.to_json_string() == first);
    CHECK(loaded.tokens() == vocab.tokens());
    CHECK(loaded.top_k() == vocab.top_k());
    CHECK(loaded.all_cutpoints() == vocab.all_cutpoints());

    std::istringstream bad(R"({"version": 99, "top_k": 1, "tokens": [], "cutpoints": {}})");
    CHECK_THROWS(Vocabulary::load(bad));
}

TEST_CASE("parallel and serial vocabulary builds agree bytewise") {
    Rng rng(77);
    std::vector<PatientTimeline> corpus;
    for (int p = 0; p < 150; ++p) {
        std::vector<Event> events;
        int n = 1 + static_cast<int>(rng.bounded(30));
        for (int i = 0; i < n; ++i) {
            Event ev;
            ev.time = i;
            ev.code = "C" + std::to_string(rng.bounded(20));
            if (rng.bernoulli(0.5)) ev.value = rng.uniform(0.0, 100.0);
            events.push_back(std::move(ev));
        }
        corpus.push_back(timeline_of("p" + std::to_string(p), std::move(events)));
    }
    Vocabulary par = build_vocabulary(corpus, 60, true);
    Vocabulary ser = build_vocabulary_serial(corpus, 60, true);
    CHECK(par.to_json_string() == ser.to_json_string());
}

TEST_CASE("vocabulary constructor enforces structural invariants") {
    auto corpus = reference_corpus();
    Vocabulary good = build_vocabulary(corpus, 11, false);
    std::vector<TokenDef> toks = good.tokens();

    auto cps = good.all_cutpoints();
    std::vector<TokenDef> holey = toks;
    holey[3].id = 99;
    CHECK_THROWS(Vocabulary(holey, cps, 11));

    std::vector<TokenDef> no_specials(toks.begin(), toks.begin() + 11);
    CHECK_THROWS(Vocabulary(no_specials, cps, 11));

    auto short_cp = cps;
    short_cp["B"].pop_back();
    CHECK_THROWS(Vocabulary(toks, short_cp, 11));

    auto unsorted_cp = cps;
    std::swap(unsorted_cp["B"][0], unsorted_cp["B"][8]);
    CHECK_THROWS(Vocabulary(toks, unsorted_cp, 11));
}

TEST_CASE("token sequence jsonl round-trips") {
    std::vector<TokenSequence> seqs(2);
    seqs[0].patient_id = "p1";
    seqs[0].token_ids = {3, 1, 4, 1, 5};
    seqs[0].source_times = {10, 20, 30, 40, 50};
    seqs[1].patient_id = "p2";

    std::ostringstream out;
    write_token_sequences(out, seqs);
    std::istringstream in(out.str());
    CHECK(read_token_sequences(in) == seqs);

    std::istringstream bad(R"({"patient_id":"p","tokens":[1,2],"times":[1]})");
    CHECK_THROWS(read_token_sequences(bad));
}

TEST_CASE("build_vocabulary validates inputs") {
    auto corpus = reference_corpus();
    CHECK_THROWS_AS(build_vocabulary(corpus, 0, false), std::invalid_argument);
    std::vector<PatientTimeline> empty;
    CHECK_THROWS_AS(build_vocabulary(empty, 5, false), std::invalid_argument);
    std::vector<PatientTimeline> no_events{timeline_of("p", {})};
    CHECK_THROWS_AS(build_vocabulary(no_events, 5, false), std::invalid_argument);
}
