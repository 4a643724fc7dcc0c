#include "ehrseq/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <tuple>

#include <json.hpp>

#include "ehrseq/parallel.hpp"
#include "ehrseq/percentile.hpp"

namespace ehrseq {

using nlohmann::json;

const char* token_kind_name(TokenKind k) {
    switch (k) {
        case TokenKind::Code: return "code";
        case TokenKind::Categorical: return "cat";
        case TokenKind::NumericDecile: return "num_decile";
        case TokenKind::Special: return "special";
        case TokenKind::Att: return "att";
    }
    throw std::logic_error("bad TokenKind");
}

TokenKind token_kind_from_name(const std::string& s) {
    if (s == "code") return TokenKind::Code;
    if (s == "cat") return TokenKind::Categorical;
    if (s == "num_decile") return TokenKind::NumericDecile;
    if (s == "special") return TokenKind::Special;
    if (s == "att") return TokenKind::Att;
    throw std::runtime_error("unknown token kind '" + s + "'");
}

const std::vector<std::string>& att_token_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> v;
        for (int d = 1; d <= 6; ++d) v.push_back("D_" + std::to_string(d));
        for (int w = 1; w <= 4; ++w) v.push_back("W_" + std::to_string(w));
        for (int m = 1; m <= 12; ++m) v.push_back("M_" + std::to_string(m));
        v.push_back("LT");
        v.push_back("VS");
        v.push_back("VE");
        return v;
    }();
    return names;
}

std::string att_name_for_gap_days(int64_t d) {
    if (d < 1) return "";
    if (d < 7) return "D_" + std::to_string(d);
    if (d < 28) return "W_" + std::to_string(std::min<int64_t>(4, d / 7));
    if (d < 365) return "M_" + std::to_string(std::min<int64_t>(12, d / 28));
    return "LT";
}

int att_gap_floor_days(const std::string& att_name) {
    if (att_name == "LT") return 365;
    if (att_name == "VS" || att_name == "VE") return 0;
    if (att_name.size() > 2 && att_name[1] == '_') {
        int n = std::stoi(att_name.substr(2));
        if (att_name[0] == 'D') return n;
        if (att_name[0] == 'W') return 7 * n;
        if (att_name[0] == 'M') return 28 * n;
    }
    throw std::invalid_argument("not an ATT token name: " + att_name);
}

namespace {

// Lookup key for event-derived tokens. \x1f never occurs in wire-format
// fields as a separator collision risk worth worrying about; codes/values are
// arbitrary strings so a dedicated prefix byte disambiguates kinds.
std::string code_key(const std::string& code) { return "c\x1f" + code; }
std::string cat_key(const std::string& code, const std::string& value) {
    return "v\x1f" + code + "\x1f" + value;
}
std::string num_key(const std::string& code, int decile) {
    return "n\x1f" + code + "\x1f" + std::to_string(decile);
}

}  // namespace

Vocabulary::Vocabulary(std::vector<TokenDef> tokens,
                       std::map<std::string, std::vector<double>> cutpoints, int top_k)
    : tokens_(std::move(tokens)), cutpoints_(std::move(cutpoints)), top_k_(top_k) {
    build_lookups();
}

void Vocabulary::build_lookups() {
    by_key_.clear();
    att_ids_.clear();
    special_ids_.clear();
    for (size_t i = 0; i < tokens_.size(); ++i) {
        const TokenDef& t = tokens_[i];
        if (t.id != static_cast<int32_t>(i))
            throw std::runtime_error("vocabulary ids must be dense and in order");
        switch (t.kind) {
            case TokenKind::Code: by_key_[code_key(t.code)] = t.id; break;
            case TokenKind::Categorical: by_key_[cat_key(t.code, t.value)] = t.id; break;
            case TokenKind::NumericDecile: by_key_[num_key(t.code, t.decile)] = t.id; break;
            case TokenKind::Special: special_ids_[t.name] = t.id; break;
            case TokenKind::Att: att_ids_[t.name] = t.id; break;
        }
    }
    if (special_ids_.size() != kSpecialTokenNames.size())
        throw std::runtime_error("vocabulary must contain exactly the 7 special tokens");
    for (const auto& [code, cp] : cutpoints_) {
        if (cp.size() != 9) throw std::runtime_error("cutpoints must have 9 entries: " + code);
        if (!std::is_sorted(cp.begin(), cp.end()))
            throw std::runtime_error("cutpoints must be nondecreasing: " + code);
    }
}

int32_t Vocabulary::code_token(const std::string& code) const {
    auto it = by_key_.find(code_key(code));
    return it == by_key_.end() ? -1 : it->second;
}

int32_t Vocabulary::categorical_token(const std::string& code, const std::string& value) const {
    auto it = by_key_.find(cat_key(code, value));
    return it == by_key_.end() ? -1 : it->second;
}

int32_t Vocabulary::numeric_token(const std::string& code, int decile) const {
    auto it = by_key_.find(num_key(code, decile));
    return it == by_key_.end() ? -1 : it->second;
}

int32_t Vocabulary::special(const std::string& name) const {
    auto it = special_ids_.find(name);
    if (it == special_ids_.end()) throw std::logic_error("missing special token " + name);
    return it->second;
}

int32_t Vocabulary::att(const std::string& name) const {
    auto it = att_ids_.find(name);
    if (it == att_ids_.end()) throw std::logic_error("missing ATT token " + name);
    return it->second;
}

bool Vocabulary::has_cutpoints(const std::string& code) const {
    return cutpoints_.count(code) != 0;
}

std::span<const double> Vocabulary::cutpoints(const std::string& code) const {
    auto it = cutpoints_.find(code);
    if (it == cutpoints_.end()) throw std::invalid_argument("no cutpoints for code " + code);
    return it->second;
}

int Vocabulary::decile_of(const std::string& code, double value) const {
    auto cp = cutpoints(code);
    // lower_bound index = number of cutpoints strictly below value.
    return static_cast<int>(std::lower_bound(cp.begin(), cp.end(), value) - cp.begin());
}

bool Vocabulary::is_att_token(int32_t id) const {
    return id >= 0 && id < size() && tokens_[id].kind == TokenKind::Att;
}

namespace {

struct Candidate {
    TokenKind kind;
    std::string code;
    std::string value;
    int decile = -1;
    uint64_t freq = 0;

    // Total order for ranking ties: kind, then code, value, decile.
    std::tuple<int, const std::string&, const std::string&, int> key() const {
        return {static_cast<int>(kind), code, value, decile};
    }
};

struct FreqTables {
    std::map<std::string, uint64_t> code_freq;
    std::map<std::string, std::map<std::string, uint64_t>> cat_freq;
    std::map<std::string, std::vector<double>> numeric_values;

    void add(const Event& ev) {
        if (ev.is_numeric()) numeric_values[ev.code].push_back(ev.numeric());
        else if (ev.is_categorical()) ++cat_freq[ev.code][ev.categorical()];
        else ++code_freq[ev.code];
    }

    void merge_from(FreqTables& other) {
        for (auto& [c, n] : other.code_freq) code_freq[c] += n;
        for (auto& [c, vals] : other.cat_freq)
            for (auto& [v, n] : vals) cat_freq[c][v] += n;
        for (auto& [c, vals] : other.numeric_values) {
            auto& dst = numeric_values[c];
            dst.insert(dst.end(), vals.begin(), vals.end());
        }
    }
};

Vocabulary build_vocabulary_impl(std::span<const PatientTimeline> train, int top_k, bool with_att,
                                 bool parallel) {
    if (top_k < 1) throw std::invalid_argument("top_k must be >= 1");
    size_t n_events = 0;
    for (const auto& tl : train) n_events += tl.events.size();
    if (train.empty() || n_events == 0) throw std::invalid_argument("empty training corpus");

    // Per-block tables merged in block order; merge is a sum/concat so the
    // result is independent of both block count and thread count.
    size_t n_blocks = parallel ? std::min<size_t>(train.size(), 64) : 1;
    std::vector<FreqTables> blocks(n_blocks);
    auto block_range = [&](size_t b) {
        size_t lo = train.size() * b / n_blocks;
        size_t hi = train.size() * (b + 1) / n_blocks;
        return std::pair{lo, hi};
    };
    auto fill_block = [&](size_t b) {
        auto [lo, hi] = block_range(b);
        for (size_t i = lo; i < hi; ++i)
            for (const Event& ev : train[i].events) blocks[b].add(ev);
    };
    if (parallel) parallel_for(n_blocks, fill_block);
    else serial_for(n_blocks, fill_block);

    FreqTables tables = std::move(blocks[0]);
    for (size_t b = 1; b < n_blocks; ++b) tables.merge_from(blocks[b]);

    std::vector<Candidate> candidates;
    for (const auto& [code, freq] : tables.code_freq)
        candidates.push_back({TokenKind::Code, code, "", -1, freq});
    for (const auto& [code, values] : tables.cat_freq)
        for (const auto& [value, freq] : values)
            candidates.push_back({TokenKind::Categorical, code, value, -1, freq});

    std::map<std::string, std::vector<double>> cutpoints;
    for (auto& [code, values] : tables.numeric_values) {
        std::sort(values.begin(), values.end());
        std::vector<double> cp(9);
        for (int i = 0; i < 9; ++i) cp[i] = percentile_sorted(values, 10.0 * (i + 1));
        uint64_t bin_counts[10] = {};
        for (double v : values) {
            int d = static_cast<int>(std::lower_bound(cp.begin(), cp.end(), v) - cp.begin());
            ++bin_counts[d];
        }
        for (int d = 0; d < 10; ++d)
            candidates.push_back({TokenKind::NumericDecile, code, "", d, bin_counts[d]});
        cutpoints[code] = std::move(cp);
    }

    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.freq != b.freq) return a.freq > b.freq;
        return a.key() < b.key();
    });
    if (candidates.size() > static_cast<size_t>(top_k)) candidates.resize(top_k);

    std::vector<TokenDef> tokens;
    tokens.reserve(candidates.size() + 7 + 25);
    std::map<std::string, std::vector<double>> kept_cutpoints;
    for (const Candidate& c : candidates) {
        TokenDef t;
        t.id = static_cast<int32_t>(tokens.size());
        t.kind = c.kind;
        t.code = c.code;
        t.value = c.value;
        t.decile = c.decile;
        t.train_frequency = c.freq;
        if (c.kind == TokenKind::NumericDecile && !kept_cutpoints.count(c.code))
            kept_cutpoints[c.code] = cutpoints[c.code];
        tokens.push_back(std::move(t));
    }
    for (const char* name : kSpecialTokenNames) {
        TokenDef t;
        t.id = static_cast<int32_t>(tokens.size());
        t.kind = TokenKind::Special;
        t.name = name;
        tokens.push_back(std::move(t));
    }
    if (with_att) {
        for (const std::string& name : att_token_names()) {
            TokenDef t;
            t.id = static_cast<int32_t>(tokens.size());
            t.kind = TokenKind::Att;
            t.name = name;
            tokens.push_back(std::move(t));
        }
    }
    return Vocabulary(std::move(tokens), std::move(kept_cutpoints), top_k);
}

}  // namespace

Vocabulary build_vocabulary(std::span<const PatientTimeline> train, int top_k, bool with_att) {
    return build_vocabulary_impl(train, top_k, with_att, true);
}

Vocabulary build_vocabulary_serial(std::span<const PatientTimeline> train, int top_k, bool with_att) {
    return build_vocabulary_impl(train, top_k, with_att, false);
}

namespace {

// Token for one event, or -1 when the event is out of vocabulary (dropped).
int32_t event_token(const Event& ev, const Vocabulary& vocab) {
    if (ev.is_numeric()) {
        if (!vocab.has_cutpoints(ev.code)) return -1;
        return vocab.numeric_token(ev.code, vocab.decile_of(ev.code, ev.numeric()));
    }
    if (ev.is_categorical()) return vocab.categorical_token(ev.code, ev.categorical());
    return vocab.code_token(ev.code);
}

}  // namespace

TokenSequence encode(const PatientTimeline& timeline, const Vocabulary& vocab) {
    TokenSequence seq;
    seq.patient_id = timeline.patient_id;
    seq.token_ids.reserve(timeline.events.size());
    seq.source_times.reserve(timeline.events.size());
    for (const Event& ev : timeline.events) {
        int32_t id = event_token(ev, vocab);
        if (id < 0) continue;
        seq.token_ids.push_back(id);
        seq.source_times.push_back(ev.time);
    }
    return seq;
}

TokenSequence encode_with_att(const PatientTimeline& timeline, const Vocabulary& vocab) {
    if (!vocab.has_att())
        throw std::invalid_argument("encode_with_att requires a vocabulary built with ATT tokens");
    for (const Event& ev : timeline.events)
        if (!ev.visit_id)
            throw std::invalid_argument("encode_with_att: event without visit_id for patient " +
                                        timeline.patient_id);

    TokenSequence seq;
    seq.patient_id = timeline.patient_id;
    const auto& events = timeline.events;
    const int32_t vs = vocab.att("VS"), ve = vocab.att("VE");

    size_t i = 0;
    int64_t prev_end = 0;
    bool first_visit = true;
    while (i < events.size()) {
        size_t j = i;
        while (j < events.size() && *events[j].visit_id == *events[i].visit_id) ++j;
        int64_t start = events[i].time;   // events are time-sorted, run min
        int64_t end = events[j - 1].time; // run max
        if (!first_visit) {
            int64_t d = (start - prev_end) / 86400;
            std::string name = att_name_for_gap_days(d);
            if (!name.empty()) {
                seq.token_ids.push_back(vocab.att(name));
                seq.source_times.push_back(start);
            }
        }
        seq.token_ids.push_back(vs);
        seq.source_times.push_back(start);
        for (size_t e = i; e < j; ++e) {
            int32_t id = event_token(events[e], vocab);
            if (id < 0) continue;
            seq.token_ids.push_back(id);
            seq.source_times.push_back(events[e].time);
        }
        seq.token_ids.push_back(ve);
        seq.source_times.push_back(end);
        prev_end = end;
        first_visit = false;
        i = j;
    }
    return seq;
}

std::vector<TokenSequence> encode_corpus(std::span<const PatientTimeline> timelines,
                                         const Vocabulary& vocab, bool with_att) {
    // Validate before the parallel region; exceptions cannot cross it.
    if (with_att) {
        if (!vocab.has_att())
            throw std::invalid_argument("encode_with_att requires a vocabulary built with ATT tokens");
        for (const auto& tl : timelines)
            for (const Event& ev : tl.events)
                if (!ev.visit_id)
                    throw std::invalid_argument(
                        "encode_with_att: event without visit_id for patient " + tl.patient_id);
    }
    std::vector<TokenSequence> out(timelines.size());
    parallel_for(timelines.size(), [&](size_t i) {
        out[i] = with_att ? encode_with_att(timelines[i], vocab) : encode(timelines[i], vocab);
    });
    return out;
}

std::vector<TokenSequence> encode_corpus_serial(std::span<const PatientTimeline> timelines,
                                                const Vocabulary& vocab, bool with_att) {
    std::vector<TokenSequence> out(timelines.size());
    serial_for(timelines.size(), [&](size_t i) {
        out[i] = with_att ? encode_with_att(timelines[i], vocab) : encode(timelines[i], vocab);
    });
    return out;
}

TokenSequence strip_att(const TokenSequence& seq, const Vocabulary& vocab) {
    TokenSequence out;
    out.patient_id = seq.patient_id;
    for (size_t i = 0; i < seq.token_ids.size(); ++i) {
        if (vocab.is_att_token(seq.token_ids[i])) continue;
        out.token_ids.push_back(seq.token_ids[i]);
        out.source_times.push_back(seq.source_times[i]);
    }
    return out;
}

std::string Vocabulary::to_json_string() const {
    json j;
    j["version"] = 1;
    j["top_k"] = top_k_;
    json toks = json::array();
    for (const TokenDef& t : tokens_) {
        json tj;
        tj["id"] = t.id;
        tj["kind"] = token_kind_name(t.kind);
        tj["freq"] = t.train_frequency;
        switch (t.kind) {
            case TokenKind::Code: tj["code"] = t.code; break;
            case TokenKind::Categorical:
                tj["code"] = t.code;
                tj["value"] = t.value;
                break;
            case TokenKind::NumericDecile:
                tj["code"] = t.code;
                tj["decile"] = t.decile;
                break;
            case TokenKind::Special:
            case TokenKind::Att: tj["name"] = t.name; break;
        }
        toks.push_back(std::move(tj));
    }
    j["tokens"] = std::move(toks);
    json cps = json::object();
    for (const auto& [code, cp] : cutpoints_) cps[code] = cp;
    j["cutpoints"] = std::move(cps);
    return j.dump(1);
}

void Vocabulary::save(std::ostream& out) const { out << to_json_string() << '\n'; }

Vocabulary Vocabulary::load(std::istream& in) {
    json j = json::parse(in);
    if (!j.is_object() || j.value("version", 0) != 1)
        throw std::runtime_error("unsupported vocabulary file version");
    std::vector<TokenDef> tokens;
    for (const json& tj : j.at("tokens")) {
        TokenDef t;
        t.id = tj.at("id").get<int32_t>();
        t.kind = token_kind_from_name(tj.at("kind").get<std::string>());
        t.train_frequency = tj.value("freq", uint64_t{0});
        t.code = tj.value("code", "");
        t.value = tj.value("value", "");
        t.decile = tj.value("decile", -1);
        t.name = tj.value("name", "");
        tokens.push_back(std::move(t));
    }
    std::map<std::string, std::vector<double>> cutpoints;
    for (auto it = j.at("cutpoints").begin(); it != j.at("cutpoints").end(); ++it)
        cutpoints[it.key()] = it.value().get<std::vector<double>>();
    return Vocabulary(std::move(tokens), std::move(cutpoints), j.at("top_k").get<int>());
}

Vocabulary Vocabulary::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
    return load(in);
}

void write_token_sequences(std::ostream& out, const std::vector<TokenSequence>& seqs) {
    for (const TokenSequence& s : seqs) {
        json j;
        j["patient_id"] = s.patient_id;
        j["tokens"] = s.token_ids;
        j["times"] = s.source_times;
        out << j.dump() << '\n';
    }
}

std::vector<TokenSequence> read_token_sequences(std::istream& in) {
    std::vector<TokenSequence> seqs;
    std::string line;
    size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            TokenSequence s;
            s.patient_id = j.at("patient_id").get<std::string>();
            s.token_ids = j.at("tokens").get<std::vector<int32_t>>();
            s.source_times = j.at("times").get<std::vector<int64_t>>();
            if (s.token_ids.size() != s.source_times.size())
                throw std::runtime_error("tokens/times length mismatch");
            seqs.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw std::runtime_error("row " + std::to_string(row) + ": " + e.what());
        }
    }
    return seqs;
}

}  // namespace ehrseq
