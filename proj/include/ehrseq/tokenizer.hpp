#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ehrseq/event_stream.hpp"

namespace ehrseq {

enum class TokenKind { Code, Categorical, NumericDecile, Special, Att };

const char* token_kind_name(TokenKind k);
TokenKind token_kind_from_name(const std::string& s);

struct TokenDef {
    int32_t id = -1;
    TokenKind kind = TokenKind::Code;
    std::string code;    // Code / Categorical / NumericDecile
    std::string value;   // Categorical
    int decile = -1;     // NumericDecile
    std::string name;    // Special / Att
    uint64_t train_frequency = 0;

    bool operator==(const TokenDef&) const = default;
};

inline constexpr std::array<const char*, 7> kSpecialTokenNames = {
    "[BOS]", "[EOS]", "[UNK]", "[SEP]", "[PAD]", "[CLS]", "[MASK]"};

// D_1..D_6, W_1..W_4, M_1..M_12, LT, VS, VE (25 names, in that order).
const std::vector<std::string>& att_token_names();

// Name of the gap token for a whole-day gap d, or "" when d < 1 (no token).
std::string att_name_for_gap_days(int64_t d);
// Lower bound of the gap bin in days; VS/VE count as 0. Used for
// time-denominated generation budgets.
int att_gap_floor_days(const std::string& att_name);

class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(std::vector<TokenDef> tokens, std::map<std::string, std::vector<double>> cutpoints,
               int top_k);

    const std::vector<TokenDef>& tokens() const { return tokens_; }
    int32_t size() const { return static_cast<int32_t>(tokens_.size()); }
    int top_k() const { return top_k_; }
    bool has_att() const { return !att_ids_.empty(); }

    // Lookups return -1 when the token is not in the vocabulary.
    int32_t code_token(const std::string& code) const;
    int32_t categorical_token(const std::string& code, const std::string& value) const;
    int32_t numeric_token(const std::string& code, int decile) const;

    // Specials/ATT are structural; asking for a missing one is a logic error.
    int32_t special(const std::string& name) const;
    int32_t att(const std::string& name) const;

    bool has_cutpoints(const std::string& code) const;
    std::span<const double> cutpoints(const std::string& code) const;
    const std::map<std::string, std::vector<double>>& all_cutpoints() const { return cutpoints_; }

    // Count of cutpoints strictly below value: below the 10th percentile -> 0,
    // at/above the 90th -> 9. Throws on a code without cutpoints.
    int decile_of(const std::string& code, double value) const;

    bool is_att_token(int32_t id) const;

    void save(std::ostream& out) const;
    std::string to_json_string() const;
    static Vocabulary load(std::istream& in);
    static Vocabulary load_file(const std::string& path);

private:
    void build_lookups();

    std::vector<TokenDef> tokens_;
    std::map<std::string, std::vector<double>> cutpoints_;
    int top_k_ = 0;
    std::unordered_map<std::string, int32_t> by_key_;  // packed lookup key -> id
    std::unordered_map<std::string, int32_t> att_ids_;
    std::unordered_map<std::string, int32_t> special_ids_;
};

struct TokenSequence {
    std::string patient_id;
    std::vector<int32_t> token_ids;
    std::vector<int64_t> source_times;  // parallel to token_ids

    bool operator==(const TokenSequence&) const = default;
};

// Candidate enumeration and ranking: valueless codes yield one candidate,
// categorical codes one per distinct value, numeric codes ten decile
// candidates with cutpoints at the 10th..90th percentiles of training values.
// Rank by (frequency desc, token key asc), keep top_k, append the 7 specials,
// then the ATT set iff with_att.
Vocabulary build_vocabulary(std::span<const PatientTimeline> train, int top_k, bool with_att);
Vocabulary build_vocabulary_serial(std::span<const PatientTimeline> train, int top_k, bool with_att);

// Out-of-vocabulary events are dropped, so output may be shorter than input.
TokenSequence encode(const PatientTimeline& timeline, const Vocabulary& vocab);

// VS v_1 VE ATT VS v_2 VE ... with visits = maximal consecutive runs of equal
// visit_id and the ATT token chosen from the whole-day end-to-start gap.
// Requires visit_id on every event and an ATT-enabled vocabulary.
TokenSequence encode_with_att(const PatientTimeline& timeline, const Vocabulary& vocab);

std::vector<TokenSequence> encode_corpus(std::span<const PatientTimeline> timelines,
                                         const Vocabulary& vocab, bool with_att);
std::vector<TokenSequence> encode_corpus_serial(std::span<const PatientTimeline> timelines,
                                                const Vocabulary& vocab, bool with_att);

// Removes ATT/VS/VE tokens; inverse of the ATT enclosure.
TokenSequence strip_att(const TokenSequence& seq, const Vocabulary& vocab);

// JSONL: {"patient_id": str, "tokens": [int], "times": [int]} per line.
void write_token_sequences(std::ostream& out, const std::vector<TokenSequence>& seqs);
std::vector<TokenSequence> read_token_sequences(std::istream& in);

}  // namespace ehrseq
