#include "ehrseq/ngram_lm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "ehrseq/parallel.hpp"

namespace ehrseq {

namespace {

void append_token(std::string& key, int32_t t) {
    char buf[4];
    uint32_t u = static_cast<uint32_t>(t);
    buf[0] = static_cast<char>(u & 0xff);
    buf[1] = static_cast<char>((u >> 8) & 0xff);
    buf[2] = static_cast<char>((u >> 16) & 0xff);
    buf[3] = static_cast<char>((u >> 24) & 0xff);
    key.append(buf, 4);
}

// Packed key of the last (j-1) tokens before position i, [BOS]-padded on the
// left, optionally followed by the token at position i itself.
std::string context_key(std::span<const int32_t> seq, size_t i, int j, int32_t bos) {
    std::string key;
    key.reserve(4 * static_cast<size_t>(j));
    for (int back = j - 1; back >= 1; --back) {
        int64_t pos = static_cast<int64_t>(i) - back;
        append_token(key, pos < 0 ? bos : seq[static_cast<size_t>(pos)]);
    }
    return key;
}

void write_bytes(std::ostream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u64(std::ostream& out, uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    write_bytes(out, buf, 8);
}

void write_i32(std::ostream& out, int32_t v) {
    char buf[4];
    uint32_t u = static_cast<uint32_t>(v);
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xff);
    write_bytes(out, buf, 4);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<uint64_t>(v)); }

void read_bytes(std::istream& in, void* p, size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) throw std::runtime_error("truncated model file");
}

uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    read_bytes(in, buf, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

int32_t read_i32(std::istream& in) {
    unsigned char buf[4];
    read_bytes(in, buf, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[i]) << (8 * i);
    return static_cast<int32_t>(v);
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

void validate_params(NGramModel::Params& p) {
    if (p.order < 1) throw std::invalid_argument("ngram order must be >= 1");
    if (!(p.kappa > 0.0)) throw std::invalid_argument("kappa must be > 0");
    if (p.vocab_size < 1) throw std::invalid_argument("vocab_size must be >= 1");
    if (p.lambdas.empty())
        p.lambdas.assign(static_cast<size_t>(p.order), 1.0 / p.order);
    if (p.lambdas.size() != static_cast<size_t>(p.order))
        throw std::invalid_argument("lambdas must have one weight per order");
    double sum = 0;
    for (double l : p.lambdas) {
        if (l < 0) throw std::invalid_argument("lambdas must be nonnegative");
        sum += l;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("lambdas must sum to 1");
    if (p.order > 1 && (p.bos_id < 0 || p.bos_id >= p.vocab_size))
        throw std::invalid_argument("orders > 1 need a valid bos_id for left padding");
    if (p.eos_id >= p.vocab_size) throw std::invalid_argument("eos_id out of range");
}

}  // namespace

NGramModel NGramModel::fit_impl(std::span<const TokenSequence> sequences, Params params,
                                bool parallel) {
    validate_params(params);
    const int m = params.order;
    const int32_t V = params.vocab_size;

    // Validate before the parallel region; exceptions cannot cross it.
    for (const TokenSequence& s : sequences)
        for (int32_t t : s.token_ids)
            if (t < 0 || t >= V)
                throw std::invalid_argument("token id out of vocabulary range in corpus");

    using CountMaps = std::vector<std::unordered_map<std::string, uint64_t>>;
    size_t n_blocks = parallel ? std::min<size_t>(std::max<size_t>(sequences.size(), 1), 64) : 1;
    std::vector<CountMaps> blocks(n_blocks, CountMaps(static_cast<size_t>(m)));

    auto count_block = [&](size_t b) {
        size_t lo = sequences.size() * b / n_blocks;
        size_t hi = sequences.size() * (b + 1) / n_blocks;
        CountMaps& maps = blocks[b];
        for (size_t s = lo; s < hi; ++s) {
            std::span<const int32_t> x = sequences[s].token_ids;
            for (size_t i = 0; i < x.size(); ++i) {
                for (int j = 1; j <= m; ++j) {
                    std::string key = context_key(x, i, j, params.bos_id);
                    append_token(key, x[i]);
                    ++maps[static_cast<size_t>(j - 1)][key];
                }
            }
        }
    };
    if (parallel) parallel_for(n_blocks, count_block);
    else serial_for(n_blocks, count_block);

    NGramModel model;
    model.params_ = std::move(params);
    model.ngram_counts_ = std::move(blocks[0]);
    // Merging sums counts, so block order cannot change the result.
    for (size_t b = 1; b < n_blocks; ++b)
        for (int j = 0; j < m; ++j)
            for (auto& [key, cnt] : blocks[b][static_cast<size_t>(j)])
                model.ngram_counts_[static_cast<size_t>(j)][key] += cnt;

    model.rebuild_context_totals();
    if (model.total_tokens_ == 0) throw std::invalid_argument("empty training corpus");
    return model;
}

NGramModel NGramModel::fit(std::span<const TokenSequence> sequences, Params params) {
    return fit_impl(sequences, std::move(params), true);
}

NGramModel NGramModel::fit_serial(std::span<const TokenSequence> sequences, Params params) {
    return fit_impl(sequences, std::move(params), false);
}

void NGramModel::rebuild_context_totals() {
    context_totals_.assign(ngram_counts_.size(), {});
    for (size_t j = 0; j < ngram_counts_.size(); ++j)
        for (const auto& [key, cnt] : ngram_counts_[j])
            context_totals_[j][key.substr(0, key.size() - 4)] += cnt;
    total_tokens_ = 0;
    if (!context_totals_.empty()) {
        auto it = context_totals_[0].find("");
        if (it != context_totals_[0].end()) total_tokens_ = it->second;
    }
}

double NGramModel::prob(std::span<const int32_t> context, int32_t token) const {
    if (token < 0 || token >= params_.vocab_size)
        throw std::invalid_argument("token id out of vocabulary range");
    const int m = params_.order;
    const double kV = params_.kappa * params_.vocab_size;
    double p = 0;
    for (int j = 1; j <= m; ++j) {
        std::string ctx = context_key(context, context.size(), j, params_.bos_id);
        uint64_t tot = 0;
        if (auto it = context_totals_[static_cast<size_t>(j - 1)].find(ctx);
            it != context_totals_[static_cast<size_t>(j - 1)].end())
            tot = it->second;
        std::string key = std::move(ctx);
        append_token(key, token);
        uint64_t cnt = 0;
        if (auto it = ngram_counts_[static_cast<size_t>(j - 1)].find(key);
            it != ngram_counts_[static_cast<size_t>(j - 1)].end())
            cnt = it->second;
        p += params_.lambdas[static_cast<size_t>(j - 1)] *
             ((static_cast<double>(cnt) + params_.kappa) / (static_cast<double>(tot) + kV));
    }
    return p;
}

double NGramModel::log_prob(std::span<const int32_t> context, int32_t token) const {
    return std::log(prob(context, token));
}

std::vector<double> NGramModel::conditional(std::span<const int32_t> context) const {
    const int m = params_.order;
    const int32_t V = params_.vocab_size;
    const double kV = params_.kappa * V;
    std::vector<double> ps(static_cast<size_t>(V), 0.0);
    for (int j = 1; j <= m; ++j) {
        std::string ctx = context_key(context, context.size(), j, params_.bos_id);
        uint64_t tot = 0;
        if (auto it = context_totals_[static_cast<size_t>(j - 1)].find(ctx);
            it != context_totals_[static_cast<size_t>(j - 1)].end())
            tot = it->second;
        const double denom = static_cast<double>(tot) + kV;
        const double lam = params_.lambdas[static_cast<size_t>(j - 1)];
        std::string key = ctx;
        key.resize(key.size() + 4);
        const auto& counts = ngram_counts_[static_cast<size_t>(j - 1)];
        for (int32_t t = 0; t < V; ++t) {
            uint32_t u = static_cast<uint32_t>(t);
            key[key.size() - 4] = static_cast<char>(u & 0xff);
            key[key.size() - 3] = static_cast<char>((u >> 8) & 0xff);
            key[key.size() - 2] = static_cast<char>((u >> 16) & 0xff);
            key[key.size() - 1] = static_cast<char>((u >> 24) & 0xff);
            uint64_t cnt = 0;
            if (auto it = counts.find(key); it != counts.end()) cnt = it->second;
            ps[static_cast<size_t>(t)] += lam * ((static_cast<double>(cnt) + params_.kappa) / denom);
        }
    }
    return ps;
}

std::vector<double> NGramModel::sequence_log_probs(std::span<const int32_t> sequence) const {
    for (int32_t t : sequence)
        if (t < 0 || t >= params_.vocab_size)
            throw std::invalid_argument("token id out of vocabulary range");
    std::vector<double> out(sequence.size());
    for (size_t i = 0; i < sequence.size(); ++i)
        out[i] = log_prob(sequence.subspan(0, i), sequence[i]);
    return out;
}

int32_t NGramModel::sample_next(std::span<const int32_t> context, Rng& rng,
                                double temperature) const {
    if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
    std::vector<double> ps = conditional(context);
    if (temperature != 1.0) {
        double inv_t = 1.0 / temperature;
        double sum = 0;
        for (double& p : ps) {
            p = std::pow(p, inv_t);
            sum += p;
        }
        for (double& p : ps) p /= sum;
    }
    double u = rng.uniform();
    double acc = 0;
    for (size_t t = 0; t < ps.size(); ++t) {
        acc += ps[t];
        if (u < acc) return static_cast<int32_t>(t);
    }
    return static_cast<int32_t>(ps.size()) - 1;  // guard against rounding shortfall
}

std::vector<int32_t> NGramModel::generate(std::span<const int32_t> prefix, int steps, uint64_t seed,
                                          double temperature) const {
    if (steps < 0) throw std::invalid_argument("steps must be >= 0");
    std::vector<int32_t> out(prefix.begin(), prefix.end());
    Rng rng(derive_seed(seed, 0));
    for (int s = 0; s < steps; ++s) {
        int32_t t = sample_next(out, rng, temperature);
        out.push_back(t);
        if (params_.eos_id >= 0 && t == params_.eos_id) break;
    }
    return out;
}

void NGramModel::save(std::ostream& out) const {
    out.write("ESLM", 4);
    write_i32(out, 1);  // version
    write_i32(out, params_.order);
    write_f64(out, params_.kappa);
    write_i32(out, params_.vocab_size);
    write_i32(out, params_.bos_id);
    write_i32(out, params_.eos_id);
    for (double l : params_.lambdas) write_f64(out, l);
    for (size_t j = 0; j < ngram_counts_.size(); ++j) {
        // Sorted keys make the file byte-deterministic.
        std::vector<const std::pair<const std::string, uint64_t>*> entries;
        entries.reserve(ngram_counts_[j].size());
        for (const auto& kv : ngram_counts_[j]) entries.push_back(&kv);
        std::sort(entries.begin(), entries.end(),
                  [](const auto* a, const auto* b) { return a->first < b->first; });
        write_u64(out, entries.size());
        for (const auto* kv : entries) {
            write_bytes(out, kv->first.data(), kv->first.size());
            write_u64(out, kv->second);
        }
    }
}

NGramModel NGramModel::load(std::istream& in) {
    char magic[4];
    read_bytes(in, magic, 4);
    if (std::memcmp(magic, "ESLM", 4) != 0) throw std::runtime_error("not a model file");
    if (read_i32(in) != 1) throw std::runtime_error("unsupported model file version");
    NGramModel model;
    model.params_.order = read_i32(in);
    model.params_.kappa = read_f64(in);
    model.params_.vocab_size = read_i32(in);
    model.params_.bos_id = read_i32(in);
    model.params_.eos_id = read_i32(in);
    if (model.params_.order < 1 || model.params_.order > 64)
        throw std::runtime_error("corrupt model file: bad order");
    model.params_.lambdas.resize(static_cast<size_t>(model.params_.order));
    for (double& l : model.params_.lambdas) l = read_f64(in);
    model.ngram_counts_.resize(static_cast<size_t>(model.params_.order));
    for (int j = 1; j <= model.params_.order; ++j) {
        uint64_t n = read_u64(in);
        auto& map = model.ngram_counts_[static_cast<size_t>(j - 1)];
        map.reserve(n);
        std::string key(static_cast<size_t>(4 * j), '\0');
        for (uint64_t e = 0; e < n; ++e) {
            read_bytes(in, key.data(), key.size());
            map[key] = read_u64(in);
        }
    }
    model.rebuild_context_totals();
    return model;
}

NGramModel NGramModel::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open model file: " + path);
    return load(in);
}

double mean_nll(const NGramModel& model, std::span<const TokenSequence> sequences) {
    // Validate before the parallel region; exceptions cannot cross it.
    for (const TokenSequence& s : sequences)
        for (int32_t t : s.token_ids)
            if (t < 0 || t >= model.params().vocab_size)
                throw std::invalid_argument("token id out of vocabulary range");
    std::vector<double> sums(sequences.size(), 0.0);
    std::vector<uint64_t> lens(sequences.size(), 0);
    parallel_for(sequences.size(), [&](size_t i) {
        auto lps = model.sequence_log_probs(sequences[i].token_ids);
        double s = 0;
        for (double lp : lps) s -= lp;
        sums[i] = s;
        lens[i] = lps.size();
    });
    double total = 0;
    uint64_t n = 0;
    for (size_t i = 0; i < sequences.size(); ++i) {
        total += sums[i];
        n += lens[i];
    }
    if (n == 0) throw std::invalid_argument("mean_nll: no tokens to score");
    return total / static_cast<double>(n);
}

}  // namespace ehrseq
