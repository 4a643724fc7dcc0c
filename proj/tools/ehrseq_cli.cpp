// ehrseq: pipeline front door. Every command resolves its parameters from
// defaults + --config JSON + flag overrides, writes outputs atomically, and
// drops a manifest (resolved config, config hash, seeds, tool version) next to
// its primary output so any run can be replayed byte-for-byte.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ehrseq/eval_harness.hpp"
#include "ehrseq/event_stream.hpp"
#include "ehrseq/io.hpp"
#include "ehrseq/ngram_lm.hpp"
#include "ehrseq/parallel.hpp"
#include "ehrseq/ppl_analysis.hpp"
#include "ehrseq/properties.hpp"
#include "ehrseq/rng.hpp"
#include "ehrseq/synth.hpp"
#include "ehrseq/tokenizer.hpp"

using nlohmann::json;
using namespace ehrseq;

namespace {

constexpr const char* kVersion = "1.0.0";

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int fail(const std::string& command, const std::string& message) {
    json e;
    e["command"] = command;
    e["error"] = message;
    std::cerr << e.dump() << "\n";
    return 1;
}

// ---- path handling ----

std::string base_out_dir() {
    const char* d = std::getenv("EHRSEQ_OUT_DIR");
    return d ? d : "";
}

// Relative paths live under EHRSEQ_OUT_DIR so a whole pipeline can be
// redirected (and replayed elsewhere) without touching its config.
std::string resolve_path(const std::string& path) {
    if (path.empty()) throw ValidationError("empty path");
    std::filesystem::path p(path);
    std::string base = base_out_dir();
    if (p.is_absolute() || base.empty()) return path;
    return (std::filesystem::path(base) / p).string();
}

struct PathGuard {
    std::set<std::string> inputs;

    std::string input(const std::string& path) {
        std::string r = resolve_path(path);
        if (!std::filesystem::exists(r)) throw ValidationError("missing input path: " + r);
        inputs.insert(std::filesystem::weakly_canonical(r).string());
        return r;
    }

    std::string output(const std::string& path) {
        std::string r = resolve_path(path);
        if (inputs.count(std::filesystem::weakly_canonical(r).string()))
            throw ValidationError("output would overwrite input: " + r);
        auto parent = std::filesystem::path(r).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        return r;
    }
};

// ---- resolved command configuration ----

class CommandConfig {
public:
    CommandConfig(std::string command, std::set<std::string> known)
        : command_(std::move(command)), known_(std::move(known)), cfg_(json::object()) {}

    void set_default(const std::string& key, json v) { cfg_[key] = std::move(v); }
    void set(const std::string& key, json v) { cfg_[key] = std::move(v); }

    void load_file(const std::string& path) {
        if (!std::filesystem::exists(path)) throw ValidationError("missing config file: " + path);
        json j;
        try {
            j = json::parse(read_file(path));
        } catch (const json::parse_error& e) {
            throw ValidationError(std::string("config: invalid JSON: ") + e.what());
        }
        if (!j.is_object()) throw ValidationError("config: root must be an object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!known_.count(it.key()))
                throw ValidationError("config: unknown key '" + it.key() + "' for command '" +
                                      command_ + "'");
            cfg_[it.key()] = it.value();
        }
    }

    bool has(const std::string& key) const { return cfg_.contains(key) && !cfg_[key].is_null(); }

    std::string str(const std::string& key) const {
        need(key);
        if (!cfg_[key].is_string()) bad(key, "a string");
        return cfg_[key].get<std::string>();
    }

    std::string path(const std::string& key) const {
        std::string s = str(key);
        if (s.empty()) throw ValidationError("config: '" + key + "' must be a non-empty path");
        return s;
    }

    int64_t integer(const std::string& key) const {
        need(key);
        if (!cfg_[key].is_number_integer() && !cfg_[key].is_number_unsigned())
            bad(key, "an integer");
        return cfg_[key].get<int64_t>();
    }

    double number(const std::string& key) const {
        need(key);
        if (!cfg_[key].is_number()) bad(key, "a number");
        return cfg_[key].get<double>();
    }

    bool boolean(const std::string& key) const {
        need(key);
        if (!cfg_[key].is_boolean()) bad(key, "a boolean");
        return cfg_[key].get<bool>();
    }

    uint64_t required_seed(const std::string& key) const {
        if (!has(key))
            throw ValidationError("config requires an explicit '" + key +
                                  "' (no implicit time-based seeding)");
        const json& v = cfg_[key];
        if (v.is_number_unsigned()) return v.get<uint64_t>();
        if (v.is_number_integer() && v.get<int64_t>() >= 0)
            return static_cast<uint64_t>(v.get<int64_t>());
        bad(key, "a nonnegative integer");
        return 0;
    }

    std::vector<double> numbers(const std::string& key) const {
        need(key);
        if (!cfg_[key].is_array()) bad(key, "an array of numbers");
        std::vector<double> out;
        for (const json& v : cfg_[key]) {
            if (!v.is_number()) bad(key, "an array of numbers");
            out.push_back(v.get<double>());
        }
        return out;
    }

    std::vector<std::string> strings(const std::string& key) const {
        need(key);
        if (!cfg_[key].is_array()) bad(key, "an array of strings");
        std::vector<std::string> out;
        for (const json& v : cfg_[key]) {
            if (!v.is_string()) bad(key, "an array of strings");
            out.push_back(v.get<std::string>());
        }
        return out;
    }

    const json& raw() const { return cfg_; }
    json& mutable_raw() { return cfg_; }

private:
    void need(const std::string& key) const {
        if (!has(key)) throw ValidationError("config: missing required key '" + key + "'");
    }
    [[noreturn]] void bad(const std::string& key, const std::string& what) const {
        throw ValidationError("config: '" + key + "' must be " + what);
    }

    std::string command_;
    std::set<std::string> known_;
    json cfg_;
};

void write_manifest(const std::string& command, const CommandConfig& cc,
                    const std::string& primary_out_resolved) {
    json m;
    m["command"] = command;
    m["version"] = kVersion;
    m["config"] = cc.raw();
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(cc.raw().dump(1))));
    m["config_hash"] = hex;
    json seeds = json::object();
    for (const char* k : {"seed", "label_seed"})
        if (cc.has(k)) seeds[k] = cc.raw()[k];
    m["seeds"] = seeds;
    atomic_write_file(primary_out_resolved + ".manifest.json", m.dump(1) + "\n");
}

// ---- shared parse/IO helpers ----

// CLI11's vector parse consumes args back to front.
void parse_app(CLI::App& app, std::vector<std::string> args) {
    std::reverse(args.begin(), args.end());
    app.parse(args);
}

WireFormat wire_format(const std::string& fmt, const std::string& path) {
    if (fmt == "jsonl") return WireFormat::Jsonl;
    if (fmt == "csv") return WireFormat::Csv;
    if (fmt == "auto")
        return path.size() >= 4 && path.substr(path.size() - 4) == ".csv" ? WireFormat::Csv
                                                                          : WireFormat::Jsonl;
    throw ValidationError("format must be jsonl, csv or auto");
}

std::vector<PatientTimeline> read_events_file(const std::string& resolved, const std::string& fmt,
                                              bool strict_sorted = false) {
    IngestOptions opts;
    opts.format = wire_format(fmt, resolved);
    opts.strict_sorted = strict_sorted;
    return ingest_file(resolved, opts);
}

std::ifstream open_input(const std::string& resolved) {
    std::ifstream in(resolved, std::ios::binary);
    if (!in) throw ValidationError("cannot open input: " + resolved);
    return in;
}

std::vector<TokenSequence> read_tokens_file(const std::string& resolved) {
    auto in = open_input(resolved);
    return read_token_sequences(in);
}

std::vector<TaskLabel> read_labels_file(const std::string& resolved) {
    auto in = open_input(resolved);
    return read_labels_csv(in);
}

std::vector<PredictionRow> read_predictions_file(const std::string& resolved) {
    auto in = open_input(resolved);
    return read_predictions_csv(in);
}

int threads_flag_value = 0;

void add_common_flags(CLI::App& app, std::string& config_path) {
    app.add_option("--config", config_path, "JSON config file (flags override it)");
    app.add_option("--threads", threads_flag_value,
                   "cap worker threads (does not affect results)");
}

void apply_threads() {
    if (threads_flag_value > 0) set_max_threads(threads_flag_value);
}

// Labels grouped by task_name in sorted task order, preserving row order
// within a task.
std::map<std::string, std::vector<TaskLabel>> group_by_task(const std::vector<TaskLabel>& labels) {
    std::map<std::string, std::vector<TaskLabel>> tasks;
    for (const auto& l : labels) tasks[l.task_name].push_back(l);
    return tasks;
}

json metric_ci_json(const MetricCi& ci) { return json{{"lo", ci.lo}, {"hi", ci.hi}}; }

// ---- commands ----

int cmd_synth(std::vector<std::string> args) {
    CLI::App app{"generate a synthetic event corpus and task labels", "ehrseq synth"};
    std::string config_path, out_events, out_labels, format;
    uint64_t seed = 0, label_seed = 0;
    int n_patients = 0;
    add_common_flags(app, config_path);
    app.add_option("--seed", seed, "corpus generation seed (required)");
    app.add_option("--label-seed", label_seed, "label noise seed (defaults to --seed)");
    app.add_option("--out-events", out_events, "events output path");
    app.add_option("--out-labels", out_labels, "labels CSV output path");
    app.add_option("--format", format, "events output format: jsonl|csv");
    app.add_option("--n-patients", n_patients, "override the generator's patient count");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("synth", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("synth",
                         {"synth", "seed", "label_seed", "out_events", "out_labels", "format"});
        cc.set_default("synth", json::object());
        cc.set_default("out_events", "events.jsonl");
        cc.set_default("out_labels", "labels.csv");
        cc.set_default("format", "jsonl");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--seed")) cc.set("seed", seed);
        if (app.count("--label-seed")) cc.set("label_seed", label_seed);
        if (app.count("--out-events")) cc.set("out_events", out_events);
        if (app.count("--out-labels")) cc.set("out_labels", out_labels);
        if (app.count("--format")) cc.set("format", format);
        if (app.count("--n-patients")) cc.mutable_raw()["synth"]["n_patients"] = n_patients;

        uint64_t s = cc.required_seed("seed");
        if (!cc.has("label_seed")) cc.set("label_seed", s);
        uint64_t ls = cc.required_seed("label_seed");
        synth::SynthConfig sc = synth::parse_config(cc.raw()["synth"].dump());
        cc.mutable_raw()["synth"] = json::parse(synth::config_to_json(sc));  // fully resolved
        WireFormat wf = wire_format(cc.str("format"), cc.path("out_events"));

        auto corpus = synth::generate_corpus(sc, s);
        auto labels = synth::generate_labels(corpus, sc, ls);

        PathGuard paths;
        std::string ev_path = paths.output(cc.path("out_events"));
        std::string lb_path = paths.output(cc.path("out_labels"));
        atomic_write_file(ev_path, [&](std::ostream& o) { write_events(o, corpus, wf); });
        atomic_write_file(lb_path, [&](std::ostream& o) { write_labels_csv(o, labels); });
        write_manifest("synth", cc, ev_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("synth", e.what());
    }
}

int cmd_ingest(std::vector<std::string> args) {
    CLI::App app{"validate and normalize an event stream", "ehrseq ingest"};
    std::string config_path, events, format, out, out_format;
    bool strict_sorted = false;
    add_common_flags(app, config_path);
    app.add_option("--events", events, "input events path");
    app.add_option("--format", format, "input format: jsonl|csv|auto");
    app.add_flag("--strict-sorted", strict_sorted, "reject out-of-order events");
    app.add_option("--out", out, "normalized output path");
    app.add_option("--out-format", out_format, "output format: jsonl|csv");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("ingest", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("ingest", {"events", "format", "strict_sorted", "out", "out_format"});
        cc.set_default("format", "auto");
        cc.set_default("strict_sorted", false);
        cc.set_default("out", "events_norm.jsonl");
        cc.set_default("out_format", "jsonl");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--events")) cc.set("events", events);
        if (app.count("--format")) cc.set("format", format);
        if (app.count("--strict-sorted")) cc.set("strict_sorted", true);
        if (app.count("--out")) cc.set("out", out);
        if (app.count("--out-format")) cc.set("out_format", out_format);

        PathGuard paths;
        std::string in_path = paths.input(cc.path("events"));
        auto timelines =
            read_events_file(in_path, cc.str("format"), cc.boolean("strict_sorted"));
        WireFormat wf = wire_format(cc.str("out_format"), cc.path("out"));

        std::string out_path = paths.output(cc.path("out"));
        atomic_write_file(out_path, [&](std::ostream& o) { write_events(o, timelines, wf); });
        write_manifest("ingest", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("ingest", e.what());
    }
}

int cmd_vocab(std::vector<std::string> args) {
    CLI::App app{"build a tokenizer vocabulary from events", "ehrseq vocab"};
    std::string config_path, events, format, out;
    int top_k = 0;
    bool att = false, no_att = false;
    add_common_flags(app, config_path);
    app.add_option("--events", events, "training events path");
    app.add_option("--format", format, "input format: jsonl|csv|auto");
    app.add_option("--top-k", top_k, "ranked tokens to keep");
    app.add_flag("--att", att, "include gap/visit time tokens");
    app.add_flag("--no-att", no_att, "exclude gap/visit time tokens");
    app.add_option("--out", out, "vocabulary output path");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("vocab", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("vocab", {"events", "format", "top_k", "att", "out"});
        cc.set_default("format", "auto");
        cc.set_default("top_k", 1000);
        cc.set_default("att", true);
        cc.set_default("out", "vocab.json");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--events")) cc.set("events", events);
        if (app.count("--format")) cc.set("format", format);
        if (app.count("--top-k")) cc.set("top_k", top_k);
        if (att && no_att) throw ValidationError("--att and --no-att conflict");
        if (att) cc.set("att", true);
        if (no_att) cc.set("att", false);

        PathGuard paths;
        std::string in_path = paths.input(cc.path("events"));
        auto timelines = read_events_file(in_path, cc.str("format"));
        Vocabulary vocab = build_vocabulary(timelines, static_cast<int>(cc.integer("top_k")),
                                            cc.boolean("att"));

        std::string out_path = paths.output(cc.path("out"));
        atomic_write_file(out_path, [&](std::ostream& o) { vocab.save(o); });
        write_manifest("vocab", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("vocab", e.what());
    }
}

int cmd_encode(std::vector<std::string> args) {
    CLI::App app{"encode events into token sequences", "ehrseq encode"};
    std::string config_path, events, format, vocab_path, out;
    bool att = false, no_att = false;
    add_common_flags(app, config_path);
    app.add_option("--events", events, "events path");
    app.add_option("--format", format, "input format: jsonl|csv|auto");
    app.add_option("--vocab", vocab_path, "vocabulary path");
    app.add_flag("--att", att, "emit gap/visit time tokens");
    app.add_flag("--no-att", no_att, "plain encoding");
    app.add_option("--out", out, "token sequences output path");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("encode", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("encode", {"events", "format", "vocab", "att", "out"});
        cc.set_default("format", "auto");
        cc.set_default("out", "tokens.jsonl");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--events")) cc.set("events", events);
        if (app.count("--format")) cc.set("format", format);
        if (app.count("--vocab")) cc.set("vocab", vocab_path);
        if (app.count("--out")) cc.set("out", out);
        if (att && no_att) throw ValidationError("--att and --no-att conflict");
        if (att) cc.set("att", true);
        if (no_att) cc.set("att", false);

        PathGuard paths;
        std::string ev_path = paths.input(cc.path("events"));
        std::string vb_path = paths.input(cc.path("vocab"));
        Vocabulary vocab = Vocabulary::load_file(vb_path);
        // Unset att follows the vocabulary; the manifest records the decision.
        bool use_att = cc.has("att") ? cc.boolean("att") : vocab.has_att();
        cc.set("att", use_att);
        auto timelines = read_events_file(ev_path, cc.str("format"));
        auto seqs = encode_corpus(timelines, vocab, use_att);

        std::string out_path = paths.output(cc.path("out"));
        atomic_write_file(out_path, [&](std::ostream& o) { write_token_sequences(o, seqs); });
        write_manifest("encode", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("encode", e.what());
    }
}

int cmd_metrics(std::vector<std::string> args) {
    CLI::App app{"per-patient repetition and irregularity metrics", "ehrseq metrics"};
    std::string config_path, events, tokens, format, out;
    int min_events = 0;
    add_common_flags(app, config_path);
    app.add_option("--events", events, "events path (raw code view)");
    app.add_option("--tokens", tokens, "token sequences path (token view)");
    app.add_option("--format", format, "events format: jsonl|csv|auto");
    app.add_option("--min-events", min_events, "skip patients with fewer events");
    app.add_option("--out", out, "metrics CSV output path");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("metrics", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("metrics", {"events", "tokens", "format", "min_events", "out"});
        cc.set_default("format", "auto");
        cc.set_default("min_events", 0);
        cc.set_default("out", "metrics.csv");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--events")) cc.set("events", events);
        if (app.count("--tokens")) cc.set("tokens", tokens);
        if (app.count("--format")) cc.set("format", format);
        if (app.count("--min-events")) cc.set("min_events", min_events);
        if (app.count("--out")) cc.set("out", out);

        if (cc.has("events") == cc.has("tokens"))
            throw ValidationError("exactly one of 'events' or 'tokens' is required");
        CorpusMetricsOptions opts;
        opts.min_events = static_cast<int>(cc.integer("min_events"));

        PathGuard paths;
        std::vector<PatientMetricRow> rows;
        if (cc.has("events")) {
            std::string in_path = paths.input(cc.path("events"));
            rows = corpus_metrics(read_events_file(in_path, cc.str("format")), opts);
        } else {
            std::string in_path = paths.input(cc.path("tokens"));
            rows = corpus_metrics_tokens(read_tokens_file(in_path), opts);
        }

        std::string out_path = paths.output(cc.path("out"));
        atomic_write_file(out_path, [&](std::ostream& o) { write_metrics_csv(o, rows); });
        write_manifest("metrics", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("metrics", e.what());
    }
}

int cmd_fit_lm(std::vector<std::string> args) {
    CLI::App app{"fit the count-based sequence model", "ehrseq fit-lm"};
    std::string config_path, tokens, vocab_path, out;
    int order = 0;
    double kappa = 0;
    std::vector<double> lambdas;
    add_common_flags(app, config_path);
    app.add_option("--tokens", tokens, "token sequences path");
    app.add_option("--vocab", vocab_path, "vocabulary path");
    app.add_option("--order", order, "model order n");
    app.add_option("--kappa", kappa, "additive smoothing");
    app.add_option("--lambdas", lambdas, "interpolation weights, low to high order")
        ->delimiter(',');
    app.add_option("--out", out, "model output path");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("fit-lm", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("fit-lm", {"tokens", "vocab", "order", "kappa", "lambdas", "out"});
        cc.set_default("order", 3);
        cc.set_default("kappa", 0.1);
        cc.set_default("lambdas", json::array());
        cc.set_default("out", "model.eslm");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--tokens")) cc.set("tokens", tokens);
        if (app.count("--vocab")) cc.set("vocab", vocab_path);
        if (app.count("--order")) cc.set("order", order);
        if (app.count("--kappa")) cc.set("kappa", kappa);
        if (app.count("--lambdas")) cc.set("lambdas", lambdas);
        if (app.count("--out")) cc.set("out", out);

        PathGuard paths;
        std::string tk_path = paths.input(cc.path("tokens"));
        std::string vb_path = paths.input(cc.path("vocab"));
        Vocabulary vocab = Vocabulary::load_file(vb_path);
        auto seqs = read_tokens_file(tk_path);

        NGramModel::Params p;
        p.order = static_cast<int>(cc.integer("order"));
        p.kappa = cc.number("kappa");
        p.lambdas = cc.numbers("lambdas");
        p.vocab_size = vocab.size();
        p.bos_id = vocab.special("[BOS]");
        p.eos_id = vocab.special("[EOS]");
        NGramModel model = NGramModel::fit(seqs, p);

        std::string out_path = paths.output(cc.path("out"));
        atomic_write_file(out_path, [&](std::ostream& o) { model.save(o); });
        write_manifest("fit-lm", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("fit-lm", e.what());
    }
}

int cmd_ppl(std::vector<std::string> args) {
    CLI::App app{"perplexity-by-position curve", "ehrseq ppl"};
    std::string config_path, tokens, model_path, out, out_logprobs;
    int context_len = 0, stride = 0, ema_span = 0;
    add_common_flags(app, config_path);
    app.add_option("--tokens", tokens, "token sequences path");
    app.add_option("--model", model_path, "fitted model path");
    app.add_option("--context-len", context_len, "max context length L");
    app.add_option("--stride", stride, "window advance");
    app.add_option("--ema-span", ema_span, "smoothing span for the curve");
    app.add_option("--out", out, "curve CSV output path");
    app.add_option("--out-logprobs", out_logprobs, "optional per-token logprob JSONL");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("ppl", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("ppl", {"tokens", "model", "context_len", "stride", "ema_span", "out",
                                 "out_logprobs"});
        cc.set_default("context_len", 512);
        cc.set_default("stride", 32);
        cc.set_default("ema_span", 101);
        cc.set_default("out", "ppl_curve.csv");
        cc.set_default("out_logprobs", "");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--tokens")) cc.set("tokens", tokens);
        if (app.count("--model")) cc.set("model", model_path);
        if (app.count("--context-len")) cc.set("context_len", context_len);
        if (app.count("--stride")) cc.set("stride", stride);
        if (app.count("--ema-span")) cc.set("ema_span", ema_span);
        if (app.count("--out")) cc.set("out", out);
        if (app.count("--out-logprobs")) cc.set("out_logprobs", out_logprobs);

        PathGuard paths;
        std::string tk_path = paths.input(cc.path("tokens"));
        std::string md_path = paths.input(cc.path("model"));
        auto seqs = read_tokens_file(tk_path);
        NGramModel model = NGramModel::load_file(md_path);

        auto logprobs = score_corpus(model, seqs, static_cast<int>(cc.integer("context_len")),
                                     static_cast<int>(cc.integer("stride")));
        std::vector<std::vector<double>> ppls(logprobs.size());
        for (size_t i = 0; i < logprobs.size(); ++i) ppls[i] = per_token_ppl(logprobs[i]);
        PositionPplCurve curve = median_by_position(ppls);
        curve.ema = ema(curve.median_ppl, static_cast<int>(cc.integer("ema_span")));

        std::string out_path = paths.output(cc.path("out"));
        atomic_write_file(out_path, [&](std::ostream& o) { write_curve_csv(o, curve); });
        if (!cc.str("out_logprobs").empty()) {
            std::vector<PatientLogProbs> rows(seqs.size());
            for (size_t i = 0; i < seqs.size(); ++i)
                rows[i] = {seqs[i].patient_id, std::move(logprobs[i])};
            std::string lp_path = paths.output(cc.path("out_logprobs"));
            atomic_write_file(lp_path, [&](std::ostream& o) { write_logprobs_jsonl(o, rows); });
        }
        write_manifest("ppl", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("ppl", e.what());
    }
}

// eval and fewshot share everything except the k-shot subsampling step.
int run_probe(const std::string& name, std::vector<std::string> args, bool fewshot) {
    CLI::App app{fewshot ? "k-shot probe evaluation" : "frozen-feature probe evaluation",
                 "ehrseq " + name};
    std::string config_path, tokens, labels_path, featurizer, vocab_path, model_path,
        embeddings_path, model_id, out_report, out_predictions;
    int context_len = 0, bootstrap_n = 0, k = 0;
    uint64_t seed = 0;
    std::vector<double> split;
    add_common_flags(app, config_path);
    app.add_option("--tokens", tokens, "token sequences path");
    app.add_option("--labels", labels_path, "task labels CSV path");
    app.add_option("--featurizer", featurizer, "bag | lm-conditional | external");
    app.add_option("--vocab", vocab_path, "vocabulary path (bag featurizer)");
    app.add_option("--model", model_path, "fitted model path (lm-conditional featurizer)");
    app.add_option("--embeddings", embeddings_path, "embeddings JSONL (external featurizer)");
    app.add_option("--context-len", context_len, "feature window length");
    app.add_option("--split", split, "train,val,test fractions")->delimiter(',');
    app.add_option("--seed", seed, "split + bootstrap seed (required)");
    app.add_option("--bootstrap-n", bootstrap_n, "bootstrap resamples");
    app.add_option("--model-id", model_id, "identifier recorded in reports");
    app.add_option("--out-report", out_report, "report JSON output path");
    app.add_option("--out-predictions", out_predictions, "test predictions CSV output path");
    if (fewshot) app.add_option("--k", k, "examples per class");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail(name, e.what());
    }

    try {
        apply_threads();
        std::set<std::string> known = {"tokens",     "labels",      "featurizer", "vocab",
                                       "model",      "embeddings",  "context_len", "split",
                                       "seed",       "bootstrap_n", "l2_grid",     "model_id",
                                       "out_report", "out_predictions"};
        if (fewshot) known.insert("k");
        CommandConfig cc(name, known);
        cc.set_default("featurizer", "bag");
        cc.set_default("context_len", 512);
        cc.set_default("split", json::array({0.7, 0.15, 0.15}));
        cc.set_default("bootstrap_n", 1000);
        cc.set_default("l2_grid", default_l2_grid());
        cc.set_default("out_report", fewshot ? "fewshot_report.json" : "eval_report.json");
        cc.set_default("out_predictions",
                       fewshot ? "fewshot_predictions.csv" : "predictions.csv");
        if (fewshot) cc.set_default("k", 16);
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--tokens")) cc.set("tokens", tokens);
        if (app.count("--labels")) cc.set("labels", labels_path);
        if (app.count("--featurizer")) cc.set("featurizer", featurizer);
        if (app.count("--vocab")) cc.set("vocab", vocab_path);
        if (app.count("--model")) cc.set("model", model_path);
        if (app.count("--embeddings")) cc.set("embeddings", embeddings_path);
        if (app.count("--context-len")) cc.set("context_len", context_len);
        if (app.count("--split")) cc.set("split", split);
        if (app.count("--seed")) cc.set("seed", seed);
        if (app.count("--bootstrap-n")) cc.set("bootstrap_n", bootstrap_n);
        if (app.count("--model-id")) cc.set("model_id", model_id);
        if (app.count("--out-report")) cc.set("out_report", out_report);
        if (app.count("--out-predictions")) cc.set("out_predictions", out_predictions);
        if (fewshot && app.count("--k")) cc.set("k", k);

        uint64_t s = cc.required_seed("seed");
        std::string feat = cc.str("featurizer");
        if (!cc.has("model_id")) cc.set("model_id", feat);
        int L = static_cast<int>(cc.integer("context_len"));
        auto fractions = cc.numbers("split");
        if (fractions.size() != 3)
            throw ValidationError("config: 'split' must be [train, val, test]");

        PathGuard paths;
        std::string tk_path = paths.input(cc.path("tokens"));
        std::string lb_path = paths.input(cc.path("labels"));
        auto seqs = read_tokens_file(tk_path);
        auto labels = read_labels_file(lb_path);

        std::optional<NGramModel> lm;
        std::vector<PatientEmbedding> embeddings;
        Featurizer featurize;
        if (feat == "bag") {
            Vocabulary vocab = Vocabulary::load_file(paths.input(cc.path("vocab")));
            featurize = make_bag_featurizer(vocab.size(), L);
        } else if (feat == "lm-conditional") {
            lm = NGramModel::load_file(paths.input(cc.path("model")));
            featurize = make_lm_featurizer(*lm, L);
        } else if (feat == "external") {
            auto in = open_input(paths.input(cc.path("embeddings")));
            embeddings = read_embeddings_jsonl(in);
            featurize = make_external_featurizer(embeddings);
        } else {
            throw ValidationError("featurizer must be bag, lm-conditional or external");
        }

        std::vector<std::string> ids;
        ids.reserve(seqs.size());
        for (const auto& sq : seqs) ids.push_back(sq.patient_id);
        SplitFractions fr{fractions[0], fractions[1], fractions[2]};
        DatasetSplit ds = split_patients(std::move(ids), fr, derive_seed(s, 0x73706c69));

        EvaluateOptions opts;
        opts.l2_grid = cc.numbers("l2_grid");
        opts.bootstrap_n = static_cast<int>(cc.integer("bootstrap_n"));
        opts.model_id = cc.str("model_id");

        json reports = json::array();
        std::vector<PredictionRow> pred_rows;
        auto tasks = group_by_task(labels);
        if (tasks.empty()) throw ValidationError("labels file has no rows");
        for (const auto& [task, task_labels] : tasks) {
            TaskData data = assemble_task_data(seqs, task_labels, ds, featurize);
            opts.seed = derive_seed(s, fnv1a64(task));
            EvaluationOutput out = fewshot
                                       ? few_shot_evaluate(data, static_cast<int>(cc.integer("k")),
                                                           opts.seed, opts)
                                       : evaluate_task(data, opts);
            reports.push_back(json::parse(out.report.to_json_string()));
            for (size_t i = 0; i < data.test_labels.size(); ++i)
                pred_rows.push_back({data.test_labels[i].patient_id,
                                     data.test_labels[i].prediction_time, task, data.ytest[i],
                                     out.test_probs[i]});
        }

        std::string rp_path = paths.output(cc.path("out_report"));
        std::string pr_path = paths.output(cc.path("out_predictions"));
        atomic_write_file(pr_path,
                          [&](std::ostream& o) { write_predictions_csv(o, pred_rows); });
        atomic_write_file(rp_path, reports.dump(1) + "\n");
        write_manifest(name, cc, rp_path);
        return 0;
    } catch (const std::exception& e) {
        return fail(name, e.what());
    }
}

int cmd_zeroshot(std::vector<std::string> args) {
    CLI::App app{"generation-based task probabilities", "ehrseq zeroshot"};
    std::string config_path, tokens, labels_path, model_path, vocab_path, horizon_unit,
        out_report, out_predictions;
    std::vector<std::string> positive_codes;
    int64_t horizon_budget = 0;
    int max_steps = 0, n_timelines = 0, context_len = 0, bootstrap_n = 0;
    double temperature = 0;
    uint64_t seed = 0;
    add_common_flags(app, config_path);
    app.add_option("--tokens", tokens, "token sequences path");
    app.add_option("--labels", labels_path, "task labels CSV path");
    app.add_option("--model", model_path, "fitted model path");
    app.add_option("--vocab", vocab_path, "vocabulary path");
    app.add_option("--positive-codes", positive_codes, "codes counting as a hit")
        ->delimiter(',');
    app.add_option("--horizon-unit", horizon_unit, "tokens | days");
    app.add_option("--horizon-budget", horizon_budget, "generation budget");
    app.add_option("--max-steps", max_steps, "hard step cap for day horizons");
    app.add_option("--n-timelines", n_timelines, "sampled continuations per prediction");
    app.add_option("--temperature", temperature, "sampling temperature");
    app.add_option("--context-len", context_len, "conditioning window length");
    app.add_option("--seed", seed, "sampling seed (required)");
    app.add_option("--bootstrap-n", bootstrap_n, "bootstrap resamples for the report");
    app.add_option("--out-report", out_report, "report JSON output path");
    app.add_option("--out-predictions", out_predictions, "predictions CSV output path");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("zeroshot", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("zeroshot",
                         {"tokens", "labels", "model", "vocab", "positive_codes", "horizon_unit",
                          "horizon_budget", "max_steps", "n_timelines", "temperature",
                          "context_len", "seed", "bootstrap_n", "out_report", "out_predictions"});
        cc.set_default("horizon_unit", "days");
        cc.set_default("max_steps", 4096);
        cc.set_default("n_timelines", 1000);
        cc.set_default("temperature", 1.0);
        cc.set_default("context_len", 512);
        cc.set_default("bootstrap_n", 1000);
        cc.set_default("out_report", "zeroshot_report.json");
        cc.set_default("out_predictions", "zeroshot_predictions.csv");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--tokens")) cc.set("tokens", tokens);
        if (app.count("--labels")) cc.set("labels", labels_path);
        if (app.count("--model")) cc.set("model", model_path);
        if (app.count("--vocab")) cc.set("vocab", vocab_path);
        if (app.count("--positive-codes")) cc.set("positive_codes", positive_codes);
        if (app.count("--horizon-unit")) cc.set("horizon_unit", horizon_unit);
        if (app.count("--horizon-budget")) cc.set("horizon_budget", horizon_budget);
        if (app.count("--max-steps")) cc.set("max_steps", max_steps);
        if (app.count("--n-timelines")) cc.set("n_timelines", n_timelines);
        if (app.count("--temperature")) cc.set("temperature", temperature);
        if (app.count("--context-len")) cc.set("context_len", context_len);
        if (app.count("--seed")) cc.set("seed", seed);
        if (app.count("--bootstrap-n")) cc.set("bootstrap_n", bootstrap_n);
        if (app.count("--out-report")) cc.set("out_report", out_report);
        if (app.count("--out-predictions")) cc.set("out_predictions", out_predictions);

        uint64_t s = cc.required_seed("seed");
        if (!cc.has("horizon_budget"))
            throw ValidationError("config: missing required key 'horizon_budget'");
        auto codes = cc.strings("positive_codes");
        if (codes.empty())
            throw ValidationError("config: 'positive_codes' must list at least one code");

        PathGuard paths;
        auto seqs = read_tokens_file(paths.input(cc.path("tokens")));
        auto labels = read_labels_file(paths.input(cc.path("labels")));
        Vocabulary vocab = Vocabulary::load_file(paths.input(cc.path("vocab")));
        NGramModel lm = NGramModel::load_file(paths.input(cc.path("model")));

        std::set<std::string> code_set(codes.begin(), codes.end());
        std::vector<int32_t> positive;
        for (const TokenDef& td : vocab.tokens()) {
            bool content = td.kind == TokenKind::Code || td.kind == TokenKind::Categorical ||
                           td.kind == TokenKind::NumericDecile;
            if (content && code_set.count(td.code)) positive.push_back(td.id);
        }
        if (positive.empty())
            throw ValidationError("none of the positive codes are in the vocabulary");

        GenerationHorizon horizon;
        std::string unit = cc.str("horizon_unit");
        if (unit == "tokens") {
            horizon.unit = GenerationHorizon::Unit::Tokens;
        } else if (unit == "days") {
            horizon.unit = GenerationHorizon::Unit::Days;
            if (!vocab.has_att())
                throw ValidationError("day horizons need a vocabulary with time tokens");
            horizon.att_days = att_day_map(vocab);
        } else {
            throw ValidationError("horizon_unit must be tokens or days");
        }
        horizon.budget = cc.integer("horizon_budget");
        horizon.max_steps = static_cast<int>(cc.integer("max_steps"));
        int L = static_cast<int>(cc.integer("context_len"));
        int n_timelines_v = static_cast<int>(cc.integer("n_timelines"));
        double temp = cc.number("temperature");

        std::unordered_map<std::string, const TokenSequence*> by_patient;
        for (const auto& sq : seqs) {
            if (!by_patient.emplace(sq.patient_id, &sq).second)
                throw ValidationError("duplicate patient in tokens: " + sq.patient_id);
        }

        std::vector<PredictionRow> rows(labels.size());
        for (size_t i = 0; i < labels.size(); ++i) {
            const TaskLabel& l = labels[i];
            std::vector<int32_t> window;
            auto it = by_patient.find(l.patient_id);
            if (it != by_patient.end())
                window = context_window(*it->second, l.prediction_time, L);
            double p = zero_shot_prob(lm, window, positive, horizon, n_timelines_v,
                                      derive_seed(s, static_cast<uint64_t>(i)), temp);
            rows[i] = {l.patient_id, l.prediction_time, l.task_name,
                       static_cast<uint8_t>(l.label ? 1 : 0), p};
        }

        // Per-task discrimination/calibration of the generation probabilities.
        json reports = json::array();
        std::map<std::string, std::vector<size_t>> by_task;
        for (size_t i = 0; i < rows.size(); ++i) by_task[rows[i].task].push_back(i);
        int bn = static_cast<int>(cc.integer("bootstrap_n"));
        for (const auto& [task, idx] : by_task) {
            std::vector<double> probs;
            std::vector<uint8_t> ys;
            for (size_t i : idx) {
                probs.push_back(rows[i].prob);
                ys.push_back(rows[i].label);
            }
            json r;
            r["task"] = task;
            r["model_id"] = "zeroshot";
            r["n"] = idx.size();
            bool single_class =
                std::all_of(ys.begin(), ys.end(), [&](uint8_t v) { return v == ys[0]; });
            r["auroc"] = single_class ? json() : json(auroc(probs, ys));
            r["brier"] = brier(probs, ys);
            BootstrapCis cis = bootstrap_cis(probs, ys, bn, derive_seed(s, fnv1a64(task)));
            r["auroc_ci"] = metric_ci_json(cis.auroc_ci);
            r["brier_ci"] = metric_ci_json(cis.brier_ci);
            r["auroc_excluded"] = cis.auroc_excluded;
            reports.push_back(std::move(r));
        }

        std::string rp_path = paths.output(cc.path("out_report"));
        std::string pr_path = paths.output(cc.path("out_predictions"));
        atomic_write_file(pr_path, [&](std::ostream& o) { write_predictions_csv(o, rows); });
        atomic_write_file(rp_path, reports.dump(1) + "\n");
        write_manifest("zeroshot", cc, rp_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("zeroshot", e.what());
    }
}

int cmd_strat(std::vector<std::string> args) {
    CLI::App app{"quartile-stratified Brier table", "ehrseq strat"};
    std::string config_path, metrics_path, metric, out, out_csv;
    std::vector<std::string> predictions;
    add_common_flags(app, config_path);
    app.add_option("--metrics", metrics_path, "metrics CSV from the metrics command");
    app.add_option("--predictions", predictions, "prediction CSV paths")->delimiter(',');
    app.add_option("--metric", metric, "stratifier: rr1 | irregularity-std");
    app.add_option("--out", out, "table JSON output path");
    app.add_option("--out-csv", out_csv, "table CSV output path");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("strat", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("strat", {"metrics", "predictions", "metric", "out", "out_csv"});
        cc.set_default("metric", "rr1");
        cc.set_default("out", "strat_table.json");
        cc.set_default("out_csv", "strat_table.csv");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--metrics")) cc.set("metrics", metrics_path);
        if (app.count("--predictions")) cc.set("predictions", predictions);
        if (app.count("--metric")) cc.set("metric", metric);
        if (app.count("--out")) cc.set("out", out);
        if (app.count("--out-csv")) cc.set("out_csv", out_csv);

        std::string m = cc.str("metric");
        std::string row_name;
        if (m == "rr1") row_name = "rr1";
        else if (m == "irregularity-std") row_name = "irr_std_s";
        else throw ValidationError("metric must be rr1 or irregularity-std");

        auto pred_paths = cc.strings("predictions");
        if (pred_paths.empty())
            throw ValidationError("config: 'predictions' must list at least one file");

        PathGuard paths;
        auto metrics_in = open_input(paths.input(cc.path("metrics")));
        auto metric_rows = read_metrics_csv(metrics_in);
        std::vector<std::pair<std::string, double>> values;
        std::set<std::string> seen;
        for (const auto& r : metric_rows) {
            if (r.metric != row_name) continue;
            if (!seen.insert(r.patient_id).second)
                throw ValidationError("duplicate metric row for patient " + r.patient_id);
            values.emplace_back(r.patient_id, r.value);
        }
        QuartileAssignment qa = quartile_split(std::move(values));

        std::vector<PredictionRow> rows;
        for (const auto& p : pred_paths) {
            auto part = read_predictions_file(paths.input(p));
            rows.insert(rows.end(), part.begin(), part.end());
        }
        // Patients whose stratifier is undefined cannot be placed in a cell.
        uint64_t dropped = 0;
        std::map<std::string, TaskPredictions> by_task;
        for (const auto& r : rows) {
            if (qa.quartile_of(r.patient_id) < 0) {
                ++dropped;
                continue;
            }
            TaskPredictions& tp = by_task[r.task];
            tp.task = r.task;
            tp.patient_ids.push_back(r.patient_id);
            tp.probs.push_back(r.prob);
            tp.labels.push_back(r.label);
        }
        if (by_task.empty()) throw ValidationError("no prediction rows with a defined stratifier");

        std::vector<TaskPredictions> tasks;
        std::vector<QuartileAssignment> quartiles;
        for (auto& [_, tp] : by_task) {
            tasks.push_back(std::move(tp));
            quartiles.push_back(qa);
        }
        StratifiedBrierTable table = stratified_brier(tasks, quartiles);

        json out_json;
        out_json["metric"] = m;
        out_json["n_dropped"] = dropped;
        out_json["table"] = json::parse(table.to_json_string());

        std::string out_path = paths.output(cc.path("out"));
        std::string csv_path = paths.output(cc.path("out_csv"));
        atomic_write_file(out_path, out_json.dump(1) + "\n");
        atomic_write_file(csv_path, [&](std::ostream& o) {
            o << "task,quartile,brier,n\n";
            for (size_t t = 0; t < table.tasks.size(); ++t)
                for (int q = 0; q < 4; ++q) {
                    double cell = table.task_cells[t][q];
                    o << csv_escape(table.tasks[t]) << "," << (q + 1) << ","
                      << (std::isnan(cell) ? "" : dtos(cell)) << "," << table.task_counts[t][q]
                      << "\n";
                }
            for (int q = 0; q < 4; ++q) {
                double cell = table.overall[q];
                o << "," << (q + 1) << "," << (std::isnan(cell) ? "" : dtos(cell)) << ","
                  << table.overall_task_counts[q] << "\n";
            }
        });
        write_manifest("strat", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("strat", e.what());
    }
}

int cmd_compare(std::vector<std::string> args) {
    CLI::App app{"paired bootstrap comparison of two prediction sets", "ehrseq compare"};
    std::string config_path, pred_a, pred_b, metric, out;
    int bootstrap_n = 0;
    uint64_t seed = 0;
    add_common_flags(app, config_path);
    app.add_option("--predictions-a", pred_a, "baseline predictions CSV");
    app.add_option("--predictions-b", pred_b, "candidate predictions CSV");
    app.add_option("--metric", metric, "auroc | brier");
    app.add_option("--bootstrap-n", bootstrap_n, "bootstrap resamples");
    app.add_option("--seed", seed, "resampling seed (required)");
    app.add_option("--out", out, "comparison JSON output path");
    try {
        parse_app(app, std::move(args));
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail("compare", e.what());
    }

    try {
        apply_threads();
        CommandConfig cc("compare",
                         {"predictions_a", "predictions_b", "metric", "bootstrap_n", "seed",
                          "out"});
        cc.set_default("metric", "auroc");
        cc.set_default("bootstrap_n", 1000);
        cc.set_default("out", "comparison.json");
        if (!config_path.empty()) cc.load_file(config_path);
        if (app.count("--predictions-a")) cc.set("predictions_a", pred_a);
        if (app.count("--predictions-b")) cc.set("predictions_b", pred_b);
        if (app.count("--metric")) cc.set("metric", metric);
        if (app.count("--bootstrap-n")) cc.set("bootstrap_n", bootstrap_n);
        if (app.count("--seed")) cc.set("seed", seed);
        if (app.count("--out")) cc.set("out", out);

        uint64_t s = cc.required_seed("seed");
        std::string m = cc.str("metric");
        Metric mt;
        if (m == "auroc") mt = Metric::Auroc;
        else if (m == "brier") mt = Metric::Brier;
        else throw ValidationError("metric must be auroc or brier");

        PathGuard paths;
        auto rows_a = read_predictions_file(paths.input(cc.path("predictions_a")));
        auto rows_b = read_predictions_file(paths.input(cc.path("predictions_b")));
        auto key_less = [](const PredictionRow& x, const PredictionRow& y) {
            return std::tie(x.task, x.patient_id, x.prediction_time) <
                   std::tie(y.task, y.patient_id, y.prediction_time);
        };
        std::stable_sort(rows_a.begin(), rows_a.end(), key_less);
        std::stable_sort(rows_b.begin(), rows_b.end(), key_less);
        if (rows_a.size() != rows_b.size())
            throw ValidationError("prediction files differ in row count");
        std::vector<double> a(rows_a.size()), b(rows_a.size());
        std::vector<uint8_t> labels(rows_a.size());
        for (size_t i = 0; i < rows_a.size(); ++i) {
            if (rows_a[i].task != rows_b[i].task ||
                rows_a[i].patient_id != rows_b[i].patient_id ||
                rows_a[i].prediction_time != rows_b[i].prediction_time)
                throw ValidationError(
                    "prediction files are not aligned on (task, patient, prediction_time)");
            if (rows_a[i].label != rows_b[i].label)
                throw ValidationError("labels disagree between prediction files for patient " +
                                      rows_a[i].patient_id);
            a[i] = rows_a[i].prob;
            b[i] = rows_b[i].prob;
            labels[i] = rows_a[i].label;
        }

        BootstrapComparison cmp = bootstrap_compare(
            a, b, labels, mt, static_cast<int>(cc.integer("bootstrap_n")), s);
        json r;
        r["metric"] = m;
        r["n"] = rows_a.size();
        r["point_a"] = cmp.point_a;
        r["point_b"] = cmp.point_b;
        r["ci_a"] = metric_ci_json(cmp.ci_a);
        r["ci_b"] = metric_ci_json(cmp.ci_b);
        r["diff_ci"] = metric_ci_json(cmp.diff_ci);
        r["win_rate"] = cmp.win_rate;
        r["significant"] = cmp.significant;
        r["n_resamples"] = cmp.n_resamples;
        r["n_excluded"] = cmp.n_excluded;

        std::string out_path = paths.output(cc.path("out"));
        atomic_write_file(out_path, r.dump(1) + "\n");
        write_manifest("compare", cc, out_path);
        return 0;
    } catch (const std::exception& e) {
        return fail("compare", e.what());
    }
}

void usage(std::ostream& out) {
    out << "ehrseq " << kVersion << " - event-stream sequence modeling pipeline\n"
        << "usage: ehrseq <command> [options]\n"
        << "commands:\n"
        << "  synth     generate a synthetic event corpus and task labels\n"
        << "  ingest    validate and normalize an event stream\n"
        << "  vocab     build a tokenizer vocabulary from events\n"
        << "  encode    encode events into token sequences\n"
        << "  metrics   per-patient repetition and irregularity metrics\n"
        << "  fit-lm    fit the count-based sequence model\n"
        << "  ppl       perplexity-by-position curves\n"
        << "  eval      frozen-feature probe evaluation\n"
        << "  fewshot   k-shot probe evaluation\n"
        << "  zeroshot  generation-based task probabilities\n"
        << "  strat     quartile-stratified Brier table\n"
        << "  compare   paired bootstrap comparison of two prediction sets\n"
        << "run 'ehrseq <command> --help' for command options\n"
        << "relative paths resolve under $EHRSEQ_OUT_DIR when it is set\n";
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.empty()) {
        usage(std::cerr);
        return 2;
    }
    std::string cmd = args[0];
    std::vector<std::string> rest(args.begin() + 1, args.end());
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
        usage(std::cout);
        return 0;
    }
    if (cmd == "--version") {
        std::cout << "ehrseq " << kVersion << "\n";
        return 0;
    }
    if (cmd == "synth") return cmd_synth(std::move(rest));
    if (cmd == "ingest") return cmd_ingest(std::move(rest));
    if (cmd == "vocab") return cmd_vocab(std::move(rest));
    if (cmd == "encode") return cmd_encode(std::move(rest));
    if (cmd == "metrics") return cmd_metrics(std::move(rest));
    if (cmd == "fit-lm") return cmd_fit_lm(std::move(rest));
    if (cmd == "ppl") return cmd_ppl(std::move(rest));
    if (cmd == "eval") return run_probe("eval", std::move(rest), false);
    if (cmd == "fewshot") return run_probe("fewshot", std::move(rest), true);
    if (cmd == "zeroshot") return cmd_zeroshot(std::move(rest));
    if (cmd == "strat") return cmd_strat(std::move(rest));
    if (cmd == "compare") return cmd_compare(std::move(rest));
    std::cerr << "ehrseq: unknown command '" << cmd << "'\n";
    usage(std::cerr);
    return 2;
}
