#include "mabert/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mabert/checkpoint.hpp"
#include "mabert/diagnostics.hpp"
#include "mabert/train.hpp"

namespace mabert::cli {

namespace {

using json = nlohmann::json;

class JsonLog {
public:
    explicit JsonLog(const std::string& path) : out_(path, std::ios::app) {
        if (!out_) throw std::runtime_error("cannot open log file '" + path + "'");
    }
    void write(const std::string& event, json fields = json::object()) {
        fields["event"] = event;
        fields["time_ms"] = std::chrono::duration<double, std::milli>(std::chrono::system_clock::now().time_since_epoch())
                                .count();
        out_ << fields.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

json read_config_file(const std::string& path, std::initializer_list<const char*> sections) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* s : sections) known = known || it.key() == s;
        if (!known) throw ConfigError("unknown config section '" + it.key() + "'");
    }
    return j;
}

json section(const json& j, const char* name) { return j.contains(name) ? j.at(name) : json::object(); }

CorpusSpec corpus_from_json(const json& j, CorpusSpec c) {
    if (!j.is_object()) throw ConfigError("corpus config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        static const char* keys[] = {"kind", "count", "min_len", "max_len", "offset", "seed"};
        if (std::find(std::begin(keys), std::end(keys), it.key()) == std::end(keys)) {
            throw ConfigError("unknown corpus config key '" + it.key() + "'");
        }
    }
    try {
        if (j.contains("kind")) c.kind = j["kind"].get<std::string>();
        if (j.contains("count")) c.count = j["count"].get<std::size_t>();
        if (j.contains("min_len")) c.min_len = j["min_len"].get<std::size_t>();
        if (j.contains("max_len")) c.max_len = j["max_len"].get<std::size_t>();
        if (j.contains("offset")) c.offset = j["offset"].get<std::size_t>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("corpus config: ") + e.what());
    }
    return c;
}

json corpus_json(const CorpusSpec& c) {
    return {{"kind", c.kind},       {"V", c.V},           {"count", c.count}, {"min_len", c.min_len},
            {"max_len", c.max_len}, {"offset", c.offset}, {"seed", c.seed}};
}

void check_corpus_spec(const CorpusSpec& c) {
    if (c.kind != "copy-grammar" && c.kind != "bigram") {
        throw ConfigError("unknown corpus kind '" + c.kind + "' (expected copy-grammar or bigram)");
    }
    if (c.V <= 16) throw ConfigError("synthetic corpus needs V > 16");
    if (c.min_len == 0 || c.min_len > c.max_len) throw ConfigError("corpus length range is invalid");
    if (c.count == 0) throw ConfigError("corpus count must be >= 1");
    if (c.kind == "copy-grammar" && c.offset == 0) throw ConfigError("copy-grammar offset must be >= 1");
}

Corpus load_corpus(const std::string& path, const CorpusSpec& spec, std::size_t V) {
    if (path.empty()) return synthetic_corpus(spec);
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file '" + path + "'");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    const Corpus corpus = read_corpus(path, Vocabulary::build(lines, V));
    for (const auto& s : corpus) {
        for (auto id : s) {
            if (id < 0 || static_cast<std::size_t>(id) >= V) {
                throw VocabularyError("corpus id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(V));
            }
        }
    }
    return corpus;
}

template <typename Fn>
decltype(auto) with_dtype(const std::string& dtype, Fn&& fn) {
    if (parse_dtype(dtype) == DType::Float64) return fn(double{});
    return fn(float{});
}

std::vector<std::size_t> sorted_unique(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    std::string dtype = "f32";
    std::string log = "mabert.log.jsonl";
};

void add_common(CLI::App* cmd, Common& c, bool with_dtype_flag = true) {
    cmd->add_option("--config", c.config, "JSON config file (sections: model, train, corpus)");
    cmd->add_option("--seed", c.seed, "Seed for every random stream");
    if (with_dtype_flag) cmd->add_option("--dtype", c.dtype, "Floating-point type")->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--log", c.log, "Line-delimited JSON log file (appended)");
}

// ---- train ----

struct TrainArgs {
    Common common;
    std::optional<std::size_t> steps;
    std::optional<std::string> pattern;
    std::optional<double> lr;
    std::optional<std::size_t> batch;
    std::optional<std::size_t> checkpoint_every;
    std::string out = "run";
    std::string corpus;
};

int cmd_train(const TrainArgs& a, CLI::App* cmd, std::ostream& out) {
    const json file = read_config_file(a.common.config, {"model", "train", "corpus"});
    EncoderConfig mc = EncoderConfig::from_json(section(file, "model"));
    TrainConfig tc = TrainConfig::from_json(section(file, "train"));
    CorpusSpec cs = corpus_from_json(section(file, "corpus"), CorpusSpec{});
    if (a.pattern) {
        mc.pattern = *a.pattern;
        mc.depth = a.pattern->size();
    }
    if (cmd->count("--dtype") || !section(file, "model").contains("dtype")) mc.dtype = a.common.dtype;
    if (cmd->count("--seed") || !section(file, "train").contains("seed")) tc.seed = a.common.seed;
    if (!section(file, "corpus").contains("seed")) cs.seed = tc.seed;
    if (a.steps) tc.total_steps = *a.steps;
    if (a.lr) tc.peak_lr = *a.lr;
    if (a.batch) tc.batch_size = *a.batch;
    if (a.checkpoint_every) tc.checkpoint_every = *a.checkpoint_every;
    tc.dtype = mc.dtype;
    tc.out_dir = a.out;
    cs.V = mc.V;
    mc.validate();
    tc.validate();
    if (a.corpus.empty()) check_corpus_spec(cs);

    JsonLog log(a.common.log);
    log.write("config", {{"command", "train"}, {"model", mc.to_json()}, {"train", tc.to_json()},
                         {"corpus", a.corpus.empty() ? corpus_json(cs) : json{{"path", a.corpus}}}});
    const Corpus corpus = load_corpus(a.corpus, cs, mc.V);
    return with_dtype(mc.dtype, [&](auto tag) {
        using T = decltype(tag);
        Model<T> model(mc, tc.seed);
        log.write("model", {{"parameters", model.params.scalar_count()}});
        const std::size_t every = std::max<std::size_t>(1, tc.total_steps / 100);
        TrainResult r = train_loop(model, corpus, tc, [&](const MetricsRow& row) {
            if (row.step % every == 0 || row.step == tc.total_steps) {
                log.write("step", {{"step", row.step}, {"loss", row.loss}, {"masked_acc", row.masked_acc},
                                   {"lr", row.lr}, {"wall_ms", row.wall_ms}});
            }
        });
        json summary = {{"steps", tc.total_steps}, {"checkpoints", r.checkpoint_paths}};
        if (!r.metrics.empty()) {
            summary["final_loss"] = r.metrics.back().loss;
            summary["final_masked_acc"] = r.metrics.back().masked_acc;
        }
        log.write("done", summary);
        out << summary.dump() << '\n';
        return kExitOk;
    });
}

// ---- finetune ----

struct FinetuneArgs {
    Common common;
    std::optional<std::size_t> steps;
    std::string checkpoint;
    std::string pool = "map";
    std::size_t classes = 2;
    std::size_t examples = 2048;
    std::string out = "finetune.ckpt";
};

int cmd_finetune(const FinetuneArgs& a, CLI::App* cmd, std::ostream& out) {
    const json file = read_config_file(a.common.config, {"model", "train"});
    std::optional<Checkpoint> ck;
    EncoderConfig mc;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(a.checkpoint);
        mc = EncoderConfig::from_json(ck->config);
        mc = EncoderConfig::from_json(section(file, "model"), mc);
    } else {
        mc = EncoderConfig::from_json(section(file, "model"));
    }
    TrainConfig tc;
    tc.total_steps = 300;
    tc.peak_lr = 1e-3;
    tc = TrainConfig::from_json(section(file, "train"), tc);
    if (a.steps) tc.total_steps = *a.steps;
    if (cmd->count("--seed") || !section(file, "train").contains("seed")) tc.seed = a.common.seed;
    if (cmd->count("--dtype")) mc.dtype = a.common.dtype;
    mc.num_classes = a.classes;
    mc.pool = a.pool;
    tc.dtype = mc.dtype;
    mc.validate();
    tc.validate();
    const PoolingMode mode = parse_pooling(a.pool);

    JsonLog log(a.common.log);
    log.write("config", {{"command", "finetune"}, {"model", mc.to_json()}, {"train", tc.to_json()},
                         {"checkpoint", a.checkpoint}, {"examples", a.examples}});
    const auto data = synthetic_classification(mc.V, a.examples, tc.seed);
    const auto held_out = synthetic_classification(mc.V, 512, tc.seed + 1);
    return with_dtype(mc.dtype, [&](auto tag) {
        using T = decltype(tag);
        Model<T> model(mc, tc.seed);
        log.write("model", {{"parameters", model.params.scalar_count()},
                            {"loaded", ck ? load_matching_parameters(model, *ck) : 0}});
        const std::size_t every = std::max<std::size_t>(1, tc.total_steps / 50);
        finetune(model, data, tc, mode, [&](const MetricsRow& row) {
            if (row.step % every == 0 || row.step == tc.total_steps) {
                log.write("step", {{"step", row.step}, {"loss", row.loss}, {"accuracy", row.masked_acc}, {"lr", row.lr}});
            }
        });
        const EvalResult ev = evaluate_classifier(model, held_out, mode);
        save_checkpoint(make_checkpoint(model, tc.total_steps), a.out);
        const json summary = {{"eval_loss", ev.loss}, {"eval_accuracy", ev.accuracy}, {"checkpoint", a.out}};
        log.write("done", summary);
        out << summary.dump() << '\n';
        return kExitOk;
    });
}

// ---- eval ----

struct EvalArgs {
    Common common;
    std::string checkpoint;
    std::string corpus;
    std::string pool = "map";
    std::size_t count = 512;
    std::size_t batch = 32;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const json file = read_config_file(a.common.config, {"corpus"});
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const EncoderConfig mc = EncoderConfig::from_json(ck.config);
    CorpusSpec cs = corpus_from_json(section(file, "corpus"), CorpusSpec{});
    cs.V = mc.V;
    cs.count = a.count;
    cs.seed = a.common.seed + 1;
    if (a.corpus.empty()) check_corpus_spec(cs);
    const PoolingMode mode = parse_pooling(a.pool);
    JsonLog log(a.common.log);
    log.write("config", {{"command", "eval"}, {"checkpoint", a.checkpoint}, {"model", mc.to_json()},
                         {"corpus", a.corpus.empty() ? corpus_json(cs) : json{{"path", a.corpus}}}});
    return with_dtype(mc.dtype, [&](auto tag) {
        using T = decltype(tag);
        const Model<T> model = model_from_checkpoint<T>(ck);
        json summary;
        if (mc.num_classes > 0) {
            const EvalResult ev =
                evaluate_classifier(model, synthetic_classification(mc.V, a.count, a.common.seed + 1), mode, a.batch);
            summary = {{"task", "classification"}, {"loss", ev.loss}, {"accuracy", ev.accuracy}, {"count", ev.count}};
        } else {
            const EvalResult ev = evaluate_mlm(model, load_corpus(a.corpus, cs, mc.V), a.batch, a.common.seed);
            summary = {{"task", "mlm"}, {"loss", ev.loss}, {"masked_acc", ev.accuracy}, {"count", ev.count}};
        }
        log.write("done", summary);
        out << summary.dump() << '\n';
        return kExitOk;
    });
}

// ---- probe-padding ----

struct ProbeArgs {
    Common common;
    std::string checkpoint;
    std::vector<std::string> psm = {"none", "pre", "post", "pre+post"};
    std::vector<std::size_t> pads = {0, 8, 16, 32, 64};
    std::vector<std::string> representations = {"final_cls", "unmasked_mean", "map_pool"};
    std::size_t models = 1;
    std::size_t sequences = 16;
    std::string out = "drift.csv";
    std::string format = "csv";
};

int cmd_probe(const ProbeArgs& a, CLI::App* cmd, std::ostream& out) {
    const json file = read_config_file(a.common.config, {"model"});
    std::optional<Checkpoint> ck;
    EncoderConfig mc;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(a.checkpoint);
        mc = EncoderConfig::from_json(ck->config);
    } else {
        mc = EncoderConfig::from_json(section(file, "model"), probe_model_config());
        if (cmd->count("--dtype") || !section(file, "model").contains("dtype")) mc.dtype = a.common.dtype;
    }
    for (const auto& m : a.psm) parse_psm_mode(m);
    std::vector<Representation> reps;
    for (const auto& r : a.representations) {
        const Representation rep = parse_representation(r);
        if (rep == Representation::MapPool && mc.num_classes == 0) {
            if (cmd->count("--representations")) throw ConfigError("map_pool needs a model with a pooling head");
            continue;
        }
        reps.push_back(rep);
    }
    std::vector<std::string> rep_names;
    for (auto r : reps) rep_names.push_back(representation_name(r));
    if (a.models == 0 || a.sequences == 0) throw ConfigError("--models and --sequences must be >= 1");
    if (ck && a.models != 1) throw ConfigError("--models applies to random models only");
    mc.validate();
    const auto seqs = probe_sequences(mc.V, a.sequences, a.common.seed);
    const std::size_t max_pad = a.pads.empty() ? 0 : *std::max_element(a.pads.begin(), a.pads.end());
    for (const auto& s : seqs) {
        if (mc.positions && s.size() + 2 + max_pad > mc.T_max) {
            throw LengthError("pad " + std::to_string(max_pad) + " overflows T_max " + std::to_string(mc.T_max));
        }
    }

    JsonLog log(a.common.log);
    log.write("config", {{"command", "probe-padding"},
                         {"model", mc.to_json()},
                         {"checkpoint", a.checkpoint},
                         {"psm", a.psm},
                         {"pads", a.pads},
                         {"representations", rep_names},
                         {"models", a.models},
                         {"sequences", a.sequences},
                         {"seed", a.common.seed}});
    DriftReport report = with_dtype(mc.dtype, [&](auto tag) {
        using T = decltype(tag);
        // samples[mode][pad][rep] over all models
        std::vector<std::vector<std::vector<std::vector<double>>>> samples(
            a.psm.size(), std::vector<std::vector<std::vector<double>>>(
                              a.pads.size(), std::vector<std::vector<double>>(reps.size())));
        for (std::size_t mi = 0; mi < a.models; ++mi) {
            const Model<T> model = ck ? model_from_checkpoint<T>(*ck) : Model<T>(mc, a.common.seed + mi);
            for (std::size_t p = 0; p < a.psm.size(); ++p) {
                for (std::size_t q = 0; q < a.pads.size(); ++q) {
                    for (std::size_t r = 0; r < reps.size(); ++r) {
                        auto d = padding_drift_samples(model, seqs, a.pads[q], a.psm[p], reps[r]);
                        samples[p][q][r].insert(samples[p][q][r].end(), d.begin(), d.end());
                    }
                }
            }
        }
        DriftReport rep;
        for (std::size_t p = 0; p < a.psm.size(); ++p) {
            for (std::size_t q = 0; q < a.pads.size(); ++q) {
                for (std::size_t r = 0; r < reps.size(); ++r) {
                    const auto& d = samples[p][q][r];
                    DriftRow row;
                    row.psm_mode = psm_mode_name(parse_psm_mode(a.psm[p]));
                    row.pad_added = a.pads[q];
                    row.representation = representation_name(reps[r]);
                    row.n_samples = d.size();
                    for (double x : d) row.mean += x;
                    row.mean /= double(d.size());
                    for (double x : d) row.std += (x - row.mean) * (x - row.mean);
                    row.std = std::sqrt(row.std / double(d.size()));
                    rep.rows.push_back(row);
                }
            }
        }
        return rep;
    });
    emit_report(report.table(), a.format, a.out);
    const json summary = {{"rows", report.rows.size()}, {"out", a.out}};
    log.write("done", summary);
    out << summary.dump() << '\n';
    return kExitOk;
}

// ---- bench ----

struct BenchArgs {
    Common common;
    std::vector<std::string> patterns = {"MMTMMTMMTMMT", "TTTTTTTTTTTT", "MMMMMMMMMMMM"};
    std::vector<std::size_t> lengths = {128, 512, 1024, 2048, 4096};
    std::string phase = "forward";
    std::size_t repeats = 20;
    std::size_t warmups = 5;
    std::size_t batch = 1;
    std::string out = "bench.csv";
    std::string format = "csv";
};

int cmd_bench(const BenchArgs& a, CLI::App* cmd, std::ostream& out) {
    const json file = read_config_file(a.common.config, {"model"});
    BenchOptions opt;
    opt.base = EncoderConfig::from_json(section(file, "model"));
    if (!section(file, "model").contains("dropout")) opt.base.dropout = 0.0;
    opt.repeats = a.repeats;
    opt.warmups = a.warmups;
    opt.batch = a.batch;
    opt.seed = a.common.seed;
    opt.dtype = cmd->count("--dtype") || !section(file, "model").contains("dtype") ? a.common.dtype : opt.base.dtype;
    const BenchPhase phase = parse_bench_phase(a.phase);
    for (const auto& p : a.patterns) {
        EncoderConfig c = opt.base;
        c.pattern = p;
        c.depth = p.size();
        c.validate();
    }
    if (a.repeats < 1 || a.lengths.empty()) throw ConfigError("bench needs --repeats >= 1 and at least one length");

    JsonLog log(a.common.log);
    log.write("config", {{"command", "bench"},
                         {"model", opt.base.to_json()},
                         {"patterns", a.patterns},
                         {"lengths", sorted_unique(a.lengths)},
                         {"phase", a.phase},
                         {"repeats", a.repeats},
                         {"warmups", a.warmups},
                         {"batch", a.batch},
                         {"dtype", opt.dtype}});
    const ScalingReport report = length_scaling_bench(a.patterns, a.lengths, phase, opt);
    emit_report(report.table(), a.format, a.out);
    json slopes = json::object();
    for (const auto& p : a.patterns) {
        if (a.lengths.size() >= 2) slopes[p] = scaling_slope(report, p);
    }
    const json summary = {{"rows", report.rows.size()}, {"out", a.out}, {"slopes", slopes}};
    log.write("done", summary);
    out << summary.dump() << '\n';
    return kExitOk;
}

// ---- inspect-checkpoint ----

int cmd_inspect(const std::string& path, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(path);
    std::size_t scalars = 0;
    for (const auto& t : ck.tensors) scalars += numel(t.shape);
    const json j = {{"format_version", kCheckpointVersion},
                    {"step", ck.step},
                    {"config", ck.config},
                    {"parameters", scalars},
                    {"manifest", ck.manifest()}};
    out << j.dump(2) << '\n';
    return kExitOk;
}

// ---- gen-corpus ----

struct GenArgs {
    Common common;
    CorpusSpec spec;
    std::string out;
};

int cmd_gen(GenArgs a, std::ostream& out) {
    const json file = read_config_file(a.common.config, {"corpus"});
    const CorpusSpec cli_spec = a.spec;
    a.spec = corpus_from_json(section(file, "corpus"), cli_spec);
    a.spec.seed = a.common.seed;
    check_corpus_spec(a.spec);
    JsonLog log(a.common.log);
    log.write("config", {{"command", "gen-corpus"}, {"corpus", corpus_json(a.spec)}, {"out", a.out}});
    const Corpus c = synthetic_corpus(a.spec);
    write_corpus(a.out, c);
    const json summary = {{"sequences", c.size()}, {"out", a.out}};
    log.write("done", summary);
    out << summary.dump() << '\n';
    return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Hybrid Mamba/attention encoder: training, padding probe and scaling benchmark", "mabert"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    TrainArgs train;
    CLI::App* c_train = app.add_subcommand("train", "Masked-language-model pretraining");
    add_common(c_train, train.common);
    c_train->add_option("--steps", train.steps, "Optimizer steps (default 2000)");
    c_train->add_option("--pattern", train.pattern, "Layer schedule over M/T (default MMTMMTMMTMMT)");
    c_train->add_option("--lr", train.lr, "Peak learning rate (default 3e-4)");
    c_train->add_option("--batch", train.batch, "Sequences per step (default 16)");
    c_train->add_option("--checkpoint-every", train.checkpoint_every, "Save every N steps (default 0: initial and final)");
    c_train->add_option("--corpus", train.corpus, "Corpus file; synthetic corpus when omitted");
    c_train->add_option("--out", train.out, "Directory for checkpoints and metrics.csv");

    FinetuneArgs ft;
    CLI::App* c_ft = app.add_subcommand("finetune", "Sequence classification on the synthetic two-class task");
    add_common(c_ft, ft.common);
    c_ft->add_option("--steps", ft.steps, "Optimizer steps (default 300)");
    c_ft->add_option("--checkpoint", ft.checkpoint, "Pretrained checkpoint to start from");
    c_ft->add_option("--pool", ft.pool, "Pooling")->check(CLI::IsMember({"map", "attn", "cls", "maskedmean"}));
    c_ft->add_option("--classes", ft.classes, "Number of classes");
    c_ft->add_option("--examples", ft.examples, "Training examples");
    c_ft->add_option("--out", ft.out, "Output checkpoint path");

    EvalArgs ev;
    CLI::App* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint (MLM or classification)");
    add_common(c_eval, ev.common, false);
    c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint to evaluate")->required();
    c_eval->add_option("--corpus", ev.corpus, "Corpus file; synthetic corpus when omitted");
    c_eval->add_option("--pool", ev.pool, "Pooling for classifiers")
        ->check(CLI::IsMember({"map", "attn", "cls", "maskedmean"}));
    c_eval->add_option("--count", ev.count, "Synthetic evaluation sequences");
    c_eval->add_option("--batch", ev.batch, "Evaluation batch size");

    ProbeArgs pr;
    CLI::App* c_probe = app.add_subcommand("probe-padding", "Representation drift under appended padding");
    add_common(c_probe, pr.common);
    c_probe->add_option("--checkpoint", pr.checkpoint, "Probe this checkpoint instead of random models");
    c_probe->add_option("--psm", pr.psm, "Masking modes")->delimiter(',');
    c_probe->add_option("--pads", pr.pads, "Pad lengths")->delimiter(',');
    c_probe->add_option("--representations", pr.representations, "final_cls, unmasked_mean, map_pool")
        ->delimiter(',');
    c_probe->add_option("--models", pr.models, "Random models (seeds seed..seed+models-1)");
    c_probe->add_option("--sequences", pr.sequences, "Probe sequences per model");
    c_probe->add_option("--out", pr.out, "Report path");
    c_probe->add_option("--format", pr.format, "Report format")->check(CLI::IsMember({"csv", "json"}));

    BenchArgs be;
    CLI::App* c_bench = app.add_subcommand("bench", "Wall time and working set against sequence length");
    add_common(c_bench, be.common);
    c_bench->add_option("--patterns", be.patterns, "Layer schedules")->delimiter(',');
    c_bench->add_option("--lengths", be.lengths, "Sequence lengths")->delimiter(',');
    c_bench->add_option("--phase", be.phase, "Timed region")->check(CLI::IsMember({"forward", "train_step"}));
    c_bench->add_option("--repeats", be.repeats, "Timed repeats (median reported)");
    c_bench->add_option("--warmups", be.warmups, "Untimed warmup runs");
    c_bench->add_option("--batch", be.batch, "Batch size");
    c_bench->add_option("--out", be.out, "Report path");
    c_bench->add_option("--format", be.format, "Report format")->check(CLI::IsMember({"csv", "json"}));

    std::string inspect_path;
    CLI::App* c_inspect = app.add_subcommand("inspect-checkpoint", "Print a checkpoint's header and manifest");
    c_inspect->add_option("--checkpoint,checkpoint", inspect_path, "Checkpoint file")->required();

    GenArgs gen;
    CLI::App* c_gen = app.add_subcommand("gen-corpus", "Write a synthetic corpus as integer lines");
    add_common(c_gen, gen.common, false);
    c_gen->add_option("--kind", gen.spec.kind, "Corpus kind")->check(CLI::IsMember({"copy-grammar", "bigram"}));
    c_gen->add_option("--vocab", gen.spec.V, "Vocabulary size V (> 16)");
    c_gen->add_option("--count", gen.spec.count, "Sequences");
    c_gen->add_option("--min-len", gen.spec.min_len, "Shortest sequence");
    c_gen->add_option("--max-len", gen.spec.max_len, "Longest sequence");
    c_gen->add_option("--offset", gen.spec.offset, "Copy-grammar repeat offset");
    c_gen->add_option("--out", gen.out, "Output path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (c_train->parsed()) return cmd_train(train, c_train, out);
        if (c_ft->parsed()) return cmd_finetune(ft, c_ft, out);
        if (c_eval->parsed()) return cmd_eval(ev, out);
        if (c_probe->parsed()) return cmd_probe(pr, c_probe, out);
        if (c_bench->parsed()) return cmd_bench(be, c_bench, out);
        if (c_inspect->parsed()) return cmd_inspect(inspect_path, out);
        if (c_gen->parsed()) return cmd_gen(gen, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const PatternError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace mabert::cli
