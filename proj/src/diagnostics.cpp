#include "mabert/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mabert/checkpoint.hpp"
#include "mabert/rng.hpp"
#include "mabert/train.hpp"

namespace mabert {

std::string representation_name(Representation r) {
    switch (r) {
        case Representation::FinalCls: return "final_cls";
        case Representation::UnmaskedMean: return "unmasked_mean";
        case Representation::MapPool: return "map_pool";
    }
    return "?";
}

Representation parse_representation(const std::string& s) {
    if (s == "final_cls" || s == "cls") return Representation::FinalCls;
    if (s == "unmasked_mean" || s == "mean") return Representation::UnmaskedMean;
    if (s == "map_pool" || s == "map") return Representation::MapPool;
    throw ConfigError("unknown representation '" + s + "' (expected final_cls, unmasked_mean or map_pool)");
}

const std::vector<Representation>& all_representations() {
    static const std::vector<Representation> all = {Representation::FinalCls, Representation::UnmaskedMean,
                                                    Representation::MapPool};
    return all;
}

double cosine_distance(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw DimensionError("cosine_distance: vectors of different length");
    double uv = 0, uu = 0, vv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    if (uu == 0 && vv == 0) return 0.0;
    if (uu == 0 || vv == 0) return 1.0;
    const double prod = uu * vv;
    const double norm = std::isnormal(prod) ? std::sqrt(prod) : std::sqrt(uu) * std::sqrt(vv);
    const double d = 1.0 - uv / norm;
    return std::clamp(d, 0.0, 2.0);
}

nlohmann::ordered_json ReportTable::to_json() const {
    nlohmann::ordered_json rows_json = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        nlohmann::ordered_json obj = nlohmann::ordered_json::object();
        for (std::size_t i = 0; i < columns.size(); ++i) obj[columns[i]] = r.at(i);
        rows_json.push_back(std::move(obj));
    }
    return {{"columns", columns}, {"rows", std::move(rows_json)}};
}

ReportTable ReportTable::from_json(const nlohmann::ordered_json& j) {
    ReportTable t;
    t.columns = j.at("columns").get<std::vector<std::string>>();
    for (const auto& obj : j.at("rows")) {
        std::vector<nlohmann::ordered_json> row;
        for (const auto& c : t.columns) row.push_back(obj.at(c));
        t.rows.push_back(std::move(row));
    }
    return t;
}

namespace {

std::string csv_field(const nlohmann::ordered_json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_float()) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", v.get<double>());
        return buf;
    }
    return v.dump();
}

}  // namespace

std::string ReportTable::to_csv() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << '\n';
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << csv_field(r[i]);
        os << '\n';
    }
    return os.str();
}

ReportTable DriftReport::table() const {
    ReportTable t;
    t.columns = {"psm_mode", "pad_added", "representation", "mean_distance", "std_distance", "n_samples"};
    for (const auto& r : rows) t.rows.push_back({r.psm_mode, r.pad_added, r.representation, r.mean, r.std, r.n_samples});
    return t;
}

const DriftRow& DriftReport::at(const std::string& psm_mode, std::size_t pad, Representation r) const {
    const std::string name = representation_name(r);
    for (const auto& row : rows) {
        if (row.psm_mode == psm_mode && row.pad_added == pad && row.representation == name) return row;
    }
    throw std::out_of_range("no drift cell for " + psm_mode + "/" + std::to_string(pad) + "/" + name);
}

EncoderConfig probe_model_config() {
    EncoderConfig cfg;
    cfg.D = 64;
    cfg.pattern = "MMTMMTMMTMMT";
    cfg.depth = 12;
    cfg.D_ff = 256;
    cfg.V = 1024;
    cfg.T_max = 128;
    cfg.dropout = 0.0;
    cfg.init = "fan_in";
    cfg.conv_padding = "same";
    cfg.num_classes = 2;
    return cfg;
}

std::vector<std::vector<std::int32_t>> probe_sequences(std::size_t V, std::size_t count, std::uint64_t seed,
                                                       std::size_t min_len, std::size_t max_len) {
    if (V <= static_cast<std::size_t>(kNumReserved)) throw ConfigError("vocabulary has no non-reserved ids");
    if (min_len == 0 || min_len > max_len) throw ConfigError("probe length range is invalid");
    std::mt19937_64 rng = keyed_engine(seed, "probe-sequences");
    std::uniform_int_distribution<std::size_t> length(min_len, max_len);
    std::uniform_int_distribution<std::int32_t> token(kNumReserved, static_cast<std::int32_t>(V) - 1);
    std::vector<std::vector<std::int32_t>> out(count);
    for (auto& s : out) {
        s.resize(length(rng));
        for (auto& id : s) id = token(rng);
    }
    return out;
}

namespace {

template <typename T>
std::vector<double> representation(const Model<T>& model, const EncoderConfig& cfg, const std::vector<std::int32_t>& seq,
                                   std::size_t pad, Representation r) {
    const BatchEncoding batch = make_batch({seq}, pad);
    if (batch.T > model.config.T_max && model.config.positions) {
        throw LengthError("sequence of " + std::to_string(seq.size()) + " tokens plus " + std::to_string(pad) +
                          " pads exceeds T_max " + std::to_string(model.config.T_max));
    }
    Var<T> H = encoder_forward(batch, model, cfg);
    const std::size_t D = cfg.D, n = batch.length(0);
    const T* h = H.value().data();
    std::vector<double> out(D, 0.0);
    switch (r) {
        case Representation::FinalCls:
            for (std::size_t d = 0; d < D; ++d) out[d] = double(h[d]);
            break;
        case Representation::UnmaskedMean:
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t d = 0; d < D; ++d) out[d] += double(h[t * D + d]);
            }
            for (auto& x : out) x /= double(n);
            break;
        case Representation::MapPool: {
            const Tensor<T> mask = batch.mask_tensor<T>();
            Var<T> p = map_pool(H, mask, model.map, config_kappa<T>(cfg));
            for (std::size_t d = 0; d < D; ++d) out[d] = double(p.value()[d]);
            break;
        }
    }
    return out;
}

template <typename T>
EncoderConfig probe_config(const Model<T>& model, const std::string& psm_mode) {
    EncoderConfig cfg = model.config;
    cfg.psm_mode = psm_mode;
    cfg.validate();
    return cfg;
}

void check_probe_lengths(std::size_t T_max, bool positions, const std::vector<std::vector<std::int32_t>>& seqs,
                         std::size_t max_pad) {
    if (!positions) return;
    for (const auto& s : seqs) {
        if (s.size() + 2 + max_pad > T_max) {
            throw LengthError("sequence of " + std::to_string(s.size()) + " tokens with pad " + std::to_string(max_pad) +
                              " exceeds T_max " + std::to_string(T_max));
        }
    }
}

}  // namespace

template <typename T>
std::vector<double> padding_drift_samples(const Model<T>& model,
                                          const std::vector<std::vector<std::int32_t>>& sequences, std::size_t pad,
                                          const std::string& psm_mode, Representation r) {
    check_probe_lengths(model.config.T_max, model.config.positions, sequences, pad);
    const EncoderConfig cfg = probe_config(model, psm_mode);
    NoGradGuard guard;
    std::vector<double> out;
    out.reserve(sequences.size());
    for (const auto& seq : sequences) {
        const std::vector<double> base = representation(model, cfg, seq, 0, r);
        out.push_back(pad == 0 ? 0.0 : cosine_distance(base, representation(model, cfg, seq, pad, r)));
    }
    return out;
}

template <typename T>
DriftReport padding_drift_probe(const Model<T>& model, const std::vector<std::vector<std::int32_t>>& sequences,
                                const std::vector<std::size_t>& pads, const std::vector<std::string>& psm_modes,
                                const std::vector<Representation>& representations) {
    if (sequences.empty()) throw ConfigError("padding probe needs at least one sequence");
    const std::size_t max_pad = pads.empty() ? 0 : *std::max_element(pads.begin(), pads.end());
    check_probe_lengths(model.config.T_max, model.config.positions, sequences, max_pad);
    NoGradGuard guard;
    DriftReport report;
    for (const auto& mode : psm_modes) {
        const EncoderConfig cfg = probe_config(model, mode);
        std::vector<std::vector<std::vector<double>>> base(representations.size());
        for (std::size_t ri = 0; ri < representations.size(); ++ri) {
            for (const auto& seq : sequences) base[ri].push_back(representation(model, cfg, seq, 0, representations[ri]));
        }
        for (std::size_t pad : pads) {
            for (std::size_t ri = 0; ri < representations.size(); ++ri) {
                std::vector<double> d;
                for (std::size_t s = 0; s < sequences.size(); ++s) {
                    d.push_back(pad == 0 ? 0.0
                                         : cosine_distance(base[ri][s], representation(model, cfg, sequences[s], pad,
                                                                                        representations[ri])));
                }
                DriftRow row;
                row.psm_mode = psm_mode_name(parse_psm_mode(mode));
                row.pad_added = pad;
                row.representation = representation_name(representations[ri]);
                row.n_samples = d.size();
                row.mean = std::accumulate(d.begin(), d.end(), 0.0) / double(d.size());
                double var = 0;
                for (double x : d) var += (x - row.mean) * (x - row.mean);
                row.std = std::sqrt(var / double(d.size()));
                report.rows.push_back(row);
            }
        }
    }
    return report;
}

std::string bench_phase_name(BenchPhase p) { return p == BenchPhase::Forward ? "forward" : "train_step"; }

BenchPhase parse_bench_phase(const std::string& s) {
    if (s == "forward") return BenchPhase::Forward;
    if (s == "train_step" || s == "train") return BenchPhase::TrainStep;
    throw ConfigError("unknown bench phase '" + s + "' (expected forward or train_step)");
}

ReportTable ScalingReport::table() const {
    ReportTable t;
    t.columns = {"pattern", "seq_len", "batch", "phase", "wall_ms", "working_set_bytes", "repeats"};
    for (const auto& r : rows) {
        t.rows.push_back({r.pattern, r.seq_len, r.batch, r.phase, r.wall_ms, r.working_set_bytes, r.repeats});
    }
    return t;
}

namespace {

template <typename T>
void stretch_positions(Model<T>& model, std::size_t T_new) {
    if (!model.config.positions || T_new <= model.config.T_max) return;
    Var<T>& table = model.params.get("embed.position");
    table.mutable_value() = interpolate_positions(table.value(), T_new);
    model.config.T_max = T_new;
}

BatchEncoding bench_batch(std::size_t L, std::size_t B, std::size_t V, std::uint64_t seed) {
    if (L < 3) throw ConfigError("benchmark length must be >= 3");
    std::mt19937_64 rng = keyed_engine(seed, "bench-tokens", L);
    std::uniform_int_distribution<std::int32_t> token(kNumReserved, static_cast<std::int32_t>(V) - 1);
    std::vector<std::vector<std::int32_t>> seqs(B, std::vector<std::int32_t>(L - 2));
    for (auto& s : seqs) {
        for (auto& id : s) id = token(rng);
    }
    BatchEncoding batch = make_batch(seqs);
    std::mt19937_64 mask_rng = keyed_engine(seed, "bench-mask", L);
    mlm_mask_batch(batch, mask_rng, V);
    return batch;
}

template <typename T>
void bench_series(const std::string& pattern, const std::vector<std::size_t>& lengths, BenchPhase phase,
                  const BenchOptions& opt, ScalingReport& report) {
    EncoderConfig cfg = opt.base;
    cfg.pattern = pattern;
    cfg.depth = pattern.size();
    cfg.dtype = opt.dtype;
    cfg.validate();
    Model<T> model(cfg, opt.seed);
    stretch_positions(model, lengths.back());
    TrainConfig tc;
    tc.total_steps = 1000000;
    AdamState<T> adam;
    std::size_t step = 0;
    for (std::size_t L : lengths) {
        const BatchEncoding batch = bench_batch(L, opt.batch, cfg.V, opt.seed);
        std::vector<std::size_t> rows;
        std::vector<std::int32_t> labels;
        for (std::size_t i = 0; i < batch.labels.size(); ++i) {
            if (batch.labels[i] == kIgnoreLabel) continue;
            rows.push_back(i);
            labels.push_back(batch.labels[i]);
        }
        auto run = [&] {
            if (phase == BenchPhase::Forward) {
                NoGradGuard guard;
                Var<T> H = encoder_forward(batch, model);
                return;
            }
            ++step;
            const ForwardContext ctx{true, opt.seed, step};
            Var<T> H = encoder_forward(batch, model, ctx);
            Var<T> loss = mlm_loss(mlm_logits_at(H, std::span<const std::size_t>(rows), model),
                                   std::span<const std::int32_t>(labels));
            Gradients<T> grads = backward(loss, model.params);
            adam_update(model.params, grads, adam, step, 1e-5, tc);
            model.params.zero_grad();
        };
        for (std::size_t i = 0; i < opt.warmups; ++i) run();
        std::vector<double> times;
        std::size_t working = 0;
        for (std::size_t i = 0; i < opt.repeats; ++i) {
            MemoryTracker::reset_peak();
            const std::size_t live = MemoryTracker::live_bytes();
            const auto t0 = std::chrono::steady_clock::now();
            run();
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            working = std::max(working, MemoryTracker::peak_bytes() - live);
        }
        std::sort(times.begin(), times.end());
        const std::size_t n = times.size();
        ScalingRow row;
        row.pattern = pattern;
        row.seq_len = L;
        row.batch = opt.batch;
        row.phase = bench_phase_name(phase);
        row.wall_ms = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
        row.working_set_bytes = working;
        row.repeats = n;
        report.rows.push_back(row);
    }
}

}  // namespace

ScalingReport length_scaling_bench(const std::vector<std::string>& patterns, std::vector<std::size_t> lengths,
                                   BenchPhase phase, const BenchOptions& options) {
    if (options.repeats == 0) throw ConfigError("benchmark needs at least one timed repeat");
    if (options.batch == 0) throw ConfigError("benchmark batch must be >= 1");
    if (lengths.empty() || patterns.empty()) throw ConfigError("benchmark needs at least one pattern and one length");
    std::sort(lengths.begin(), lengths.end());
    lengths.erase(std::unique(lengths.begin(), lengths.end()), lengths.end());
    for (const auto& p : patterns) parse_pattern(p);
#if defined(__GLIBC__)
    // Serve large buffers from the heap and keep them between repeats.
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    ScalingReport report;
    const DType dtype = parse_dtype(options.dtype);
    for (const auto& p : patterns) {
        if (dtype == DType::Float32) {
            bench_series<float>(p, lengths, phase, options, report);
        } else {
            bench_series<double>(p, lengths, phase, options, report);
        }
    }
    return report;
}

double scaling_slope(const ScalingReport& report, const std::string& pattern, std::size_t min_len) {
    std::vector<double> x, y;
    for (const auto& r : report.rows) {
        if (r.pattern != pattern || r.seq_len < min_len) continue;
        x.push_back(std::log(double(r.seq_len)));
        y.push_back(std::log(r.wall_ms));
    }
    if (x.size() < 2) throw std::invalid_argument("slope needs at least two lengths for pattern " + pattern);
    const double n = double(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    return sxy / sxx;
}

void emit_report(const ReportTable& table, const std::string& format, const std::string& path) {
    if (format == "csv") {
        write_file_atomic(path, table.to_csv());
    } else if (format == "json") {
        write_file_atomic(path, table.to_json().dump(2) + "\n");
    } else {
        throw ConfigError("unknown report format '" + format + "' (expected csv or json)");
    }
}

#define MABERT_INSTANTIATE_DIAG(T)                                                                                \
    template DriftReport padding_drift_probe(const Model<T>&, const std::vector<std::vector<std::int32_t>>&,      \
                                             const std::vector<std::size_t>&, const std::vector<std::string>&,    \
                                             const std::vector<Representation>&);                                 \
    template std::vector<double> padding_drift_samples(const Model<T>&,                                           \
                                                       const std::vector<std::vector<std::int32_t>>&, std::size_t, \
                                                       const std::string&, Representation);

MABERT_INSTANTIATE_DIAG(float)
MABERT_INSTANTIATE_DIAG(double)

}  // namespace mabert
