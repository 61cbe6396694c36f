#include "mabert/encoder.hpp"

#include <cmath>
#include <random>
#include <set>

namespace mabert {

std::string LayerPattern::str() const {
    std::string s;
    for (auto k : layers) s += static_cast<char>(k);
    return s;
}

LayerPattern parse_pattern(const std::string& s, std::size_t expected_depth) {
    if (s.empty()) throw PatternError("layer pattern is empty");
    LayerPattern p;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != 'M' && s[i] != 'T') {
            throw PatternError("layer pattern '" + s + "' has invalid character '" + std::string(1, s[i]) +
                               "' at index " + std::to_string(i) + " (allowed: M, T)");
        }
        p.layers.push_back(static_cast<LayerKind>(s[i]));
    }
    if (expected_depth && s.size() != expected_depth) {
        throw PatternError("layer pattern '" + s + "' has length " + std::to_string(s.size()) + ", depth is " +
                           std::to_string(expected_depth));
    }
    return p;
}

const std::vector<std::string>& reference_patterns() {
    static const std::vector<std::string> patterns = {
        "MMMMMMMMMMMM", "TTTTTTTTTTTT", "MTTMTTMTTMTT", "TMTMTMTMTMTM",
        "MTMTMTMTMTMT", "TMMTMMTMMTMM", "MMTMMTMMTMMT", "TTMTTMTTMTTM",
    };
    return patterns;
}

void EncoderConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (depth == 0) fail("depth must be >= 1");
    try {
        parse_pattern(pattern, depth);
    } catch (const PatternError& e) {
        throw ConfigError(e.what());
    }
    if (D == 0) fail("D must be >= 1");
    if (n_heads == 0 || D % n_heads != 0) {
        fail("D=" + std::to_string(D) + " is not divisible by n_heads=" + std::to_string(n_heads));
    }
    if (D_ff < D) fail("D_ff=" + std::to_string(D_ff) + " must be >= D=" + std::to_string(D));
    if (expand == 0) fail("expand must be >= 1");
    if (N == 0) fail("N must be >= 1");
    if (conv_kernel == 0) fail("conv_kernel must be >= 1");
    if (V <= static_cast<std::size_t>(kNumReserved)) fail("V must exceed the " + std::to_string(kNumReserved) + " reserved ids");
    if (positions && T_max == 0) fail("T_max must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (kappa < 0) fail("kappa must be positive (or 0 for the default)");
    if (!(ln_eps >= 0)) fail("ln_eps must be >= 0");
    if (!(init_std > 0)) fail("init_std must be positive");
    parse_psm_mode(psm_mode);
    parse_scan_direction(scan_direction);
    parse_conv_padding(conv_padding);
    parse_dtype(dtype);
    if (init != "bert" && init != "fan_in") fail("init must be bert or fan_in, got '" + init + "'");
    if (dt_init != "mamba" && dt_init != "zero") fail("dt_init must be mamba or zero, got '" + dt_init + "'");
    if (a_init != "linear" && a_init != "log") fail("a_init must be linear or log, got '" + a_init + "'");
    static const std::set<std::string> pools = {"map", "attn", "cls", "maskedmean"};
    if (!pools.count(pool)) fail("pool must be one of map, attn, cls, maskedmean; got '" + pool + "'");
    if (num_classes == 1) fail("num_classes must be 0 (no head) or >= 2");
}

nlohmann::json EncoderConfig::to_json() const {
    return {
        {"D", D},
        {"depth", depth},
        {"pattern", pattern},
        {"n_heads", n_heads},
        {"D_ff", D_ff},
        {"expand", expand},
        {"N", N},
        {"r", r},
        {"conv_kernel", conv_kernel},
        {"V", V},
        {"T_max", T_max},
        {"dropout", dropout},
        {"positions", positions},
        {"psm_mode", psm_mode},
        {"dtype", dtype},
        {"kappa", kappa},
        {"ln_eps", ln_eps},
        {"ssm_activation", ssm_activation},
        {"scan_direction", scan_direction},
        {"conv_padding", conv_padding},
        {"init", init},
        {"init_std", init_std},
        {"dt_init", dt_init},
        {"a_init", a_init},
        {"final_ln", final_ln},
        {"tie_mlm_decoder", tie_mlm_decoder},
        {"num_classes", num_classes},
        {"pool", pool},
    };
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j, EncoderConfig c) {
    if (!j.is_object()) throw ConfigError("encoder config must be a JSON object");
    const nlohmann::json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.contains(it.key())) throw ConfigError("unknown encoder config key '" + it.key() + "'");
    }
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config key '") + key + "': " + e.what());
        }
    };
    get("D", c.D);
    get("depth", c.depth);
    get("pattern", c.pattern);
    get("n_heads", c.n_heads);
    get("D_ff", c.D_ff);
    get("expand", c.expand);
    get("N", c.N);
    get("r", c.r);
    get("conv_kernel", c.conv_kernel);
    get("V", c.V);
    get("T_max", c.T_max);
    get("dropout", c.dropout);
    get("positions", c.positions);
    get("psm_mode", c.psm_mode);
    get("dtype", c.dtype);
    get("kappa", c.kappa);
    get("ln_eps", c.ln_eps);
    get("ssm_activation", c.ssm_activation);
    get("scan_direction", c.scan_direction);
    get("conv_padding", c.conv_padding);
    get("init", c.init);
    get("init_std", c.init_std);
    get("dt_init", c.dt_init);
    get("a_init", c.a_init);
    get("final_ln", c.final_ln);
    get("tie_mlm_decoder", c.tie_mlm_decoder);
    get("num_classes", c.num_classes);
    get("pool", c.pool);
    if (j.contains("pattern") && !j.contains("depth")) c.depth = c.pattern.size();
    c.validate();
    return c;
}

std::size_t parameter_count(const EncoderConfig& cfg) {
    cfg.validate();
    const std::size_t D = cfg.D, F = cfg.D_ff, Dm = cfg.inner(), N = cfg.N, r = cfg.rank(), k = cfg.conv_kernel;
    const std::size_t ln = 2 * D;
    const std::size_t ffn = D * F + F + F * D + D;
    const std::size_t tf = 2 * ln + 4 * (D * D + D) + ffn;
    const std::size_t ssm = 2 * ln + D * 2 * Dm + (Dm * k + Dm) + Dm * (r + 2 * N) + (r * Dm + Dm) + Dm * N + Dm +
                            Dm * D + ffn;
    std::size_t total = cfg.V * D + (cfg.positions ? cfg.T_max * D : 0) + ln;
    for (char ch : cfg.pattern) total += ch == 'T' ? tf : ssm;
    if (cfg.final_ln) total += ln;
    total += D * D + D + ln + (cfg.tie_mlm_decoder ? 0 : D * cfg.V) + cfg.V;
    if (cfg.num_classes) total += D + cfg.num_classes * D + cfg.num_classes;
    return total;
}

namespace {

template <typename T>
class Initializer {
public:
    Initializer(const EncoderConfig& cfg, std::uint64_t seed, ParamStore<T>& store)
        : cfg_(cfg), rng_(keyed_engine(seed, "init")), store_(store) {}

    Var<T> weight(const std::string& name, Shape shape, std::size_t fan_in) {
        const double std = cfg_.init == "fan_in" ? 1.0 / std::sqrt(double(fan_in)) : cfg_.init_std;
        return store_.add(name, truncated_normal(shape, std), true);
    }

    Var<T> embedding(const std::string& name, Shape shape) {
        return store_.add(name, truncated_normal(shape, cfg_.init_std), true);
    }

    Var<T> zeros(const std::string& name, Shape shape) { return store_.add(name, Tensor<T>(shape), false); }

    Var<T> filled(const std::string& name, Shape shape, T v, bool decay = false) {
        return store_.add(name, Tensor<T>(shape, v), decay);
    }

    Var<T> custom(const std::string& name, Tensor<T> value, bool decay) { return store_.add(name, std::move(value), decay); }

    LinearParams<T> linear(const std::string& name, std::size_t in, std::size_t out, bool bias = true) {
        LinearParams<T> p;
        p.W = weight(name + ".W", {in, out}, in);
        if (bias) p.b = zeros(name + ".b", {out});
        return p;
    }

    LayerNormParams<T> ln(const std::string& name, std::size_t D) {
        return {filled(name + ".gamma", {D}, T(1)), zeros(name + ".beta", {D})};
    }

    FFNParams<T> ffn(const std::string& name) {
        return {linear(name + ".up", cfg_.D, cfg_.D_ff), linear(name + ".down", cfg_.D_ff, cfg_.D)};
    }

    Tensor<T> uniform(Shape shape, double bound) {
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor<T> t(shape);
        for (auto& v : t.values()) v = T(dist(rng_));
        return t;
    }

    Tensor<T> dt_bias(std::size_t Dm) {
        Tensor<T> t(Shape{Dm});
        if (cfg_.dt_init == "zero") return t;
        std::uniform_real_distribution<double> dist(std::log(1e-3), std::log(1e-1));
        for (auto& v : t.values()) {
            const double dt = std::exp(dist(rng_));
            v = T(dt + std::log(-std::expm1(-dt)));
        }
        return t;
    }

private:
    Tensor<T> truncated_normal(const Shape& shape, double std) {
        std::normal_distribution<double> dist(0.0, 1.0);
        Tensor<T> t(shape);
        for (auto& v : t.values()) {
            double x;
            do x = dist(rng_);
            while (std::abs(x) > 2.0);
            v = T(x * std);
        }
        return t;
    }

    const EncoderConfig& cfg_;
    std::mt19937_64 rng_;
    ParamStore<T>& store_;
};

}  // namespace

template <typename T>
Model<T>::Model(const EncoderConfig& cfg, std::uint64_t seed) : config(cfg) {
    config.validate();
    const LayerPattern pattern = parse_pattern(config.pattern, config.depth);
    Initializer<T> init(config, seed, params);
    const std::size_t D = config.D, Dm = config.inner(), N = config.N, r = config.rank(), k = config.conv_kernel;

    encoder.embed.token = init.embedding("embed.token", {config.V, D});
    if (config.positions) encoder.embed.position = init.embedding("embed.position", {config.T_max, D});
    encoder.embed.ln = init.ln("embed.ln", D);

    for (std::size_t i = 0; i < pattern.size(); ++i) {
        const std::string base = "layers." + std::to_string(i);
        EncoderLayer<T> layer{pattern.layers[i], {}, {}};
        if (layer.kind == LayerKind::Transformer) {
            auto& p = layer.tf;
            p.ln1 = init.ln(base + ".ln1", D);
            p.attn.q = init.linear(base + ".attn.q", D, D);
            p.attn.k = init.linear(base + ".attn.k", D, D);
            p.attn.v = init.linear(base + ".attn.v", D, D);
            p.attn.o = init.linear(base + ".attn.o", D, D);
            p.attn.n_heads = config.n_heads;
            p.ln2 = init.ln(base + ".ln2", D);
            p.ffn = init.ffn(base + ".ffn");
        } else {
            auto& p = layer.ssm;
            const std::string s = base + ".ssm";
            p.ln1 = init.ln(base + ".ln1", D);
            p.W_in = init.weight(s + ".W_in", {D, 2 * Dm}, D);
            if (config.init == "fan_in") {
                p.conv.kernel = init.custom(s + ".conv.kernel", init.uniform({Dm, k}, 1.0 / std::sqrt(double(k))), true);
            } else {
                p.conv.kernel = init.weight(s + ".conv.kernel", {Dm, k}, k);
            }
            p.conv.bias = init.zeros(s + ".conv.bias", {Dm});
            p.W_x = init.weight(s + ".W_x", {Dm, r + 2 * N}, Dm);
            p.W_dt = init.weight(s + ".W_dt", {r, Dm}, r);
            p.b_dt = init.custom(s + ".b_dt", init.dt_bias(Dm), false);
            Tensor<T> a_log(Shape{Dm, N});
            for (std::size_t d = 0; d < Dm; ++d) {
                for (std::size_t n = 0; n < N; ++n) {
                    const double a = config.a_init == "log" ? std::pow(10.0, -1.0 + 2.0 * double(n) / double(std::max<std::size_t>(N - 1, 1)))
                                                            : double(n + 1);
                    a_log[d * N + n] = T(std::log(a));
                }
            }
            p.A_log = init.custom(s + ".A_log", std::move(a_log), false);
            p.D_skip = init.filled(s + ".D_skip", {Dm}, T(1));
            p.W_out = init.weight(s + ".W_out", {Dm, D}, Dm);
            p.ln2 = init.ln(base + ".ln2", D);
            p.ffn = init.ffn(base + ".ffn");
        }
        encoder.layers.push_back(std::move(layer));
    }
    if (config.final_ln) encoder.final_ln = init.ln("final_ln", D);

    mlm.transform = init.linear("mlm.transform", D, D);
    mlm.ln = init.ln("mlm.ln", D);
    mlm.tied = config.tie_mlm_decoder;
    if (!mlm.tied) mlm.decoder.W = init.weight("mlm.decoder.W", {D, config.V}, D);
    mlm.decoder.b = init.zeros("mlm.decoder.b", {config.V});

    if (config.num_classes) {
        map.W_s = init.weight("pool.W_s", {D, 1}, D);
        head.W_c = init.weight("head.W_c", {config.num_classes, D}, D);
        head.b_c = init.zeros("head.b_c", {config.num_classes});
    }
}

template <typename T>
Var<T> transformer_block_forward(const Var<T>& H, const Tensor<T>& mask, const TransformerBlockParams<T>& p,
                                 const EncoderConfig& cfg, const ForwardContext& ctx, const std::string& site) {
    const T eps = T(cfg.ln_eps);
    Var<T> att = mhsa_forward(layer_norm(H, p.ln1, eps), mask, p.attn, config_kappa<T>(cfg));
    Var<T> h_att = add(H, dropout(att, cfg.dropout, ctx, site + ".attn_out"));
    return add(h_att, dropout(ffn_forward(layer_norm(h_att, p.ln2, eps), p.ffn), cfg.dropout, ctx, site + ".ffn_out"));
}

template <typename T>
Var<T> encoder_forward(const BatchEncoding& batch, const Model<T>& model, const EncoderConfig& cfg,
                       const ForwardContext& ctx) {
    if (batch.ids.size() != batch.B * batch.T || batch.mask.size() != batch.B * batch.T) {
        throw DimensionError("batch encoding buffers do not match B=" + std::to_string(batch.B) +
                             ", T=" + std::to_string(batch.T));
    }
    const Tensor<T> mask = batch.mask_tensor<T>();
    validate_end_padding(mask);
    EmbeddingOptions eo{cfg.positions, cfg.ln_eps, cfg.dropout};
    Var<T> H = embed_forward(std::span<const std::int32_t>(batch.ids), batch.B, batch.T, model.encoder.embed, eo, ctx);
    MambaOptions mo;
    mo.psm = cfg.psm();
    mo.direction = cfg.direction();
    mo.conv_padding = parse_conv_padding(cfg.conv_padding);
    mo.ssm_activation = cfg.ssm_activation;
    mo.ln_eps = cfg.ln_eps;
    mo.dropout = cfg.dropout;
    mo.rank = model.config.rank();
    mo.state = model.config.N;
    for (std::size_t i = 0; i < model.encoder.layers.size(); ++i) {
        const auto& layer = model.encoder.layers[i];
        const std::string site = "layers." + std::to_string(i);
        if (layer.kind == LayerKind::Transformer) {
            H = transformer_block_forward(H, mask, layer.tf, cfg, ctx, site);
        } else {
            H = mamba_block_forward(H, mask, layer.ssm, mo, ctx, site);
        }
    }
    if (model.config.final_ln) H = layer_norm(H, model.encoder.final_ln, T(cfg.ln_eps));
    return H;
}

template struct Model<float>;
template struct Model<double>;
template Var<float> transformer_block_forward(const Var<float>&, const Tensor<float>&,
                                              const TransformerBlockParams<float>&, const EncoderConfig&,
                                              const ForwardContext&, const std::string&);
template Var<double> transformer_block_forward(const Var<double>&, const Tensor<double>&,
                                               const TransformerBlockParams<double>&, const EncoderConfig&,
                                               const ForwardContext&, const std::string&);
template Var<float> encoder_forward(const BatchEncoding&, const Model<float>&, const EncoderConfig&,
                                    const ForwardContext&);
template Var<double> encoder_forward(const BatchEncoding&, const Model<double>&, const EncoderConfig&,
                                     const ForwardContext&);
template struct Model<long double>;
template Var<long double> encoder_forward(const BatchEncoding&, const Model<long double>&, const EncoderConfig&,
                                          const ForwardContext&);

}  // namespace mabert
