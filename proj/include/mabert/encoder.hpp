#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabert/batch.hpp"
#include "mabert/ssm.hpp"

namespace mabert {

enum class LayerKind : char { Mamba = 'M', Transformer = 'T' };

struct LayerPattern {
    std::vector<LayerKind> layers;

    std::size_t size() const { return layers.size(); }
    std::string str() const;
};

// Accepts only the characters M and T; when expected_depth is nonzero the length must match.
LayerPattern parse_pattern(const std::string& s, std::size_t expected_depth = 0);

// The eight interleaving schedules compared in the reference results.
const std::vector<std::string>& reference_patterns();

struct EncoderConfig {
    std::size_t D = 64;
    std::size_t depth = 12;
    std::string pattern = "MMTMMTMMTMMT";
    std::size_t n_heads = 4;
    std::size_t D_ff = 256;
    std::size_t expand = 2;
    std::size_t N = 16;
    std::size_t r = 0;  // 0 selects max(1, ceil(D_m / 16))
    std::size_t conv_kernel = 4;
    std::size_t V = 1024;
    std::size_t T_max = 512;
    double dropout = 0.1;
    bool positions = true;
    std::string psm_mode = "pre+post";
    std::string dtype = "f32";

    double kappa = 0.0;  // 0 selects the per-dtype default
    double ln_eps = 1e-12;
    bool ssm_activation = true;
    std::string scan_direction = "bidirectional";
    std::string conv_padding = "causal";
    std::string init = "bert";     // bert | fan_in
    double init_std = 0.02;
    std::string dt_init = "mamba"; // mamba | zero
    std::string a_init = "linear"; // linear | log
    bool final_ln = true;
    bool tie_mlm_decoder = false;
    std::size_t num_classes = 0;   // > 0 adds pooling + classification head
    std::string pool = "map";      // map | attn | cls | maskedmean

    std::size_t inner() const { return expand * D; }
    std::size_t rank() const { return r ? r : std::max<std::size_t>(1, (inner() + 15) / 16); }
    PsmMode psm() const { return parse_psm_mode(psm_mode); }
    ScanDirection direction() const { return parse_scan_direction(scan_direction); }

    // Throws ConfigError describing the first violated constraint.
    void validate() const;
    nlohmann::json to_json() const;
    // Unknown keys are rejected; missing keys keep the values already in `base`.
    static EncoderConfig from_json(const nlohmann::json& j, EncoderConfig base);
    static EncoderConfig from_json(const nlohmann::json& j) { return from_json(j, EncoderConfig{}); }
};

// Closed-form learnable scalar count; see README for the formula.
std::size_t parameter_count(const EncoderConfig& cfg);

template <typename T>
struct TransformerBlockParams {
    LayerNormParams<T> ln1, ln2;
    MHSAParams<T> attn;
    FFNParams<T> ffn;
};

template <typename T>
struct EncoderLayer {
    LayerKind kind;
    TransformerBlockParams<T> tf;
    MambaBlockParams<T> ssm;
};

template <typename T>
struct EncoderParams {
    EmbeddingParams<T> embed;
    std::vector<EncoderLayer<T>> layers;
    LayerNormParams<T> final_ln;
};

template <typename T>
struct MLMHeadParams {
    LinearParams<T> transform;
    LayerNormParams<T> ln;
    LinearParams<T> decoder;  // W may alias the token table (transposed) when tied
    bool tied = false;
};

template <typename T>
struct MAPParams {
    Var<T> W_s;  // [D, 1]
};

template <typename T>
struct HeadParams {
    Var<T> W_c;  // [C, D]
    Var<T> b_c;  // [C]
};

// All learnable state for one configuration, registered in a ParamStore under
// dotted names such as "layers.3.ssm.W_out".
template <typename T>
struct Model {
    EncoderConfig config;
    ParamStore<T> params;
    EncoderParams<T> encoder;
    MLMHeadParams<T> mlm;
    MAPParams<T> map;
    HeadParams<T> head;

    Model(const EncoderConfig& cfg, std::uint64_t seed);
};

template <typename T>
Var<T> transformer_block_forward(const Var<T>& H, const Tensor<T>& mask, const TransformerBlockParams<T>& p,
                                 const EncoderConfig& cfg, const ForwardContext& ctx = {},
                                 const std::string& site = "tf");

// Embeddings, blocks in pattern order, optional final LN. `cfg` may differ from the
// model's own config in forward-only switches (psm_mode, scan options, dropout).
template <typename T>
Var<T> encoder_forward(const BatchEncoding& batch, const Model<T>& model, const EncoderConfig& cfg,
                       const ForwardContext& ctx = {});

template <typename T>
Var<T> encoder_forward(const BatchEncoding& batch, const Model<T>& model, const ForwardContext& ctx = {}) {
    return encoder_forward(batch, model, model.config, ctx);
}

template <typename T>
T config_kappa(const EncoderConfig& cfg) {
    return cfg.kappa > 0 ? T(cfg.kappa) : default_kappa<T>();
}

}  // namespace mabert
