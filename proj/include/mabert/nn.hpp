#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "mabert/ops.hpp"
#include "mabert/rng.hpp"

namespace mabert {

// Training-mode switch and the key for dropout draws.
struct ForwardContext {
    bool train = false;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;

    CounterRng rng(std::string_view site) const { return {seed, step, hash_name(site)}; }
};

template <typename T>
struct LinearParams {
    Var<T> W;  // [in, out]
    Var<T> b;  // [out], may be undefined
};

template <typename T>
struct LayerNormParams {
    Var<T> gamma;
    Var<T> beta;
};

template <typename T>
struct MHSAParams {
    LinearParams<T> q, k, v, o;
    std::size_t n_heads = 1;
};

template <typename T>
struct FFNParams {
    LinearParams<T> up;
    LinearParams<T> down;
};

template <typename T>
struct DWConvParams {
    Var<T> kernel;  // [D_m, k]
    Var<T> bias;    // [D_m]
};

template <typename T>
struct EmbeddingParams {
    Var<T> token;     // [V, D]
    Var<T> position;  // [T_max, D]
    LayerNormParams<T> ln;
};

struct EmbeddingOptions {
    bool positions = true;
    double ln_eps = 1e-12;
    double dropout = 0.0;
};

template <typename T>
Var<T> linear(const Var<T>& x, const LinearParams<T>& p);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const LayerNormParams<T>& p, T eps) {
    return layer_norm(x, p.gamma, p.beta, eps);
}

// Inverted dropout; identity outside training or when rate is 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, const ForwardContext& ctx, std::string_view site);

// Multiplies [B, T, ...] activations by a [B, T] 0/1 mask.
template <typename T>
Var<T> apply_mask(const Var<T>& x, const Tensor<T>& mask);

template <typename T>
Var<T> mhsa_forward(const Var<T>& H, const Tensor<T>& mask, const MHSAParams<T>& p, T kappa = default_kappa<T>());

template <typename T>
Var<T> ffn_forward(const Var<T>& H, const FFNParams<T>& p);

enum class ConvPadding { Causal, Same };

ConvPadding parse_conv_padding(const std::string& s);
std::string conv_padding_name(ConvPadding p);

// Depthwise convolution along T with zero padding:
// out[b,t,d] = bias[d] + sum_j kernel[d,j] * U[b, t-s+j, d], where s = k-1 (causal)
// or s = (k-1)/2 (same, extra tap on the right).
template <typename T>
Var<T> dwconv_forward(const Var<T>& U, const DWConvParams<T>& p, ConvPadding padding = ConvPadding::Causal);

// ids is row-major [B, T].
template <typename T>
Var<T> embed_forward(std::span<const std::int32_t> ids, std::size_t B, std::size_t T_len,
                     const EmbeddingParams<T>& p, const EmbeddingOptions& opt, const ForwardContext& ctx);

// Resamples a learned [T_old, D] table to [T_new, D] by 1-D linear interpolation.
template <typename T>
Tensor<T> interpolate_positions(const Tensor<T>& table, std::size_t T_new);

}  // namespace mabert
