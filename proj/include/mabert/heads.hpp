#pragma once

#include <string>

#include "mabert/encoder.hpp"

namespace mabert {

enum class PoolingMode { MAP, ATTN, CLS, MaskedMean };

PoolingMode parse_pooling(const std::string& s);
std::string pooling_name(PoolingMode m);

// Attention weights over tokens, [B, T]. With a mask, pads get -kappa before the softmax.
template <typename T>
Var<T> map_weights(const Var<T>& H, const Tensor<T>* mask, const MAPParams<T>& p, T kappa = default_kappa<T>());

template <typename T>
Var<T> map_pool(const Var<T>& H, const Tensor<T>& mask, const MAPParams<T>& p, T kappa = default_kappa<T>());

// [B, T, D] -> [B, D].
template <typename T>
Var<T> pool(const Var<T>& H, const Tensor<T>& mask, PoolingMode mode, const MAPParams<T>& p,
            T kappa = default_kappa<T>());

// logits = Dropout(h) W_c^T + b_c.
template <typename T>
Var<T> classify(const Var<T>& h_pool, const HeadParams<T>& p, double dropout_rate, const ForwardContext& ctx = {});

// Position-wise decoder(LN(GELU(transform(H)))); output has H's leading shape with last extent V.
template <typename T>
Var<T> mlm_logits(const Var<T>& H, const Model<T>& model);

// Logits for the listed flat positions of H ([B*T] indexing), shape [rows, V].
template <typename T>
Var<T> mlm_logits_at(const Var<T>& H, std::span<const std::size_t> rows, const Model<T>& model);

}  // namespace mabert
