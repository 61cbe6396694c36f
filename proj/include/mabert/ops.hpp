#pragma once

#include <cstdint>
#include <span>

#include "mabert/autograd.hpp"

namespace mabert {

// Default additive mask constant per precision: large enough that exp(s - kappa)
// underflows to exactly zero next to any valid logit.
template <typename T>
constexpr T default_kappa() {
    if constexpr (sizeof(T) == 4) {
        return T(1e9);
    } else {
        return T(1e30);
    }
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return Var<T>(std::move(value), false);
}

// Elementwise binary ops with trailing-dimension broadcasting.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);

template <typename T>
Var<T> exp(const Var<T>& a);
template <typename T>
Var<T> sigmoid(const Var<T>& a);
// x * sigmoid(x)
template <typename T>
Var<T> silu(const Var<T>& a);
// ln(1 + e^x) evaluated as max(x, 0) + log1p(e^{-|x|}).
template <typename T>
Var<T> softplus(const Var<T>& a);
// tanh approximation.
template <typename T>
Var<T> gelu(const Var<T>& a);

// [..., M, K] x [..., K, N] with broadcast batch dims.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& perm);
// Swaps the last two axes.
template <typename T>
Var<T> transpose(const Var<T>& a);
// a[..., start:start+length]
template <typename T>
Var<T> slice_last(const Var<T>& a, std::size_t start, std::size_t length);

// Softmax over the last axis of `scores + (1 - mask) * (-kappa)`. `mask` broadcasts
// against `scores` and holds 0/1 values; every row needs at least one 1. With a null
// mask this is a plain softmax.
template <typename T>
Var<T> masked_softmax(const Var<T>& scores, const Tensor<T>* mask, T kappa = default_kappa<T>());
template <typename T>
Var<T> softmax(const Var<T>& scores) {
    return masked_softmax<T>(scores, nullptr, T(0));
}

// Per-position normalization over the last axis with biased variance.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

// Rows of `table` ([V, D]) selected by `ids`; the result has shape prefix + [D].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids, Shape prefix);

// `x` viewed as [rows, last]; returns the selected rows as [rows.size(), last].
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows);

template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);

inline constexpr std::int32_t kIgnoreLabel = -1;

// Mean cross-entropy over rows of [N, V] logits whose label is not kIgnoreLabel.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels);

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
    return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
    return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
    return mul(a, b);
}

namespace kernels {

// C[M,N] += A[M,K] B[K,N]. The reduction over K runs in ascending order for
// every output element, independent of M and N.
template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C);

template <typename T>
T sigmoid(T x);
template <typename T>
T softplus(T x);
template <typename T>
T silu(T x);
template <typename T>
T gelu(T x);

}  // namespace kernels

}  // namespace mabert
