#include "mabert/nn.hpp"

#include <cmath>
#include <string>

namespace mabert {

template <typename T>
Var<T> linear(const Var<T>& x, const LinearParams<T>& p) {
    Var<T> y = matmul(x, p.W);
    return p.b.defined() ? add(y, p.b) : y;
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, const ForwardContext& ctx, std::string_view site) {
    if (!ctx.train || rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1, got " + std::to_string(rate));
    const CounterRng rng = ctx.rng(site);
    const T keep = T(1.0 / (1.0 - rate));
    Tensor<T> m(x.shape());
    for (std::size_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform(i) < rate ? T(0) : keep;
    return mul(x, constant(std::move(m)));
}

template <typename T>
Var<T> apply_mask(const Var<T>& x, const Tensor<T>& mask) {
    if (mask.ndim() != 2 || x.shape().size() < 2 || x.shape()[0] != mask.extent(0) || x.shape()[1] != mask.extent(1)) {
        throw DimensionError("mask " + shape_str(mask.shape()) + " does not cover activations " + shape_str(x.shape()));
    }
    Shape s = mask.shape();
    for (std::size_t i = 2; i < x.shape().size(); ++i) s.push_back(1);
    return mul(x, constant(mask.reshaped(s)));
}

template <typename T>
Var<T> mhsa_forward(const Var<T>& H, const Tensor<T>& mask, const MHSAParams<T>& p, T kappa) {
    const Shape& s = H.shape();
    if (s.size() != 3) throw DimensionError("mhsa_forward expects [B,T,D], got " + shape_str(s));
    const std::size_t B = s[0], T_len = s[1], D = s[2], h = p.n_heads;
    if (h == 0 || D % h != 0) {
        throw DimensionError("hidden size " + std::to_string(D) + " not divisible by " + std::to_string(h) + " heads");
    }
    if (mask.shape() != Shape{B, T_len}) {
        throw DimensionError("attention mask " + shape_str(mask.shape()) + " for input " + shape_str(s));
    }
    const std::size_t dh = D / h;
    auto heads = [&](const Var<T>& x) { return permute(reshape(x, {B, T_len, h, dh}), {0, 2, 1, 3}); };
    Var<T> q = scale(heads(linear(H, p.q)), T(1) / std::sqrt(T(dh)));
    Var<T> k = heads(linear(H, p.k));
    Var<T> v = heads(linear(H, p.v));
    Var<T> scores = matmul(q, transpose(k));
    const Tensor<T> key_mask = mask.reshaped({B, 1, 1, T_len});
    Var<T> att = masked_softmax(scores, &key_mask, kappa);
    Var<T> ctx = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {B, T_len, D});
    return linear(ctx, p.o);
}

template <typename T>
Var<T> ffn_forward(const Var<T>& H, const FFNParams<T>& p) {
    return linear(gelu(linear(H, p.up)), p.down);
}

ConvPadding parse_conv_padding(const std::string& s) {
    if (s == "causal") return ConvPadding::Causal;
    if (s == "same") return ConvPadding::Same;
    throw ConfigError("unknown conv_padding '" + s + "' (expected causal or same)");
}

std::string conv_padding_name(ConvPadding p) { return p == ConvPadding::Causal ? "causal" : "same"; }

template <typename T>
Var<T> dwconv_forward(const Var<T>& U, const DWConvParams<T>& p, ConvPadding padding) {
    const Shape& s = U.shape();
    if (s.size() != 3) throw DimensionError("dwconv_forward expects [B,T,D_m], got " + shape_str(s));
    const std::size_t B = s[0], T_len = s[1], C = s[2];
    const Shape& ks = p.kernel.shape();
    if (ks.size() != 2 || ks[0] != C || p.bias.shape() != Shape{C}) {
        throw DimensionError("dwconv kernel " + shape_str(ks) + " / bias " + shape_str(p.bias.shape()) +
                             " for channels " + std::to_string(C));
    }
    const std::size_t k = ks[1];
    const std::size_t shift = padding == ConvPadding::Causal ? k - 1 : (k - 1) / 2;
    const T* u = U.value().data();
    const T* w = p.kernel.value().data();
    const T* bias = p.bias.value().data();
    Tensor<T> out(s);
    T* y = out.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T_len; ++t) {
            T* yt = y + (b * T_len + t) * C;
            for (std::size_t c = 0; c < C; ++c) yt[c] = bias[c];
            for (std::size_t j = 0; j < k; ++j) {
                if (t + j < shift || t + j - shift >= T_len) continue;
                const T* ut = u + (b * T_len + t + j - shift) * C;
                for (std::size_t c = 0; c < C; ++c) yt[c] += w[c * k + j] * ut[c];
            }
        }
    }
    return Var<T>::from_op(std::move(out), {U, p.kernel, p.bias}, [B, T_len, C, k, shift](Node<T>& self) {
        Node<T>& nu = *self.inputs[0];
        Node<T>& nk = *self.inputs[1];
        Node<T>& nb = *self.inputs[2];
        const T* g = self.grad->data();
        const T* u = nu.value.data();
        const T* w = nk.value.data();
        Tensor<T> gu(nu.value.shape()), gk(nk.value.shape()), gb(nb.value.shape());
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < T_len; ++t) {
                const T* gt = g + (b * T_len + t) * C;
                for (std::size_t c = 0; c < C; ++c) gb[c] += gt[c];
                for (std::size_t j = 0; j < k; ++j) {
                    if (t + j < shift || t + j - shift >= T_len) continue;
                    const std::size_t src = (b * T_len + t + j - shift) * C;
                    for (std::size_t c = 0; c < C; ++c) {
                        gu[src + c] += w[c * k + j] * gt[c];
                        gk[c * k + j] += gt[c] * u[src + c];
                    }
                }
            }
        }
        if (nu.requires_grad) nu.accumulate(std::move(gu));
        if (nk.requires_grad) nk.accumulate(std::move(gk));
        if (nb.requires_grad) nb.accumulate(std::move(gb));
    });
}

template <typename T>
Var<T> embed_forward(std::span<const std::int32_t> ids, std::size_t B, std::size_t T_len,
                     const EmbeddingParams<T>& p, const EmbeddingOptions& opt, const ForwardContext& ctx) {
    Var<T> x = embedding(p.token, ids, {B, T_len});
    if (opt.positions) {
        const std::size_t T_max = p.position.shape()[0];
        if (T_len > T_max) {
            throw LengthError("sequence length " + std::to_string(T_len) + " exceeds position table " +
                              std::to_string(T_max));
        }
        std::vector<std::int32_t> pos(T_len);
        for (std::size_t t = 0; t < T_len; ++t) pos[t] = static_cast<std::int32_t>(t);
        x = add(x, embedding(p.position, std::span<const std::int32_t>(pos), {T_len}));
    }
    x = layer_norm(x, p.ln, T(opt.ln_eps));
    return dropout(x, opt.dropout, ctx, "embed");
}

template <typename T>
Tensor<T> interpolate_positions(const Tensor<T>& table, std::size_t T_new) {
    if (table.ndim() != 2) throw DimensionError("position table must be [T, D], got " + shape_str(table.shape()));
    const std::size_t T_old = table.extent(0), D = table.extent(1);
    Tensor<T> out(Shape{T_new, D});
    for (std::size_t i = 0; i < T_new; ++i) {
        const double x = T_new == 1 ? 0.0 : double(i) * double(T_old - 1) / double(T_new - 1);
        const std::size_t lo = std::min(static_cast<std::size_t>(x), T_old - 1);
        const std::size_t hi = std::min(lo + 1, T_old - 1);
        const T frac = T(x - double(lo));
        for (std::size_t d = 0; d < D; ++d) {
            out[i * D + d] = (T(1) - frac) * table[lo * D + d] + frac * table[hi * D + d];
        }
    }
    return out;
}

#define MABERT_INSTANTIATE_NN(T)                                                                              \
    template Var<T> linear(const Var<T>&, const LinearParams<T>&);                                            \
    template Var<T> dropout(const Var<T>&, double, const ForwardContext&, std::string_view);                  \
    template Var<T> apply_mask(const Var<T>&, const Tensor<T>&);                                              \
    template Var<T> mhsa_forward(const Var<T>&, const Tensor<T>&, const MHSAParams<T>&, T);                   \
    template Var<T> ffn_forward(const Var<T>&, const FFNParams<T>&);                                          \
    template Var<T> dwconv_forward(const Var<T>&, const DWConvParams<T>&, ConvPadding);                       \
    template Var<T> embed_forward(std::span<const std::int32_t>, std::size_t, std::size_t,                   \
                                  const EmbeddingParams<T>&, const EmbeddingOptions&, const ForwardContext&); \
    template Tensor<T> interpolate_positions(const Tensor<T>&, std::size_t);

MABERT_INSTANTIATE_NN(float)
MABERT_INSTANTIATE_NN(double)
MABERT_INSTANTIATE_NN(long double)

}  // namespace mabert
