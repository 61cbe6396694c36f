#include "mabert/heads.hpp"

namespace mabert {

PoolingMode parse_pooling(const std::string& s) {
    if (s == "map") return PoolingMode::MAP;
    if (s == "attn") return PoolingMode::ATTN;
    if (s == "cls") return PoolingMode::CLS;
    if (s == "maskedmean") return PoolingMode::MaskedMean;
    throw ConfigError("unknown pooling '" + s + "' (expected map, attn, cls or maskedmean)");
}

std::string pooling_name(PoolingMode m) {
    switch (m) {
        case PoolingMode::MAP: return "map";
        case PoolingMode::ATTN: return "attn";
        case PoolingMode::CLS: return "cls";
        case PoolingMode::MaskedMean: return "maskedmean";
    }
    return "map";
}

namespace {

template <typename T>
void check_hidden(const Var<T>& H, const Tensor<T>& mask) {
    const Shape& s = H.shape();
    if (s.size() != 3 || mask.shape() != Shape{s[0], s[1]}) {
        throw DimensionError("pooling input " + shape_str(s) + " with mask " + shape_str(mask.shape()));
    }
}

// sum_t w[b,t] H[b,t,:]
template <typename T>
Var<T> weighted_sum(const Var<T>& w, const Var<T>& H) {
    const std::size_t B = H.shape()[0], T_len = H.shape()[1], D = H.shape()[2];
    return reshape(matmul(reshape(w, {B, 1, T_len}), H), {B, D});
}

}  // namespace

template <typename T>
Var<T> map_weights(const Var<T>& H, const Tensor<T>* mask, const MAPParams<T>& p, T kappa) {
    const std::size_t B = H.shape()[0], T_len = H.shape()[1];
    if (!p.W_s.defined()) throw ConfigError("model has no pooling parameters (num_classes = 0)");
    Var<T> scores = reshape(matmul(H, p.W_s), {B, T_len});
    return mask ? masked_softmax(scores, mask, kappa) : softmax(scores);
}

template <typename T>
Var<T> map_pool(const Var<T>& H, const Tensor<T>& mask, const MAPParams<T>& p, T kappa) {
    check_hidden(H, mask);
    return weighted_sum(map_weights(H, &mask, p, kappa), H);
}

template <typename T>
Var<T> pool(const Var<T>& H, const Tensor<T>& mask, PoolingMode mode, const MAPParams<T>& p, T kappa) {
    check_hidden(H, mask);
    const std::size_t B = H.shape()[0], T_len = H.shape()[1], D = H.shape()[2];
    switch (mode) {
        case PoolingMode::MAP:
            return map_pool(H, mask, p, kappa);
        case PoolingMode::ATTN:
            return weighted_sum(map_weights<T>(H, nullptr, p, kappa), H);
        case PoolingMode::CLS: {
            std::vector<std::size_t> rows(B);
            for (std::size_t b = 0; b < B; ++b) rows[b] = b * T_len;
            return gather_rows(reshape(H, {B * T_len, D}), std::span<const std::size_t>(rows));
        }
        case PoolingMode::MaskedMean: {
            Tensor<T> w(Shape{B, T_len});
            for (std::size_t b = 0; b < B; ++b) {
                T n = 0;
                for (std::size_t t = 0; t < T_len; ++t) n += mask[b * T_len + t];
                if (n == T(0)) throw InvalidMaskError("masked mean over row " + std::to_string(b) + " with no valid token");
                for (std::size_t t = 0; t < T_len; ++t) w[b * T_len + t] = mask[b * T_len + t] / n;
            }
            return weighted_sum(constant(std::move(w)), H);
        }
    }
    throw ConfigError("unhandled pooling mode");
}

template <typename T>
Var<T> classify(const Var<T>& h_pool, const HeadParams<T>& p, double dropout_rate, const ForwardContext& ctx) {
    if (!p.W_c.defined()) throw ConfigError("model has no classification head (num_classes = 0)");
    return add(matmul(dropout(h_pool, dropout_rate, ctx, "pooled"), transpose(p.W_c)), p.b_c);
}

namespace {

template <typename T>
Var<T> decode(const Var<T>& x, const Model<T>& model) {
    const auto& h = model.mlm;
    const T eps = T(model.config.ln_eps);
    Var<T> y = layer_norm(gelu(linear(x, h.transform)), h.ln, eps);
    Var<T> W = h.tied ? transpose(model.encoder.embed.token) : h.decoder.W;
    return add(matmul(y, W), h.decoder.b);
}

}  // namespace

template <typename T>
Var<T> mlm_logits(const Var<T>& H, const Model<T>& model) {
    return decode(H, model);
}

template <typename T>
Var<T> mlm_logits_at(const Var<T>& H, std::span<const std::size_t> rows, const Model<T>& model) {
    const std::size_t D = H.shape().back();
    return decode(gather_rows(reshape(H, {H.numel() / D, D}), rows), model);
}

#define MABERT_INSTANTIATE_HEADS(T)                                                                    \
    template Var<T> map_weights(const Var<T>&, const Tensor<T>*, const MAPParams<T>&, T);              \
    template Var<T> map_pool(const Var<T>&, const Tensor<T>&, const MAPParams<T>&, T);                 \
    template Var<T> pool(const Var<T>&, const Tensor<T>&, PoolingMode, const MAPParams<T>&, T);        \
    template Var<T> classify(const Var<T>&, const HeadParams<T>&, double, const ForwardContext&);      \
    template Var<T> mlm_logits(const Var<T>&, const Model<T>&);                                          \
    template Var<T> mlm_logits_at(const Var<T>&, std::span<const std::size_t>, const Model<T>&);

MABERT_INSTANTIATE_HEADS(float)
MABERT_INSTANTIATE_HEADS(double)
MABERT_INSTANTIATE_HEADS(long double)

}  // namespace mabert
