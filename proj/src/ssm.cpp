#include "mabert/ssm.hpp"

#include <atomic>
#include <cmath>
#include <memory>
#include <vector>

namespace mabert {

std::string scan_direction_name(ScanDirection d) {
    switch (d) {
        case ScanDirection::Forward: return "forward";
        case ScanDirection::Reverse: return "reverse";
        case ScanDirection::Bidirectional: return "bidirectional";
    }
    return "forward";
}

ScanDirection parse_scan_direction(const std::string& s) {
    if (s == "forward") return ScanDirection::Forward;
    if (s == "reverse") return ScanDirection::Reverse;
    if (s == "bidirectional") return ScanDirection::Bidirectional;
    throw ConfigError("unknown scan direction '" + s + "' (expected forward, reverse or bidirectional)");
}

std::string psm_mode_name(PsmMode m) {
    if (m.pre && m.post) return "pre+post";
    if (m.pre) return "pre";
    if (m.post) return "post";
    return "none";
}

PsmMode parse_psm_mode(const std::string& s) {
    if (s == "none") return {false, false};
    if (s == "pre") return {true, false};
    if (s == "post") return {false, true};
    if (s == "pre+post") return {true, true};
    throw ConfigError("unknown psm_mode '" + s + "' (expected none, pre, post or pre+post)");
}

namespace {

std::atomic<std::uint64_t> g_scan_flops{0};

struct ScanDims {
    std::size_t B, T, C, N;
};

template <typename T>
ScanDims check_scan_shapes(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& b, const Tensor<T>& c,
                           const Tensor<T>& A_log, const Tensor<T>& D_skip, const Tensor<T>* mask) {
    if (u.ndim() != 3) throw DimensionError("scan input must be [B,T,D_m], got " + shape_str(u.shape()));
    const ScanDims d{u.extent(0), u.extent(1), u.extent(2), A_log.ndim() == 2 ? A_log.extent(1) : 0};
    if (delta.shape() != u.shape() || b.shape() != Shape{d.B, d.T, d.N} || c.shape() != Shape{d.B, d.T, d.N} ||
        A_log.shape() != Shape{d.C, d.N} || D_skip.shape() != Shape{d.C}) {
        throw DimensionError("selective_scan shapes: u " + shape_str(u.shape()) + ", delta " +
                             shape_str(delta.shape()) + ", b " + shape_str(b.shape()) + ", c " +
                             shape_str(c.shape()) + ", A_log " + shape_str(A_log.shape()) + ", D_skip " +
                             shape_str(D_skip.shape()));
    }
    if (mask && mask->shape() != Shape{d.B, d.T}) {
        throw DimensionError("scan step mask " + shape_str(mask->shape()) + " for input " + shape_str(u.shape()));
    }
    for (std::size_t bi = 0; bi < d.B; ++bi) {
        for (std::size_t t = 0; t < d.T; ++t) {
            if (mask && (*mask)[bi * d.T + t] < T(0.5)) continue;
            const T* row = delta.data() + (bi * d.T + t) * d.C;
            for (std::size_t ch = 0; ch < d.C; ++ch) {
                if (!(row[ch] > T(0))) {
                    throw ContractError("selective_scan needs delta > 0; got " + std::to_string(row[ch]) +
                                        " at batch " + std::to_string(bi) + ", step " + std::to_string(t) +
                                        ", channel " + std::to_string(ch));
                }
            }
        }
    }
    return d;
}

template <typename T>
std::vector<T> negative_exp(const Tensor<T>& A_log) {
    std::vector<T> A(A_log.numel());
    for (std::size_t i = 0; i < A.size(); ++i) A[i] = -std::exp(A_log[i]);
    return A;
}

// Time index of the i-th processed step.
inline std::size_t step_at(std::size_t i, std::size_t T_len, bool reverse) { return reverse ? T_len - 1 - i : i; }

// One direction; adds the state readout to y and, when `states` is given, stores h after every step.
template <typename T>
void scan_direction(const ScanDims& d, const T* u, const T* delta, const T* b, const T* c, const T* A,
                    const T* mask, bool reverse, T* y, T* states) {
    std::vector<T> h(d.C * d.N);
    for (std::size_t bi = 0; bi < d.B; ++bi) {
        std::fill(h.begin(), h.end(), T(0));
        for (std::size_t i = 0; i < d.T; ++i) {
            const std::size_t t = step_at(i, d.T, reverse);
            const std::size_t row = bi * d.T + t;
            const T* ct = c + row * d.N;
            T* yt = y + row * d.C;
            const bool active = !mask || mask[row] > T(0.5);
            if (active) {
                const T* bt = b + row * d.N;
                const T* ut = u + row * d.C;
                const T* dt = delta + row * d.C;
                for (std::size_t ch = 0; ch < d.C; ++ch) {
                    T* hc = h.data() + ch * d.N;
                    const T* Ac = A + ch * d.N;
                    const T step = dt[ch];
                    const T inj = step * ut[ch];
                    T acc = 0;
                    for (std::size_t n = 0; n < d.N; ++n) {
                        hc[n] = std::exp(step * Ac[n]) * hc[n] + inj * bt[n];
                        acc += ct[n] * hc[n];
                    }
                    yt[ch] += acc;
                }
            } else {
                for (std::size_t ch = 0; ch < d.C; ++ch) {
                    const T* hc = h.data() + ch * d.N;
                    T acc = 0;
                    for (std::size_t n = 0; n < d.N; ++n) acc += ct[n] * hc[n];
                    yt[ch] += acc;
                }
            }
            if (states) std::copy(h.begin(), h.end(), states + row * d.C * d.N);
        }
    }
}

template <typename T>
void scan_direction_backward(const ScanDims& d, const T* u, const T* delta, const T* b, const T* c, const T* A,
                             const T* mask, bool reverse, const T* states, const T* gy, T* gu, T* gdelta, T* gb,
                             T* gc, T* gA) {
    std::vector<T> gh(d.C * d.N);
    for (std::size_t bi = 0; bi < d.B; ++bi) {
        std::fill(gh.begin(), gh.end(), T(0));
        for (std::size_t i = d.T; i-- > 0;) {
            const std::size_t t = step_at(i, d.T, reverse);
            const std::size_t row = bi * d.T + t;
            const T* ht = states + row * d.C * d.N;
            const T* hprev = nullptr;
            if (i > 0) hprev = states + (bi * d.T + step_at(i - 1, d.T, reverse)) * d.C * d.N;
            const T* ct = c + row * d.N;
            const T* gyt = gy + row * d.C;
            T* gct = gc + row * d.N;
            for (std::size_t ch = 0; ch < d.C; ++ch) {
                T* ghc = gh.data() + ch * d.N;
                const T* hc = ht + ch * d.N;
                const T g = gyt[ch];
                for (std::size_t n = 0; n < d.N; ++n) {
                    ghc[n] += g * ct[n];
                    gct[n] += g * hc[n];
                }
            }
            const bool active = !mask || mask[row] > T(0.5);
            if (!active) continue;
            const T* bt = b + row * d.N;
            const T* ut = u + row * d.C;
            const T* dt = delta + row * d.C;
            T* gbt = gb + row * d.N;
            for (std::size_t ch = 0; ch < d.C; ++ch) {
                T* ghc = gh.data() + ch * d.N;
                const T* Ac = A + ch * d.N;
                T* gAc = gA + ch * d.N;
                const T step = dt[ch];
                const T uc = ut[ch];
                T g_step = 0, g_u = 0;
                for (std::size_t n = 0; n < d.N; ++n) {
                    const T a = std::exp(step * Ac[n]);
                    const T hp = hprev ? hprev[ch * d.N + n] : T(0);
                    const T g = ghc[n];
                    g_step += g * (Ac[n] * a * hp + bt[n] * uc);
                    g_u += g * step * bt[n];
                    gbt[n] += g * step * uc;
                    gAc[n] += g * step * a * hp;
                    ghc[n] = g * a;
                }
                gdelta[row * d.C + ch] += g_step;
                gu[row * d.C + ch] += g_u;
            }
        }
    }
}

template <typename T>
void add_skip(const ScanDims& d, const T* u, const T* D_skip, T* y) {
    for (std::size_t row = 0; row < d.B * d.T; ++row) {
        for (std::size_t ch = 0; ch < d.C; ++ch) y[row * d.C + ch] += D_skip[ch] * u[row * d.C + ch];
    }
}

}  // namespace

std::uint64_t ScanCounter::flops() { return g_scan_flops.load(); }
void ScanCounter::reset() { g_scan_flops.store(0); }
void ScanCounter::add(std::uint64_t n) { g_scan_flops.fetch_add(n); }

template <typename T>
std::pair<Var<T>, Var<T>> split_in_gate(const Var<T>& h_hat, const Var<T>& W_in) {
    const Shape& ws = W_in.shape();
    if (ws.size() != 2 || ws[1] % 2 != 0 || h_hat.shape().empty() || h_hat.shape().back() != ws[0]) {
        throw DimensionError("split_in_gate: input " + shape_str(h_hat.shape()) + " with W_in " + shape_str(ws));
    }
    const std::size_t Dm = ws[1] / 2;
    Var<T> proj = matmul(h_hat, W_in);
    return {slice_last(proj, 0, Dm), slice_last(proj, Dm, Dm)};
}

template <typename T>
ScanCoefficients<T> token_coefficients(const Var<T>& u, const Var<T>& W_x, const Var<T>& W_dt, const Var<T>& b_dt,
                                       std::size_t rank, std::size_t state) {
    const std::size_t Dm = u.shape().back();
    if (W_x.shape() != Shape{Dm, rank + 2 * state} || W_dt.shape() != Shape{rank, Dm} || b_dt.shape() != Shape{Dm}) {
        throw DimensionError("token_coefficients: W_x " + shape_str(W_x.shape()) + ", W_dt " +
                             shape_str(W_dt.shape()) + ", b_dt " + shape_str(b_dt.shape()) + " for D_m=" +
                             std::to_string(Dm) + ", r=" + std::to_string(rank) + ", N=" + std::to_string(state));
    }
    Var<T> proj = matmul(u, W_x);
    Var<T> low = slice_last(proj, 0, rank);
    ScanCoefficients<T> out;
    out.b = slice_last(proj, rank, state);
    out.c = slice_last(proj, rank + state, state);
    out.delta = softplus(add(matmul(low, W_dt), b_dt));
    return out;
}

template <typename T>
Var<T> selective_scan(const Var<T>& u, const ScanCoefficients<T>& coeffs, const Var<T>& A_log, const Var<T>& D_skip,
                      const Tensor<T>* step_mask, ScanDirection direction) {
    const ScanDims d = check_scan_shapes(u.value(), coeffs.delta.value(), coeffs.b.value(), coeffs.c.value(),
                                         A_log.value(), D_skip.value(), step_mask);
    const std::vector<T> A = negative_exp(A_log.value());
    const bool fwd = direction != ScanDirection::Reverse;
    const bool rev = direction != ScanDirection::Forward;
    const bool record = NoGradGuard::grad_enabled() &&
                        (u.requires_grad() || coeffs.delta.requires_grad() || coeffs.b.requires_grad() ||
                         coeffs.c.requires_grad() || A_log.requires_grad() || D_skip.requires_grad());
    auto mask = step_mask ? std::make_shared<Tensor<T>>(*step_mask) : nullptr;
    const T* m = mask ? mask->data() : nullptr;
    const std::size_t state_size = d.B * d.T * d.C * d.N;
    auto fwd_states = std::make_shared<std::vector<T>>(record && fwd ? state_size : 0);
    auto rev_states = std::make_shared<std::vector<T>>(record && rev ? state_size : 0);

    Tensor<T> out(u.shape());
    const T* uv = u.value().data();
    const T* dv = coeffs.delta.value().data();
    const T* bv = coeffs.b.value().data();
    const T* cv = coeffs.c.value().data();
    if (fwd) scan_direction(d, uv, dv, bv, cv, A.data(), m, false, out.data(), record ? fwd_states->data() : nullptr);
    if (rev) scan_direction(d, uv, dv, bv, cv, A.data(), m, true, out.data(), record ? rev_states->data() : nullptr);
    add_skip(d, uv, D_skip.value().data(), out.data());
    ScanCounter::add(std::uint64_t(4) * d.B * d.T * d.C * d.N * (std::uint64_t(fwd) + std::uint64_t(rev)));

    return Var<T>::from_op(
        std::move(out), {u, coeffs.delta, coeffs.b, coeffs.c, A_log, D_skip},
        [d, fwd, rev, mask, fwd_states, rev_states](Node<T>& self) {
            Node<T>& nu = *self.inputs[0];
            Node<T>& nd = *self.inputs[1];
            Node<T>& nb = *self.inputs[2];
            Node<T>& nc = *self.inputs[3];
            Node<T>& nA = *self.inputs[4];
            Node<T>& nD = *self.inputs[5];
            const T* gy = self.grad->data();
            const std::vector<T> A = negative_exp(nA.value);
            const T* m = mask ? mask->data() : nullptr;
            Tensor<T> gu(nu.value.shape()), gd(nd.value.shape()), gb(nb.value.shape()), gc(nc.value.shape());
            Tensor<T> gA(nA.value.shape()), gD(nD.value.shape());
            const T* uv = nu.value.data();
            if (fwd) {
                scan_direction_backward(d, uv, nd.value.data(), nb.value.data(), nc.value.data(), A.data(), m, false,
                                        fwd_states->data(), gy, gu.data(), gd.data(), gb.data(), gc.data(),
                                        gA.data());
            }
            if (rev) {
                scan_direction_backward(d, uv, nd.value.data(), nb.value.data(), nc.value.data(), A.data(), m, true,
                                        rev_states->data(), gy, gu.data(), gd.data(), gb.data(), gc.data(),
                                        gA.data());
            }
            const T* Dv = nD.value.data();
            for (std::size_t row = 0; row < d.B * d.T; ++row) {
                for (std::size_t ch = 0; ch < d.C; ++ch) {
                    const std::size_t i = row * d.C + ch;
                    gu[i] += Dv[ch] * gy[i];
                    gD[ch] += gy[i] * uv[i];
                }
            }
            for (std::size_t i = 0; i < gA.numel(); ++i) gA[i] *= A[i];
            if (nu.requires_grad) nu.accumulate(std::move(gu));
            if (nd.requires_grad) nd.accumulate(std::move(gd));
            if (nb.requires_grad) nb.accumulate(std::move(gb));
            if (nc.requires_grad) nc.accumulate(std::move(gc));
            if (nA.requires_grad) nA.accumulate(std::move(gA));
            if (nD.requires_grad) nD.accumulate(std::move(gD));
        });
}

template <typename T>
Tensor<T> selective_scan_chunked(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& b, const Tensor<T>& c,
                                 const Tensor<T>& A_log, const Tensor<T>& D_skip, std::size_t chunk,
                                 const Tensor<T>* step_mask, ScanDirection direction) {
    if (chunk == 0) throw ContractError("scan chunk length must be positive");
    const ScanDims d = check_scan_shapes(u, delta, b, c, A_log, D_skip, step_mask);
    const std::vector<T> A = negative_exp(A_log);
    Tensor<T> out(u.shape());
    const std::size_t CN = d.C * d.N;
    std::vector<T> carry(CN), local(CN), decay(CN);
    auto run = [&](bool reverse) {
        for (std::size_t bi = 0; bi < d.B; ++bi) {
            std::fill(carry.begin(), carry.end(), T(0));
            for (std::size_t start = 0; start < d.T; start += chunk) {
                const std::size_t stop = std::min(d.T, start + chunk);
                std::fill(local.begin(), local.end(), T(0));
                std::fill(decay.begin(), decay.end(), T(1));
                for (std::size_t i = start; i < stop; ++i) {
                    const std::size_t row = bi * d.T + step_at(i, d.T, reverse);
                    const bool active = !step_mask || (*step_mask)[row] > T(0.5);
                    const T* ct = c.data() + row * d.N;
                    for (std::size_t ch = 0; ch < d.C; ++ch) {
                        const T step = delta[row * d.C + ch];
                        const T inj = step * u[row * d.C + ch];
                        T acc = 0;
                        for (std::size_t n = 0; n < d.N; ++n) {
                            const std::size_t k = ch * d.N + n;
                            if (active) {
                                const T a = std::exp(step * A[k]);
                                local[k] = a * local[k] + inj * b[row * d.N + n];
                                decay[k] *= a;
                            }
                            acc += ct[n] * (local[k] + decay[k] * carry[k]);
                        }
                        out[row * d.C + ch] += acc;
                    }
                }
                for (std::size_t k = 0; k < CN; ++k) carry[k] = local[k] + decay[k] * carry[k];
            }
        }
    };
    if (direction != ScanDirection::Reverse) run(false);
    if (direction != ScanDirection::Forward) run(true);
    add_skip(d, u.data(), D_skip.data(), out.data());
    return out;
}

template <typename T>
Var<T> gated_readout(const Var<T>& o, const Var<T>& z, const Var<T>& W_out) {
    if (o.shape() != z.shape()) {
        throw DimensionError("gated_readout: state output " + shape_str(o.shape()) + " vs gate " + shape_str(z.shape()));
    }
    return matmul(mul(silu(z), o), W_out);
}

template <typename T>
void validate_end_padding(const Tensor<T>& mask) {
    if (mask.ndim() != 2) throw DimensionError("padding mask must be [B,T], got " + shape_str(mask.shape()));
    const std::size_t B = mask.extent(0), T_len = mask.extent(1);
    for (std::size_t b = 0; b < B; ++b) {
        bool in_pad = false;
        for (std::size_t t = 0; t < T_len; ++t) {
            const T v = mask[b * T_len + t];
            if (v != T(0) && v != T(1)) {
                throw InvalidMaskError("mask value " + std::to_string(v) + " at row " + std::to_string(b) +
                                       ", position " + std::to_string(t) + " is not 0/1");
            }
            if (v == T(0)) {
                in_pad = true;
            } else if (in_pad) {
                throw InvalidMaskError("row " + std::to_string(b) + " has a valid token at position " +
                                       std::to_string(t) + " after padding; only end padding is supported");
            }
        }
        if (mask[b * T_len] == T(0)) throw InvalidMaskError("row " + std::to_string(b) + " has no valid token");
    }
}

template <typename T>
Var<T> mamba_block_forward(const Var<T>& H, const Tensor<T>& mask, const MambaBlockParams<T>& p,
                           const MambaOptions& opt, const ForwardContext& ctx, const std::string& site) {
    const Shape& s = H.shape();
    if (s.size() != 3 || mask.shape() != Shape{s[0], s[1]}) {
        throw DimensionError("mamba block input " + shape_str(s) + " with mask " + shape_str(mask.shape()));
    }
    validate_end_padding(mask);
    const T eps = T(opt.ln_eps);
    Var<T> h_hat = layer_norm(H, p.ln1, eps);
    if (opt.psm.pre) h_hat = apply_mask(h_hat, mask);
    auto [U, Z] = split_in_gate(h_hat, p.W_in);
    Var<T> u = dwconv_forward(U, p.conv, opt.conv_padding);
    if (opt.ssm_activation) u = silu(u);
    const ScanCoefficients<T> coeffs = token_coefficients(u, p.W_x, p.W_dt, p.b_dt, opt.rank, opt.state);
    Var<T> o = selective_scan(u, coeffs, p.A_log, p.D_skip, opt.psm.pre ? &mask : nullptr, opt.direction);
    Var<T> y = dropout(gated_readout(o, Z, p.W_out), opt.dropout, ctx, site + ".ssm_out");
    Var<T> h_ssm = add(H, y);
    Var<T> out = add(h_ssm, dropout(ffn_forward(layer_norm(h_ssm, p.ln2, eps), p.ffn), opt.dropout, ctx,
                                    site + ".ffn_out"));
    if (opt.psm.post) out = apply_mask(out, mask);
    return out;
}

#define MABERT_INSTANTIATE_SSM(T)                                                                               \
    template std::pair<Var<T>, Var<T>> split_in_gate(const Var<T>&, const Var<T>&);                             \
    template ScanCoefficients<T> token_coefficients(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                                                    std::size_t, std::size_t);                                  \
    template Var<T> selective_scan(const Var<T>&, const ScanCoefficients<T>&, const Var<T>&, const Var<T>&,     \
                                   const Tensor<T>*, ScanDirection);                                            \
    template Tensor<T> selective_scan_chunked(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                              const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                              std::size_t, const Tensor<T>*, ScanDirection);                    \
    template Var<T> gated_readout(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
    template void validate_end_padding(const Tensor<T>&);                                                       \
    template Var<T> mamba_block_forward(const Var<T>&, const Tensor<T>&, const MambaBlockParams<T>&,            \
                                        const MambaOptions&, const ForwardContext&, const std::string&);

MABERT_INSTANTIATE_SSM(float)
MABERT_INSTANTIATE_SSM(double)
MABERT_INSTANTIATE_SSM(long double)

}  // namespace mabert
