#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <utility>

#include "mabert/nn.hpp"

namespace mabert {

enum class ScanDirection { Forward, Reverse, Bidirectional };

std::string scan_direction_name(ScanDirection d);
ScanDirection parse_scan_direction(const std::string& s);

struct PsmMode {
    bool pre = true;
    bool post = true;
};

std::string psm_mode_name(PsmMode m);
PsmMode parse_psm_mode(const std::string& s);

template <typename T>
struct ScanCoefficients {
    Var<T> delta;  // [B, T, D_m], strictly positive
    Var<T> b;      // [B, T, N]
    Var<T> c;      // [B, T, N]
};

template <typename T>
struct MambaBlockParams {
    LayerNormParams<T> ln1, ln2;
    Var<T> W_in;  // [D, 2 D_m]
    DWConvParams<T> conv;
    Var<T> W_x;   // [D_m, r + 2N]
    Var<T> W_dt;  // [r, D_m]
    Var<T> b_dt;  // [D_m]
    Var<T> A_log; // [D_m, N]
    Var<T> D_skip;  // [D_m]
    Var<T> W_out;   // [D_m, D]
    FFNParams<T> ffn;
};

struct MambaOptions {
    PsmMode psm;
    ScanDirection direction = ScanDirection::Bidirectional;
    ConvPadding conv_padding = ConvPadding::Causal;
    bool ssm_activation = true;
    double ln_eps = 1e-12;
    double dropout = 0.0;
    std::size_t rank = 1;
    std::size_t state = 16;
};

template <typename T>
std::pair<Var<T>, Var<T>> split_in_gate(const Var<T>& h_hat, const Var<T>& W_in);

template <typename T>
ScanCoefficients<T> token_coefficients(const Var<T>& u, const Var<T>& W_x, const Var<T>& W_dt, const Var<T>& b_dt,
                                       std::size_t rank, std::size_t state);

// h_t = exp(delta_t A) h_{t-1} + delta_t b_t u_t, out_t = <c_t, h_t> + D_skip u_t with
// A = -exp(A_log) and h = 0 before the first step. Steps where `step_mask` is 0
// leave the state untouched. Reverse runs the same recurrence from the end;
// bidirectional sums both state readouts and adds the skip term once.
template <typename T>
Var<T> selective_scan(const Var<T>& u, const ScanCoefficients<T>& coeffs, const Var<T>& A_log, const Var<T>& D_skip,
                      const Tensor<T>* step_mask = nullptr, ScanDirection direction = ScanDirection::Forward);

// Same recurrence evaluated in blocks of `chunk` steps: each block is scanned from a
// zero state and the carried state is folded in through cumulative decay products.
template <typename T>
Tensor<T> selective_scan_chunked(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& b, const Tensor<T>& c,
                                 const Tensor<T>& A_log, const Tensor<T>& D_skip, std::size_t chunk,
                                 const Tensor<T>* step_mask = nullptr, ScanDirection direction = ScanDirection::Forward);

// Multiply-adds performed by selective scans in this process (4 per state element per step).
struct ScanCounter {
    static std::uint64_t flops();
    static void reset();
    static void add(std::uint64_t n);
};

template <typename T>
Var<T> gated_readout(const Var<T>& o, const Var<T>& z, const Var<T>& W_out);

// Throws InvalidMaskError unless every row of `mask` is ones followed by zeros with at least one one.
template <typename T>
void validate_end_padding(const Tensor<T>& mask);

template <typename T>
Var<T> mamba_block_forward(const Var<T>& H, const Tensor<T>& mask, const MambaBlockParams<T>& p,
                           const MambaOptions& opt, const ForwardContext& ctx = {}, const std::string& site = "ssm");

}  // namespace mabert
