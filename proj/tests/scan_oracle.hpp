#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "mabert/ssm.hpp"

namespace mabert::testing {

// Step-by-step recurrence in long double. Masked steps keep the state and still read it out.
template <typename T>
std::vector<long double> naive_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& b,
                                    const Tensor<T>& c, const Tensor<T>& A_log, const Tensor<T>& D_skip,
                                    const Tensor<T>* mask, ScanDirection dir) {
    const std::size_t B = u.extent(0), T_len = u.extent(1), C = u.extent(2), N = A_log.extent(1);
    std::vector<long double> out(u.numel(), 0.0L);
    auto pass = [&](bool reverse) {
        for (std::size_t bi = 0; bi < B; ++bi) {
            std::vector<long double> h(C * N, 0.0L);
            for (std::size_t i = 0; i < T_len; ++i) {
                const std::size_t t = reverse ? T_len - 1 - i : i;
                const std::size_t row = bi * T_len + t;
                const bool active = !mask || (*mask)[row] > T(0.5);
                for (std::size_t ch = 0; ch < C; ++ch) {
                    long double acc = 0;
                    for (std::size_t n = 0; n < N; ++n) {
                        long double& s = h[ch * N + n];
                        if (active) {
                            const long double A = -std::exp(static_cast<long double>(A_log[ch * N + n]));
                            const long double dt = delta[row * C + ch];
                            s = std::exp(dt * A) * s + dt * static_cast<long double>(b[row * N + n]) * u[row * C + ch];
                        }
                        acc += static_cast<long double>(c[row * N + n]) * s;
                    }
                    out[row * C + ch] += acc;
                }
            }
        }
    };
    if (dir != ScanDirection::Reverse) pass(false);
    if (dir != ScanDirection::Forward) pass(true);
    for (std::size_t row = 0; row < B * T_len; ++row)
        for (std::size_t ch = 0; ch < C; ++ch)
            out[row * C + ch] += static_cast<long double>(D_skip[ch]) * u[row * C + ch];
    return out;
}

template <typename T>
struct ScanInstance {
    Tensor<T> u, delta, b, c, A_log, D_skip, mask;
    bool masked = false;
};

// Random instance; `tiny_delta` draws step sizes near 1e-7 to exercise the Δ→0⁺ limit.
template <typename T>
ScanInstance<T> random_scan_instance(std::size_t B, std::size_t T_len, std::size_t C, std::size_t N,
                                     std::mt19937_64& rng, bool tiny_delta, bool masked) {
    std::uniform_real_distribution<double> unit(-1.0, 1.0), pos(0.01, 1.0), tiny(1e-8, 1e-6), alog(-1.0, 1.5);
    ScanInstance<T> s;
    s.u = Tensor<T>(Shape{B, T_len, C});
    s.delta = Tensor<T>(Shape{B, T_len, C});
    s.b = Tensor<T>(Shape{B, T_len, N});
    s.c = Tensor<T>(Shape{B, T_len, N});
    s.A_log = Tensor<T>(Shape{C, N});
    s.D_skip = Tensor<T>(Shape{C});
    for (auto& v : s.u.values()) v = T(unit(rng));
    for (auto& v : s.delta.values()) v = T(tiny_delta ? tiny(rng) : pos(rng));
    for (auto& v : s.b.values()) v = T(0.5 * unit(rng));
    for (auto& v : s.c.values()) v = T(0.5 * unit(rng));
    for (auto& v : s.A_log.values()) v = T(alog(rng));
    for (auto& v : s.D_skip.values()) v = T(unit(rng));
    s.masked = masked;
    s.mask = Tensor<T>::ones({B, T_len});
    if (masked) {
        std::uniform_int_distribution<std::size_t> len(1, T_len);
        for (std::size_t bi = 0; bi < B; ++bi) {
            const std::size_t L = len(rng);
            for (std::size_t t = L; t < T_len; ++t) s.mask[bi * T_len + t] = T(0);
        }
    }
    return s;
}

}  // namespace mabert::testing
