#include "mabert/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <limits>
#include <optional>
#include <numeric>

namespace mabert {

namespace {

// Trailing-aligned broadcast of two shapes; strides are zero on broadcast axes.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
    const std::size_t n = std::max(a.size(), b.size());
    Broadcast p;
    p.out.assign(n, 1);
    p.stride_a.assign(n, 0);
    p.stride_b.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t da = i + a.size() >= n ? a[i + a.size() - n] : 1;
        const std::size_t db = i + b.size() >= n ? b[i + b.size() - n] : 1;
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
        }
        p.out[i] = std::max(da, db);
    }
    std::size_t sa = 1, sb = 1;
    for (std::size_t k = n; k-- > 0;) {
        const std::size_t da = k + a.size() >= n ? a[k + a.size() - n] : 1;
        const std::size_t db = k + b.size() >= n ? b[k + b.size() - n] : 1;
        p.stride_a[k] = da == 1 ? 0 : sa;
        p.stride_b[k] = db == 1 ? 0 : sb;
        sa *= da;
        sb *= db;
    }
    return p;
}

// Calls row(out_base, a_base, b_base) once per last-axis row, in row-major order.
template <typename F>
void broadcast_rows(const Broadcast& p, F&& row) {
    const std::size_t n = p.out.size();
    if (n <= 1) {
        row(0, 0, 0);
        return;
    }
    const std::size_t inner = p.out[n - 1];
    const std::size_t rows = numel(p.out) / inner;
    std::vector<std::size_t> idx(n - 1, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        row(r * inner, oa, ob);
        for (std::size_t ax = n - 1; ax-- > 0;) {
            if (++idx[ax] < p.out[ax]) {
                oa += p.stride_a[ax];
                ob += p.stride_b[ax];
                break;
            }
            oa -= (p.out[ax] - 1) * p.stride_a[ax];
            ob -= (p.out[ax] - 1) * p.stride_b[ax];
            idx[ax] = 0;
        }
    }
}

template <typename F>
void broadcast_each(const Broadcast& p, F&& f) {
    const std::size_t n = p.out.size();
    const std::size_t inner = n == 0 ? 1 : p.out[n - 1];
    const std::size_t sa = n == 0 ? 0 : p.stride_a[n - 1];
    const std::size_t sb = n == 0 ? 0 : p.stride_b[n - 1];
    broadcast_rows(p, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * sa, ib + j * sb);
    });
}

enum class BinaryKind { Add, Sub, Mul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryKind kind) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> out;
    if (av.shape() == bv.shape()) {
        out = Tensor<T>(av.shape());
        const T* x = av.data();
        const T* y = bv.data();
        T* o = out.data();
        const std::size_t n = av.numel();
        switch (kind) {
            case BinaryKind::Add:
                for (std::size_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
                break;
            case BinaryKind::Sub:
                for (std::size_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
                break;
            case BinaryKind::Mul:
                for (std::size_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
                break;
        }
    } else {
        const Broadcast p = plan_broadcast(av.shape(), bv.shape());
        out = Tensor<T>(p.out);
        const T* x = av.data();
        const T* y = bv.data();
        T* o = out.data();
        switch (kind) {
            case BinaryKind::Add:
                broadcast_each(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] + y[ib]; });
                break;
            case BinaryKind::Sub:
                broadcast_each(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] - y[ib]; });
                break;
            case BinaryKind::Mul:
                broadcast_each(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] * y[ib]; });
                break;
        }
    }
    return Var<T>::from_op(std::move(out), {a, b}, [kind](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        const Tensor<T>& g = *self.grad;
        const Broadcast p = plan_broadcast(na.value.shape(), nb.value.shape());
        const T sign_b = kind == BinaryKind::Sub ? T(-1) : T(1);
        if (na.requires_grad) {
            Tensor<T> ga(na.value.shape());
            T* d = ga.data();
            if (kind == BinaryKind::Mul) {
                const T* y = nb.value.data();
                broadcast_each(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ia] += g[i] * y[ib]; });
            } else {
                broadcast_each(p, [&](std::size_t i, std::size_t ia, std::size_t) { d[ia] += g[i]; });
            }
            na.accumulate(std::move(ga));
        }
        if (nb.requires_grad) {
            Tensor<T> gb(nb.value.shape());
            T* d = gb.data();
            if (kind == BinaryKind::Mul) {
                const T* x = na.value.data();
                broadcast_each(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ib] += g[i] * x[ia]; });
            } else {
                broadcast_each(p, [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] += sign_b * g[i]; });
            }
            nb.accumulate(std::move(gb));
        }
    });
}

// Unary op given value and derivative functions of the input.
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
    const Tensor<T>& x = a.value();
    Tensor<T> out(x.shape(), Uninitialized{});
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
    return Var<T>::from_op(std::move(out), {a}, [df](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        const Tensor<T>& g = *self.grad;
        Tensor<T> gx(in.value.shape(), Uninitialized{});
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] = g[i] * df(in.value[i]);
        in.accumulate(std::move(gx));
    });
}

template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

// C[K,N] += A[M,K]^T B[M,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
    std::vector<T> at(K * M);
    transpose_into(M, K, A, at.data());
    kernels::gemm_nn(K, M, N, at.data(), B, C);
}

}  // namespace

namespace kernels {

namespace {

template <typename T>
void gemm_rows(std::size_t M, std::size_t K, std::size_t N, std::size_t j0, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        const T* a = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + k * N;
            for (std::size_t j = j0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// R rows by V 64-byte vectors of C held in registers across the whole K loop.
template <typename T, std::size_t R, std::size_t V>
void gemm_tile(std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
    typedef T vec __attribute__((vector_size(64)));
    constexpr std::size_t L = 64 / sizeof(T);
    vec acc[R][V];
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < V; ++v) std::memcpy(&acc[r][v], C + r * N + v * L, sizeof(vec));
    for (std::size_t k = 0; k < K; ++k) {
        vec bv[V];
        for (std::size_t v = 0; v < V; ++v) std::memcpy(&bv[v], B + k * N + v * L, sizeof(vec));
        for (std::size_t r = 0; r < R; ++r) {
            const T av = A[r * K + k];
            for (std::size_t v = 0; v < V; ++v) acc[r][v] += av * bv[v];
        }
    }
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < V; ++v) std::memcpy(C + r * N + v * L, &acc[r][v], sizeof(vec));
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
    if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
        constexpr std::size_t L = 64 / sizeof(T), R = 4;
        std::size_t i = 0;
        for (; i + R <= M; i += R) {
            std::size_t j = 0;
            for (; j + 2 * L <= N; j += 2 * L) gemm_tile<T, R, 2>(K, N, A + i * K, B + j, C + i * N + j);
            for (; j + L <= N; j += L) gemm_tile<T, R, 1>(K, N, A + i * K, B + j, C + i * N + j);
            if (j < N) gemm_rows(R, K, N, j, A + i * K, B, C + i * N);
        }
        if (i < M) gemm_rows(M - i, K, N, 0, A + i * K, B, C + i * N);
    } else {
        gemm_rows(M, K, N, 0, A, B, C);
    }
}

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T silu(T x) {
    return x * sigmoid(x);
}

template <typename T>
T gelu(T x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template void gemm_nn(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nn(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template float sigmoid(float);
template double sigmoid(double);
template float softplus(float);
template double softplus(double);
template float silu(float);
template double silu(double);
template float gelu(float);
template double gelu(double);

}  // namespace kernels

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinaryKind::Add);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinaryKind::Sub);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinaryKind::Mul);
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    return unary(a, [factor](T x) { return x * factor; }, [factor](T) { return factor; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    return unary(
        a, [](T x) { return kernels::sigmoid(x); },
        [](T x) {
            const T s = kernels::sigmoid(x);
            return s * (T(1) - s);
        });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    return unary(
        a, [](T x) { return kernels::silu(x); },
        [](T x) {
            const T s = kernels::sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
    return unary(a, [](T x) { return kernels::softplus(x); }, [](T x) { return kernels::sigmoid(x); });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    return unary(
        a, [](T x) { return kernels::gelu(x); },
        [](T x) {
            constexpr T c = T(0.7978845608028654);
            constexpr T k = T(0.044715);
            const T t = std::tanh(c * (x + k * x * x * x));
            return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
        });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t M = sa[sa.size() - 2], K = sa.back(), N = sb.back();
    if (sb[sb.size() - 2] != K) {
        throw DimensionError("matmul inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));
    }
    const Shape batch_a(sa.begin(), sa.end() - 2);
    const Shape batch_b(sb.begin(), sb.end() - 2);
    const Broadcast bp = plan_broadcast(batch_a, batch_b);
    Shape out_shape = bp.out;
    out_shape.push_back(M);
    out_shape.push_back(N);
    Tensor<T> out(out_shape);

    const bool weight_rhs = sb.size() == 2;
    if (weight_rhs) {
        kernels::gemm_nn(numel(batch_a) * M, K, N, a.value().data(), b.value().data(), out.data());
    } else {
        broadcast_each(bp, [&](std::size_t oi, std::size_t ia, std::size_t ib) {
            kernels::gemm_nn(M, K, N, a.value().data() + ia * M * K, b.value().data() + ib * K * N,
                             out.data() + oi * M * N);
        });
    }

    return Var<T>::from_op(std::move(out), {a, b}, [M, K, N, weight_rhs](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        const Tensor<T>& g = *self.grad;
        const Tensor<T>& av = na.value;
        const Tensor<T>& bv = nb.value;
        if (weight_rhs) {
            const std::size_t rows = av.numel() / K;
            if (na.requires_grad) {
                std::vector<T> bt(K * N);
                transpose_into(K, N, bv.data(), bt.data());
                Tensor<T> ga(av.shape());
                kernels::gemm_nn(rows, N, K, g.data(), bt.data(), ga.data());
                na.accumulate(std::move(ga));
            }
            if (nb.requires_grad) {
                Tensor<T> gb(bv.shape());
                gemm_tn(rows, K, N, av.data(), g.data(), gb.data());
                nb.accumulate(std::move(gb));
            }
            return;
        }
        const Shape batch_a(av.shape().begin(), av.shape().end() - 2);
        const Shape batch_b(bv.shape().begin(), bv.shape().end() - 2);
        const Broadcast bp = plan_broadcast(batch_a, batch_b);
        std::optional<Tensor<T>> ga, gb;
        if (na.requires_grad) ga.emplace(av.shape());
        if (nb.requires_grad) gb.emplace(bv.shape());
        std::vector<T> bt(na.requires_grad ? K * N : 0);
        broadcast_each(bp, [&](std::size_t oi, std::size_t ia, std::size_t ib) {
            const T* gblk = g.data() + oi * M * N;
            if (ga) {
                transpose_into(K, N, bv.data() + ib * K * N, bt.data());
                kernels::gemm_nn(M, N, K, gblk, bt.data(), ga->data() + ia * M * K);
            }
            if (gb) gemm_tn(M, K, N, av.data() + ia * M * K, gblk, gb->data() + ib * K * N);
        });
        if (ga) na.accumulate(std::move(*ga));
        if (gb) nb.accumulate(std::move(*gb));
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return Var<T>::from_op(std::move(out), {a}, [](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        in.accumulate(self.grad->reshaped(in.value.shape()));
    });
}

namespace {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    const std::size_t n = s.size();
    std::vector<std::size_t> in_stride(n, 1);
    for (std::size_t k = n; k-- > 1;) in_stride[k - 1] = in_stride[k] * s[k];
    Shape out_shape(n);
    std::vector<std::size_t> stride(n);
    for (std::size_t i = 0; i < n; ++i) {
        out_shape[i] = s[perm[i]];
        stride[i] = in_stride[perm[i]];
    }
    Tensor<T> out(out_shape, Uninitialized{});
    if (n == 0) {
        out[0] = x[0];
        return out;
    }
    const std::size_t inner = out_shape[n - 1];
    const std::size_t inner_stride = stride[n - 1];
    const std::size_t rows = out.numel() / inner;
    std::vector<std::size_t> idx(n - 1, 0);
    std::size_t base = 0;
    const T* src = x.data();
    T* dst = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < inner; ++j) dst[r * inner + j] = src[base + j * inner_stride];
        for (std::size_t ax = n - 1; ax-- > 0;) {
            if (++idx[ax] < out_shape[ax]) {
                base += stride[ax];
                break;
            }
            base -= (out_shape[ax] - 1) * stride[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& perm) {
    const std::size_t n = a.shape().size();
    std::vector<std::size_t> check(perm);
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i) {
        if (check.size() != n || check[i] != i) {
            throw DimensionError("invalid permutation for shape " + shape_str(a.shape()));
        }
    }
    std::vector<std::size_t> inverse(n);
    for (std::size_t i = 0; i < n; ++i) inverse[perm[i]] = i;
    return Var<T>::from_op(permute_tensor(a.value(), perm), {a}, [inverse](Node<T>& self) {
        self.inputs[0]->accumulate(permute_tensor(*self.grad, inverse));
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    const std::size_t n = a.shape().size();
    if (n < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(a.shape()));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[n - 1], perm[n - 2]);
    return permute(a, perm);
}

template <typename T>
Var<T> slice_last(const Var<T>& a, std::size_t start, std::size_t length) {
    const Tensor<T>& x = a.value();
    const std::size_t last = x.last();
    if (x.ndim() == 0 || length == 0 || start + length > last) {
        throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") out of range for shape " + shape_str(x.shape()));
    }
    Shape shape = x.shape();
    shape.back() = length;
    Tensor<T> out(shape);
    const std::size_t rows = x.numel() / last;
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data() + r * last + start, length, out.data() + r * length);
    }
    return Var<T>::from_op(std::move(out), {a}, [start, length, last, rows](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        Tensor<T> gx(in.value.shape());
        const T* g = self.grad->data();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(g + r * length, length, gx.data() + r * last + start);
        }
        in.accumulate(std::move(gx));
    });
}

template <typename T>
Var<T> masked_softmax(const Var<T>& scores, const Tensor<T>* mask, T kappa) {
    const Tensor<T>& s = scores.value();
    if (s.ndim() == 0) throw DimensionError("masked_softmax needs rank >= 1 scores");
    const std::size_t cols = s.last();
    Tensor<T> out(s.shape(), Uninitialized{});
    const T* x = s.data();
    T* y = out.data();

    auto softmax_row = [&](std::size_t o, const T* m, std::size_t m_stride, std::size_t row_index) {
        T mx = -std::numeric_limits<T>::infinity();
        if (m) {
            bool any = false;
            for (std::size_t j = 0; j < cols; ++j) {
                const T mj = m[j * m_stride];
                any = any || mj > T(0.5);
                const T v = x[o + j] + (T(1) - mj) * (-kappa);
                y[o + j] = v;
                mx = std::max(mx, v);
            }
            if (!any) {
                throw InvalidMaskError("masked_softmax: row " + std::to_string(row_index) + " has no valid position");
            }
        } else {
            for (std::size_t j = 0; j < cols; ++j) {
                y[o + j] = x[o + j];
                mx = std::max(mx, x[o + j]);
            }
        }
        T total = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            const T e = std::exp(y[o + j] - mx);
            y[o + j] = e;
            total += e;
        }
        for (std::size_t j = 0; j < cols; ++j) y[o + j] /= total;
    };

    if (mask) {
        const Broadcast p = plan_broadcast(s.shape(), mask->shape());
        if (p.out != s.shape()) {
            throw DimensionError("mask " + shape_str(mask->shape()) + " does not broadcast to scores " +
                                 shape_str(s.shape()));
        }
        const std::size_t m_stride = p.stride_b.back();
        std::size_t row_index = 0;
        broadcast_rows(p, [&](std::size_t o, std::size_t, std::size_t ib) {
            softmax_row(o, mask->data() + ib, m_stride, row_index++);
        });
    } else {
        for (std::size_t r = 0, rows = s.numel() / cols; r < rows; ++r) softmax_row(r * cols, nullptr, 0, r);
    }

    return Var<T>::from_op(std::move(out), {scores}, [cols](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        const T* y = self.value.data();
        const T* g = self.grad->data();
        Tensor<T> gx(in.value.shape(), Uninitialized{});
        T* d = gx.data();
        for (std::size_t r = 0, rows = gx.numel() / cols; r < rows; ++r) {
            const std::size_t o = r * cols;
            T dot = 0;
            for (std::size_t j = 0; j < cols; ++j) dot += g[o + j] * y[o + j];
            for (std::size_t j = 0; j < cols; ++j) d[o + j] = y[o + j] * (g[o + j] - dot);
        }
        in.accumulate(std::move(gx));
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const Tensor<T>& xv = x.value();
    const std::size_t D = xv.last();
    if (xv.ndim() == 0 || gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
        throw DimensionError("layer_norm over " + shape_str(xv.shape()) + " with gamma " + shape_str(gamma.shape()) +
                             " and beta " + shape_str(beta.shape()));
    }
    const std::size_t rows = xv.numel() / D;
    Tensor<T> out(xv.shape());
    auto xhat = std::make_shared<std::vector<T>>(xv.numel());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    const T* g = gamma.value().data();
    const T* b = beta.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * D;
        T total = 0;
        for (std::size_t j = 0; j < D; ++j) total += row[j];
        const T mu = total / T(D);
        T sq = 0;
        for (std::size_t j = 0; j < D; ++j) sq += (row[j] - mu) * (row[j] - mu);
        const T inv = T(1) / std::sqrt(sq / T(D) + eps);
        (*rstd)[r] = inv;
        for (std::size_t j = 0; j < D; ++j) {
            const T h = (row[j] - mu) * inv;
            (*xhat)[r * D + j] = h;
            out[r * D + j] = g[j] * h + b[j];
        }
    }
    return Var<T>::from_op(std::move(out), {x, gamma, beta}, [xhat, rstd, D, rows](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& ng = *self.inputs[1];
        Node<T>& nb = *self.inputs[2];
        const T* g = self.grad->data();
        const T* gam = ng.value.data();
        if (ng.requires_grad || nb.requires_grad) {
            Tensor<T> gg(Shape{D}), gb(Shape{D});
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < D; ++j) {
                    gg[j] += g[r * D + j] * (*xhat)[r * D + j];
                    gb[j] += g[r * D + j];
                }
            }
            if (ng.requires_grad) ng.accumulate(std::move(gg));
            if (nb.requires_grad) nb.accumulate(std::move(gb));
        }
        if (nx.requires_grad) {
            Tensor<T> gx(nx.value.shape());
            for (std::size_t r = 0; r < rows; ++r) {
                T m1 = 0, m2 = 0;
                for (std::size_t j = 0; j < D; ++j) {
                    const T gh = g[r * D + j] * gam[j];
                    m1 += gh;
                    m2 += gh * (*xhat)[r * D + j];
                }
                m1 /= T(D);
                m2 /= T(D);
                for (std::size_t j = 0; j < D; ++j) {
                    const T gh = g[r * D + j] * gam[j];
                    gx[r * D + j] = (*rstd)[r] * (gh - m1 - (*xhat)[r * D + j] * m2);
                }
            }
            nx.accumulate(std::move(gx));
        }
    });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids, Shape prefix) {
    const Tensor<T>& tv = table.value();
    if (tv.ndim() != 2) throw DimensionError("embedding table must be [V, D], got " + shape_str(tv.shape()));
    if (numel(prefix) != ids.size()) {
        throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for prefix " + shape_str(prefix));
    }
    const std::size_t V = tv.extent(0), D = tv.extent(1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
            throw VocabularyError("id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                                  " is outside vocabulary of size " + std::to_string(V));
        }
    }
    Shape shape = std::move(prefix);
    shape.push_back(D);
    Tensor<T> out(shape);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * D, D, out.data() + i * D);
    }
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return Var<T>::from_op(std::move(out), {table}, [saved = std::move(saved), D](Node<T>& self) {
        Node<T>& nt = *self.inputs[0];
        Tensor<T> gt(nt.value.shape());
        const T* g = self.grad->data();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            T* row = gt.data() + static_cast<std::size_t>(saved[i]) * D;
            for (std::size_t j = 0; j < D; ++j) row[j] += g[i * D + j];
        }
        nt.accumulate(std::move(gt));
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows) {
    const Tensor<T>& xv = x.value();
    const std::size_t D = xv.last();
    const std::size_t n = xv.numel() / D;
    if (rows.empty()) throw DimensionError("gather_rows with no rows");
    Tensor<T> out(Shape{rows.size(), D});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " >= " + std::to_string(n));
        std::copy_n(xv.data() + rows[i] * D, D, out.data() + i * D);
    }
    std::vector<std::size_t> saved(rows.begin(), rows.end());
    return Var<T>::from_op(std::move(out), {x}, [saved = std::move(saved), D](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        Tensor<T> gx(in.value.shape());
        const T* g = self.grad->data();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            for (std::size_t j = 0; j < D; ++j) gx[saved[i] * D + j] += g[i * D + j];
        }
        in.accumulate(std::move(gx));
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T total = 0;
    for (T v : a.value().values()) total += v;
    return Var<T>::from_op(Tensor<T>::scalar(total), {a}, [](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        in.accumulate(Tensor<T>(in.value.shape(), self.grad->item()));
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels) {
    const Tensor<T>& lv = logits.value();
    if (lv.ndim() != 2 || lv.extent(0) != labels.size()) {
        throw DimensionError("cross_entropy: logits " + shape_str(lv.shape()) + " with " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t V = lv.extent(1);
    std::size_t count = 0;
    T total = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kIgnoreLabel) continue;
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= V) {
            throw VocabularyError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(V) + ")");
        }
        const T* row = lv.data() + i * V;
        const T mx = *std::max_element(row, row + V);
        T se = 0;
        for (std::size_t j = 0; j < V; ++j) se += std::exp(row[j] - mx);
        total += mx + std::log(se) - row[labels[i]];
        ++count;
    }
    if (count == 0) throw TrainingError("degenerate batch: no labeled positions for cross-entropy");
    std::vector<std::int32_t> saved(labels.begin(), labels.end());
    return Var<T>::from_op(
        Tensor<T>::scalar(total / T(count)), {logits}, [saved = std::move(saved), V, count](Node<T>& self) {
            Node<T>& in = *self.inputs[0];
            const T g = self.grad->item() / T(count);
            Tensor<T> gx(in.value.shape());
            for (std::size_t i = 0; i < saved.size(); ++i) {
                if (saved[i] == kIgnoreLabel) continue;
                const T* row = in.value.data() + i * V;
                const T mx = *std::max_element(row, row + V);
                T se = 0;
                for (std::size_t j = 0; j < V; ++j) se += std::exp(row[j] - mx);
                for (std::size_t j = 0; j < V; ++j) gx[i * V + j] = g * std::exp(row[j] - mx) / se;
                gx[i * V + static_cast<std::size_t>(saved[i])] -= g;
            }
            in.accumulate(std::move(gx));
        });
}

#define MABERT_INSTANTIATE_OPS(T)                                                             \
    template Var<T> add(const Var<T>&, const Var<T>&);                                        \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
    template Var<T> scale(const Var<T>&, T);                                                  \
    template Var<T> exp(const Var<T>&);                                                       \
    template Var<T> sigmoid(const Var<T>&);                                                   \
    template Var<T> silu(const Var<T>&);                                                      \
    template Var<T> softplus(const Var<T>&);                                                  \
    template Var<T> gelu(const Var<T>&);                                                      \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
    template Var<T> reshape(const Var<T>&, Shape);                                            \
    template Var<T> permute(const Var<T>&, const std::vector<std::size_t>&);                  \
    template Var<T> transpose(const Var<T>&);                                                 \
    template Var<T> slice_last(const Var<T>&, std::size_t, std::size_t);                      \
    template Var<T> masked_softmax(const Var<T>&, const Tensor<T>*, T);                       \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
    template Var<T> embedding(const Var<T>&, std::span<const std::int32_t>, Shape);           \
    template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                 \
    template Var<T> sum(const Var<T>&);                                                       \
    template Var<T> mean(const Var<T>&);                                                      \
    template Var<T> cross_entropy(const Var<T>&, std::span<const std::int32_t>);

MABERT_INSTANTIATE_OPS(float)
MABERT_INSTANTIATE_OPS(double)
MABERT_INSTANTIATE_OPS(long double)

}  // namespace mabert
