#pragma once

// Raw numeric kernels shared by the autodiff ops and the plain (non-graph)
// helpers. All matrices are row-major; every gemm accumulates into C so the
// backward pass can reuse them for gradient accumulation.

#include <cmath>
#include <cstdint>

namespace lnfree::kernels {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            T* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// GPT-2's tanh-approximation GELU and its derivative.
template <typename T>
T gelu_scalar(T x) {
    const T kSqrt2OverPi = T(0.7978845608028654);
    const T inner = kSqrt2OverPi * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad_scalar(T x) {
    const T kSqrt2OverPi = T(0.7978845608028654);
    const T inner = kSqrt2OverPi * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(inner);
    const T dinner = kSqrt2OverPi * (T(1) + T(0.134145) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * dinner;
}

// In-place shift-invariant softmax over row[0..n).
template <typename T>
void softmax_row(T* row, int64_t n) {
    T mx = row[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    T sum = T(0);
    for (int64_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
    }
    const T inv = T(1) / sum;
    for (int64_t i = 0; i < n; ++i) row[i] *= inv;
}

// Per-position mean and standard deviation sqrt(var + eps) over a row.
template <typename T>
void row_mean_sigma(const T* row, int64_t h, T eps, T* mean_out, T* sigma_out) {
    T mean = T(0);
    for (int64_t i = 0; i < h; ++i) mean += row[i];
    mean /= T(h);
    T var = T(0);
    for (int64_t i = 0; i < h; ++i) {
        const T d = row[i] - mean;
        var += d * d;
    }
    var /= T(h);
    *mean_out = mean;
    *sigma_out = std::sqrt(var + eps);
}

template <typename T>
T logsumexp_row(const T* row, int64_t n) {
    T mx = row[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    T sum = T(0);
    for (int64_t i = 0; i < n; ++i) sum += std::exp(row[i] - mx);
    return mx + std::log(sum);
}

}  // namespace lnfree::kernels
