#pragma once

// Dense row-major kernels shared by matmul and the convolution layers.
// All loops run in a fixed order so results are bit-reproducible.

#include <algorithm>
#include <cstddef>

namespace gacunet::kernels {

inline constexpr std::size_t kColumnBlock = 256;

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t j0 = 0; j0 < n; j0 += kColumnBlock) {
        const std::size_t j1 = std::min(n, j0 + kColumnBlock);
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            const T* arow = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = arow[p];
                const T* brow = b + p * n;
                for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
    constexpr std::size_t kLanes = 8;
    T acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (std::size_t u = 0; u < kLanes; ++u) acc[u] += x[i + u] * y[i + u];
    T tail = 0;
    for (; i < n; ++i) tail += x[i] * y[i];
    T total = 0;
    for (std::size_t u = 0; u < kLanes; ++u) total += acc[u];
    return total + tail;
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T v = dot(a + i * k, b + j * k, k);
            c[i * n + j] = accumulate ? c[i * n + j] + v : v;
        }
    }
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t j0 = 0; j0 < n; j0 += kColumnBlock) {
        const std::size_t j1 = std::min(n, j0 + kColumnBlock);
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T av = a[p * m + i];
                T* crow = c + i * n;
                for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace gacunet::kernels
