#pragma once

#include <cstddef>
#include <vector>

// Row-major GEMM kernels shared by matmul/linear and their backward rules.
// Every output element accumulates its k-terms in ascending order, and the
// result for a row never depends on how many rows are processed together.
namespace pop::detail {

// Four rows by JB columns of C held in registers across the whole k loop.
template <typename T, std::size_t JB>
inline void tile4(std::size_t n, std::size_t k, const T* __restrict a, const T* __restrict b, T* __restrict c) {
  T acc[4][JB];
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < JB; ++j) acc[r][j] = c[r * n + j];
  for (std::size_t p = 0; p < k; ++p) {
    const T* bp = b + p * n;
    const T v0 = a[p], v1 = a[k + p], v2 = a[2 * k + p], v3 = a[3 * k + p];
    for (std::size_t j = 0; j < JB; ++j) {
      const T bj = bp[j];
      acc[0][j] += v0 * bj;
      acc[1][j] += v1 * bj;
      acc[2][j] += v2 * bj;
      acc[3][j] += v3 * bj;
    }
  }
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < JB; ++j) c[r * n + j] = acc[r][j];
}

// C[m x n] += A[m x k] . B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  constexpr std::size_t wide = 256 / sizeof(T);
  constexpr std::size_t narrow = 64 / sizeof(T);
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    std::size_t j = 0;
    for (; j + wide <= n; j += wide) tile4<T, wide>(n, k, ai, b + j, ci + j);
    for (; j + narrow <= n; j += narrow) tile4<T, narrow>(n, k, ai, b + j, ci + j);
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < 4; ++r) {
        T s = ci[r * n + j];
        for (std::size_t p = 0; p < k; ++p) s += ai[r * k + p] * b[p * n + j];
        ci[r * n + j] = s;
      }
    }
  }
  for (; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      const T v = ai[p];
#pragma GCC ivdep
      for (std::size_t j = 0; j < n; ++j) ci[j] += v * bp[j];
    }
  }
}

// Out[cols x rows] = In[rows x cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

// C[m x n] += A[m x k] . B^T with B stored [n x k]
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::vector<T> bt(n * k);
  transpose(n, k, b, bt.data());
  gemm_nn(m, n, k, a, bt.data(), c);
}

// C[k x n] += A^T . B with A stored [m x k], B stored [m x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = ai[p];
      T* cp = c + p * n;
#pragma GCC ivdep
      for (std::size_t j = 0; j < n; ++j) cp[j] += v * bi[j];
    }
  }
}

}  // namespace pop::detail
