#pragma once

#include <cstddef>

namespace smelab::kernels {

// Row-major GEMM variants. Every output element is accumulated over the
// inner dimension in ascending order, so a row of the result does not
// depend on how many other rows are in the batch.

// c[m x n] (+)= a[m x k] . b[k x n]
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[k x n] += a[m x k]^T . g[m x n]
inline void gemm_tn_acc(const double* __restrict a, const double* __restrict g, double* __restrict c,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    const double* ar = a + r * k;
    const double* gr = g + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double arp = ar[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += arp * gr[j];
    }
  }
}

inline void transpose(const double* __restrict a, double* __restrict out, std::size_t rows,
                      std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
}

}  // namespace smelab::kernels
