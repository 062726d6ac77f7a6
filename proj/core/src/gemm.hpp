#pragma once

#include <cstddef>

namespace icd::detail {

// Small row-major accumulating matrix kernels. The j loops are elementwise
// over contiguous rows, so results do not depend on vector width; the k
// loops accumulate in a fixed order.

/// C[m,n] += A[m,k] * B[k,n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,k] += A[m,n] * B[k,n]^T
inline void gemm_abT_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                         std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[kk] += acc;
    }
  }
}

/// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_aTb_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                         std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* crow = c + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace icd::detail
