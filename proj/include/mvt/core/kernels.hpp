#pragma once

#include <cstddef>
#include <vector>

// Raw dense kernels behind the differentiable ops. All matrices are row-major.
// Loop orders keep the innermost loop contiguous so the compiler can vectorize.

namespace mvt::kernels {

/// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

template <class T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      t[j * rows + i] = a[i * cols + j];
    }
  }
  return t;
}

/// C[m x k] += A[m x n] * B^T, with B stored as [k x n]
template <class T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  const auto bt = transpose(b, k, n);
  gemm_acc(a, bt.data(), c, m, n, k);
}

/// C[k x n] += A^T * B, with A stored as [m x k] and B as [m x n]
template <class T>
void gemm_tn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace mvt::kernels
