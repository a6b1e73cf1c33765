#pragma once

// Scalar reference kernels. These define the numerical ground truth the
// SIMD variants are tested against. gemm_nn/gemm_tn use std::fma with a
// fixed accumulation order (k resp. i ascending per output element) so
// vectorized variants can reproduce them bit for bit.

#include <cmath>
#include <cstddef>

namespace gpaslab::kern::scalar {

template <class T>
void add(const T* a, const T* b, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

template <class T>
void sub(const T* a, const T* b, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

template <class T>
void mul(const T* a, const T* b, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

template <class T>
void scale(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i];
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc = std::fma(a[i], b[i], acc);
  return acc;
}

template <class T>
T sum(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <class T>
T sum_sq(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc = std::fma(x[i], x[i], acc);
  return acc;
}

template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* A,
             std::size_t lda, const T* B, std::size_t ldb, T* C,
             std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = C[i * ldc + j];
      for (std::size_t p = 0; p < k; ++p)
        acc = std::fma(A[i * lda + p], B[p * ldb + j], acc);
      C[i * ldc + j] = acc;
    }
  }
}

template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* A,
             std::size_t lda, const T* B, std::size_t ldb, T* C,
             std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = C[i * ldc + j];
      for (std::size_t p = 0; p < k; ++p)
        acc = std::fma(A[i * lda + p], B[j * ldb + p], acc);
      C[i * ldc + j] = acc;
    }
  }
}

template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* A,
             std::size_t lda, const T* B, std::size_t ldb, T* C,
             std::size_t ldc) {
  // C[p, j] accumulates over i ascending.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * lda + p];
      for (std::size_t j = 0; j < n; ++j)
        C[p * ldc + j] = std::fma(a, B[i * ldb + j], C[p * ldc + j]);
    }
  }
}

}  // namespace gpaslab::kern::scalar
