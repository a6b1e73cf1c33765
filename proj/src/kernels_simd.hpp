#pragma once

// Generic SIMD kernel bodies shared by the AVX2 and AVX-512 variants.
// Parameterized on a vector trait class V<T> providing reg/width/load/
// store/bcast/zero/fmadd/add/sub/mul/hsum. gemm_nn and gemm_tn keep the
// scalar reference's per-element accumulation order regardless of vector
// width, so every variant agrees with it bitwise.

#include <cmath>
#include <cstddef>

#include "gpaslab/kernels.hpp"

namespace gpaslab::kern::simd {

template <class T, template <class> class V>
void add(const T* a, const T* b, T* y, std::size_t n) {
  using v = V<T>;
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width)
    v::store(y + i, v::add(v::load(a + i), v::load(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

template <class T, template <class> class V>
void sub(const T* a, const T* b, T* y, std::size_t n) {
  using v = V<T>;
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width)
    v::store(y + i, v::sub(v::load(a + i), v::load(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

template <class T, template <class> class V>
void mul(const T* a, const T* b, T* y, std::size_t n) {
  using v = V<T>;
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width)
    v::store(y + i, v::mul(v::load(a + i), v::load(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

template <class T, template <class> class V>
void scale(T a, const T* x, T* y, std::size_t n) {
  using v = V<T>;
  const auto va = v::bcast(a);
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width)
    v::store(y + i, v::mul(va, v::load(x + i)));
  for (; i < n; ++i) y[i] = a * x[i];
}

template <class T, template <class> class V>
void axpy(T a, const T* x, T* y, std::size_t n) {
  using v = V<T>;
  const auto va = v::bcast(a);
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width)
    v::store(y + i, v::fmadd(va, v::load(x + i), v::load(y + i)));
  for (; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

template <class T, template <class> class V>
T dot(const T* a, const T* b, std::size_t n) {
  using v = V<T>;
  auto acc0 = v::zero(), acc1 = v::zero();
  std::size_t i = 0;
  for (; i + 2 * v::width <= n; i += 2 * v::width) {
    acc0 = v::fmadd(v::load(a + i), v::load(b + i), acc0);
    acc1 = v::fmadd(v::load(a + i + v::width), v::load(b + i + v::width), acc1);
  }
  T tail = 0;
  for (; i < n; ++i) tail = std::fma(a[i], b[i], tail);
  return v::hsum(v::add(acc0, acc1)) + tail;
}

template <class T, template <class> class V>
T sum(const T* x, std::size_t n) {
  using v = V<T>;
  auto acc = v::zero();
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) acc = v::add(acc, v::load(x + i));
  T tail = 0;
  for (; i < n; ++i) tail += x[i];
  return v::hsum(acc) + tail;
}

template <class T, template <class> class V>
T sum_sq(const T* x, std::size_t n) {
  using v = V<T>;
  auto acc = v::zero();
  std::size_t i = 0;
  for (; i + v::width <= n; i += v::width) {
    auto r = v::load(x + i);
    acc = v::fmadd(r, r, acc);
  }
  T tail = 0;
  for (; i < n; ++i) tail = std::fma(x[i], x[i], tail);
  return v::hsum(acc) + tail;
}

// ---- gemm_nn: C += A*B, microkernel 4 rows x 2 vectors, k innermost. ----

template <class T, template <class> class V, std::size_t MR>
void nn_tile(std::size_t n, std::size_t k, const T* A, std::size_t lda,
             const T* B, std::size_t ldb, T* C, std::size_t ldc) {
  using v = V<T>;
  constexpr std::size_t NR = 2 * v::width;
  std::size_t j = 0;
  for (; j + NR <= n; j += NR) {
    typename v::reg acc[MR][2];
    for (std::size_t r = 0; r < MR; ++r) {
      acc[r][0] = v::load(C + r * ldc + j);
      acc[r][1] = v::load(C + r * ldc + j + v::width);
    }
    for (std::size_t p = 0; p < k; ++p) {
      const auto b0 = v::load(B + p * ldb + j);
      const auto b1 = v::load(B + p * ldb + j + v::width);
      for (std::size_t r = 0; r < MR; ++r) {
        const auto a = v::bcast(A[r * lda + p]);
        acc[r][0] = v::fmadd(a, b0, acc[r][0]);
        acc[r][1] = v::fmadd(a, b1, acc[r][1]);
      }
    }
    for (std::size_t r = 0; r < MR; ++r) {
      v::store(C + r * ldc + j, acc[r][0]);
      v::store(C + r * ldc + j + v::width, acc[r][1]);
    }
  }
  for (; j + v::width <= n; j += v::width) {
    typename v::reg acc[MR];
    for (std::size_t r = 0; r < MR; ++r) acc[r] = v::load(C + r * ldc + j);
    for (std::size_t p = 0; p < k; ++p) {
      const auto b0 = v::load(B + p * ldb + j);
      for (std::size_t r = 0; r < MR; ++r)
        acc[r] = v::fmadd(v::bcast(A[r * lda + p]), b0, acc[r]);
    }
    for (std::size_t r = 0; r < MR; ++r) v::store(C + r * ldc + j, acc[r]);
  }
  if constexpr (v::has_mask) {
    if (j < n) {
      const auto mk = v::tail_mask(n - j);
      typename v::reg acc[MR];
      for (std::size_t r = 0; r < MR; ++r)
        acc[r] = v::loadm(C + r * ldc + j, mk);
      for (std::size_t p = 0; p < k; ++p) {
        const auto b0 = v::loadm(B + p * ldb + j, mk);
        for (std::size_t r = 0; r < MR; ++r)
          acc[r] = v::fmadd(v::bcast(A[r * lda + p]), b0, acc[r]);
      }
      for (std::size_t r = 0; r < MR; ++r)
        v::storem(C + r * ldc + j, acc[r], mk);
    }
  } else {
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < MR; ++r) {
        T acc = C[r * ldc + j];
        for (std::size_t p = 0; p < k; ++p)
          acc = std::fma(A[r * lda + p], B[p * ldb + j], acc);
        C[r * ldc + j] = acc;
      }
    }
  }
}

template <class T, template <class> class V>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* A,
             std::size_t lda, const T* B, std::size_t ldb, T* C,
             std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4)
    nn_tile<T, V, 4>(n, k, A + i * lda, lda, B, ldb, C + i * ldc, ldc);
  for (; i < m; ++i)
    nn_tile<T, V, 1>(n, k, A + i * lda, lda, B, ldb, C + i * ldc, ldc);
}

// ---- gemm_nt: C += A*B^T, dot-style microkernel. ----

template <class T, template <class> class V, std::size_t MR, std::size_t NR>
void nt_tile(std::size_t k, const T* A, std::size_t lda, const T* B,
             std::size_t ldb, T* C, std::size_t ldc) {
  using v = V<T>;
  typename v::reg acc[MR][NR];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t c = 0; c < NR; ++c) acc[r][c] = v::zero();
  std::size_t p = 0;
  for (; p + v::width <= k; p += v::width) {
    typename v::reg bv[NR];
    for (std::size_t c = 0; c < NR; ++c) bv[c] = v::load(B + c * ldb + p);
    for (std::size_t r = 0; r < MR; ++r) {
      const auto av = v::load(A + r * lda + p);
      for (std::size_t c = 0; c < NR; ++c)
        acc[r][c] = v::fmadd(av, bv[c], acc[r][c]);
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t c = 0; c < NR; ++c) {
      T s = v::hsum(acc[r][c]);
      for (std::size_t pp = p; pp < k; ++pp)
        s = std::fma(A[r * lda + pp], B[c * ldb + pp], s);
      C[r * ldc + c] += s;
    }
  }
}

template <class T, template <class> class V, std::size_t MR>
void nt_row_block(std::size_t n, std::size_t k, const T* A, std::size_t lda,
                  const T* B, std::size_t ldb, T* C, std::size_t ldc) {
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4)
    nt_tile<T, V, MR, 4>(k, A, lda, B + j * ldb, ldb, C + j, ldc);
  for (; j < n; ++j) nt_tile<T, V, MR, 1>(k, A, lda, B + j * ldb, ldb, C + j, ldc);
}

template <class T, template <class> class V>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* A,
             std::size_t lda, const T* B, std::size_t ldb, T* C,
             std::size_t ldc) {
  constexpr std::size_t MR = V<T>::nt_rows;
  std::size_t i = 0;
  for (; i + MR <= m; i += MR)
    nt_row_block<T, V, MR>(n, k, A + i * lda, lda, B, ldb, C + i * ldc, ldc);
  for (; i < m; ++i)
    nt_row_block<T, V, 1>(n, k, A + i * lda, lda, B, ldb, C + i * ldc, ldc);
}

// ---- gemm_tn: C += A^T*B, accumulating over i ascending. Blocked over i
// with C reloaded per block; load/store round-trips keep the per-element
// chain identical to the scalar reference. ----

template <class T, template <class> class V, std::size_t MR>
void tn_tile(std::size_t i0, std::size_t i1, std::size_t n, const T* A,
             std::size_t lda, const T* B, std::size_t ldb, T* C,
             std::size_t ldc) {
  using v = V<T>;
  constexpr std::size_t NR = 2 * v::width;
  std::size_t j = 0;
  for (; j + NR <= n; j += NR) {
    typename v::reg acc[MR][2];
    for (std::size_t r = 0; r < MR; ++r) {
      acc[r][0] = v::load(C + r * ldc + j);
      acc[r][1] = v::load(C + r * ldc + j + v::width);
    }
    for (std::size_t i = i0; i < i1; ++i) {
      const auto b0 = v::load(B + i * ldb + j);
      const auto b1 = v::load(B + i * ldb + j + v::width);
      for (std::size_t r = 0; r < MR; ++r) {
        const auto a = v::bcast(A[i * lda + r]);
        acc[r][0] = v::fmadd(a, b0, acc[r][0]);
        acc[r][1] = v::fmadd(a, b1, acc[r][1]);
      }
    }
    for (std::size_t r = 0; r < MR; ++r) {
      v::store(C + r * ldc + j, acc[r][0]);
      v::store(C + r * ldc + j + v::width, acc[r][1]);
    }
  }
  for (; j + v::width <= n; j += v::width) {
    typename v::reg acc[MR];
    for (std::size_t r = 0; r < MR; ++r) acc[r] = v::load(C + r * ldc + j);
    for (std::size_t i = i0; i < i1; ++i) {
      const auto b0 = v::load(B + i * ldb + j);
      for (std::size_t r = 0; r < MR; ++r)
        acc[r] = v::fmadd(v::bcast(A[i * lda + r]), b0, acc[r]);
    }
    for (std::size_t r = 0; r < MR; ++r) v::store(C + r * ldc + j, acc[r]);
  }
  if constexpr (v::has_mask) {
    if (j < n) {
      const auto mk = v::tail_mask(n - j);
      typename v::reg acc[MR];
      for (std::size_t r = 0; r < MR; ++r)
        acc[r] = v::loadm(C + r * ldc + j, mk);
      for (std::size_t i = i0; i < i1; ++i) {
        const auto b0 = v::loadm(B + i * ldb + j, mk);
        for (std::size_t r = 0; r < MR; ++r)
          acc[r] = v::fmadd(v::bcast(A[i * lda + r]), b0, acc[r]);
      }
      for (std::size_t r = 0; r < MR; ++r)
        v::storem(C + r * ldc + j, acc[r], mk);
    }
  } else {
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < MR; ++r) {
        T acc = C[r * ldc + j];
        for (std::size_t i = i0; i < i1; ++i)
          acc = std::fma(A[i * lda + r], B[i * ldb + j], acc);
        C[r * ldc + j] = acc;
      }
    }
  }
}

template <class T, template <class> class V>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* A,
             std::size_t lda, const T* B, std::size_t ldb, T* C,
             std::size_t ldc) {
  constexpr std::size_t IC = 256;  // i-block, keeps A/B slices in L2
  for (std::size_t i0 = 0; i0 < m; i0 += IC) {
    const std::size_t i1 = i0 < m - (m % IC) ? i0 + IC : m;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4)
      tn_tile<T, V, 4>(i0, i1, n, A + p, lda, B, ldb, C + p * ldc, ldc);
    for (; p < k; ++p)
      tn_tile<T, V, 1>(i0, i1, n, A + p, lda, B, ldb, C + p * ldc, ldc);
  }
}


template <class T, template <class> class V>
Ops<T> make_ops() {
  return Ops<T>{add<T, V>,     sub<T, V>,     mul<T, V>,
                scale<T, V>,   axpy<T, V>,    dot<T, V>,
                sum<T, V>,     sum_sq<T, V>,  gemm_nn<T, V>,
                gemm_nt<T, V>, gemm_tn<T, V>};
}

}  // namespace gpaslab::kern::simd
