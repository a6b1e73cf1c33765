#pragma once

// Dense arithmetic kernels behind the tensor engine. Every kernel has a
// scalar reference implementation and may have SIMD variants; the active
// set is chosen once at startup from CPU features. gemm_nn and gemm_tn
// accumulate in a fixed order (k resp. i ascending, FMA-rounded) so the
// scalar and SIMD variants agree bitwise; gemm_nt and dot use multiple
// accumulators and agree only to rounding.

#include <cstddef>
#include <string_view>

namespace gpaslab::kern {

template <class T>
struct Ops {
  void (*add)(const T*, const T*, T*, std::size_t);
  void (*sub)(const T*, const T*, T*, std::size_t);
  void (*mul)(const T*, const T*, T*, std::size_t);
  void (*scale)(T, const T*, T*, std::size_t);  // y = a*x
  void (*axpy)(T, const T*, T*, std::size_t);   // y += a*x
  T (*dot)(const T*, const T*, std::size_t);
  T (*sum)(const T*, std::size_t);
  T (*sum_sq)(const T*, std::size_t);
  // C (m x n) += A (m x k) * B (k x n), row-major, leading dims = row strides.
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* A,
                  std::size_t lda, const T* B, std::size_t ldb, T* C,
                  std::size_t ldc);
  // C (m x n) += A (m x k) * B^T, with B given as (n x k).
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* A,
                  std::size_t lda, const T* B, std::size_t ldb, T* C,
                  std::size_t ldc);
  // C (k x n) += A^T * B, with A given as (m x k), B as (m x n).
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* A,
                  std::size_t lda, const T* B, std::size_t ldb, T* C,
                  std::size_t ldc);
};

enum class Isa { Scalar, Avx2, Avx512 };

Isa active_isa();
std::string_view isa_name(Isa);

// Kernel set for the requested ISA; Scalar always works, the SIMD sets
// fall back to scalar when the CPU lacks support.
template <class T>
const Ops<T>& ops(Isa isa);

// The dispatched set (active_isa()).
template <class T>
const Ops<T>& ops();

}  // namespace gpaslab::kern
