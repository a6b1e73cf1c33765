// AVX-512F vector traits for the shared SIMD kernel bodies. This TU is the
// only one compiled with -mavx512f.

#include <immintrin.h>

#include "kernels_simd.hpp"

namespace gpaslab::kern::avx512 {
namespace {

template <class T>
struct V;

template <>
struct V<double> {
  using reg = __m512d;
  static constexpr std::size_t width = 8;
  static constexpr std::size_t nt_rows = 4;
  static constexpr bool has_mask = true;
  using mask = __mmask8;
  static mask tail_mask(std::size_t n) { return mask((1u << n) - 1u); }
  static reg loadm(const double* p, mask m) {
    return _mm512_maskz_loadu_pd(m, p);
  }
  static void storem(double* p, reg r, mask m) {
    _mm512_mask_storeu_pd(p, m, r);
  }
  static reg load(const double* p) { return _mm512_loadu_pd(p); }
  static void store(double* p, reg r) { _mm512_storeu_pd(p, r); }
  static reg bcast(double x) { return _mm512_set1_pd(x); }
  static reg zero() { return _mm512_setzero_pd(); }
  static reg fmadd(reg a, reg b, reg c) { return _mm512_fmadd_pd(a, b, c); }
  static reg add(reg a, reg b) { return _mm512_add_pd(a, b); }
  static reg sub(reg a, reg b) { return _mm512_sub_pd(a, b); }
  static reg mul(reg a, reg b) { return _mm512_mul_pd(a, b); }
  static double hsum(reg r) { return _mm512_reduce_add_pd(r); }
};

template <>
struct V<float> {
  using reg = __m512;
  static constexpr std::size_t width = 16;
  static constexpr std::size_t nt_rows = 4;
  static constexpr bool has_mask = true;
  using mask = __mmask16;
  static mask tail_mask(std::size_t n) { return mask((1u << n) - 1u); }
  static reg loadm(const float* p, mask m) {
    return _mm512_maskz_loadu_ps(m, p);
  }
  static void storem(float* p, reg r, mask m) {
    _mm512_mask_storeu_ps(p, m, r);
  }
  static reg load(const float* p) { return _mm512_loadu_ps(p); }
  static void store(float* p, reg r) { _mm512_storeu_ps(p, r); }
  static reg bcast(float x) { return _mm512_set1_ps(x); }
  static reg zero() { return _mm512_setzero_ps(); }
  static reg fmadd(reg a, reg b, reg c) { return _mm512_fmadd_ps(a, b, c); }
  static reg add(reg a, reg b) { return _mm512_add_ps(a, b); }
  static reg sub(reg a, reg b) { return _mm512_sub_ps(a, b); }
  static reg mul(reg a, reg b) { return _mm512_mul_ps(a, b); }
  static float hsum(reg r) { return _mm512_reduce_add_ps(r); }
};

}  // namespace

template <class T>
Ops<T> make_ops() {
  return simd::make_ops<T, V>();
}

template Ops<float> make_ops<float>();
template Ops<double> make_ops<double>();

}  // namespace gpaslab::kern::avx512
