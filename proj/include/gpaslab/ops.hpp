#pragma once

// Differentiable primitives. Each op computes its value through the
// dispatched kernels and, when tracing, records a backward closure that
// accumulates into the input gradients. Elementwise ops broadcast only a
// 1-element tensor against a tensor; matmul broadcasts a 2-D weight over
// leading batch dimensions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "gpaslab/tensor.hpp"

namespace gpaslab::ad {

namespace detail {

template <class T>
const kern::Ops<T>& K() {
  return kern::ops<T>();
}

// Rows/cols of the trailing matrix, batch count of the leading dims.
inline std::size_t lead_count(const Shape& s, std::size_t trailing) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------- add/sub/mul

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool as = a.size() == 1, bs = b.size() == 1;
  if (!(a.size() == b.size() || as || bs)) shape_fail("add", a.shape(), b.shape());
  const Tensor<T>& big = (bs || a.size() == b.size()) ? a : b;
  auto out = Tensor<T>::zeros(big.shape());
  const std::size_t n = out.size();
  if (a.size() == b.size())
    detail::K<T>().add(a.values().data(), b.values().data(),
                       out.values().data(), n);
  else if (bs) {
    const T c = b.values()[0];
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + c;
  } else {
    const T c = a.values()[0];
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = c + b.values()[i];
  }
  if (detail::tracing<T>({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    detail::record(out, [ad, bd, od] {
      const auto& g = od->grad;
      if (ad->requires_grad) {
        if (ad->grad.size() == g.size())
          detail::K<T>().add(ad->grad.data(), g.data(), ad->grad.data(),
                             g.size());
        else
          ad->grad[0] += detail::K<T>().sum(g.data(), g.size());
      }
      if (bd->requires_grad) {
        if (bd->grad.size() == g.size())
          detail::K<T>().add(bd->grad.data(), g.data(), bd->grad.data(),
                             g.size());
        else
          bd->grad[0] += detail::K<T>().sum(g.data(), g.size());
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const bool as = a.size() == 1, bs = b.size() == 1;
  if (!(a.size() == b.size() || as || bs)) shape_fail("sub", a.shape(), b.shape());
  const Tensor<T>& big = (bs || a.size() == b.size()) ? a : b;
  auto out = Tensor<T>::zeros(big.shape());
  const std::size_t n = out.size();
  if (a.size() == b.size())
    detail::K<T>().sub(a.values().data(), b.values().data(),
                       out.values().data(), n);
  else if (bs) {
    const T c = b.values()[0];
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - c;
  } else {
    const T c = a.values()[0];
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = c - b.values()[i];
  }
  if (detail::tracing<T>({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    detail::record(out, [ad, bd, od] {
      const auto& g = od->grad;
      if (ad->requires_grad) {
        if (ad->grad.size() == g.size())
          detail::K<T>().add(ad->grad.data(), g.data(), ad->grad.data(),
                             g.size());
        else
          ad->grad[0] += detail::K<T>().sum(g.data(), g.size());
      }
      if (bd->requires_grad) {
        if (bd->grad.size() == g.size())
          detail::K<T>().axpy(T(-1), g.data(), bd->grad.data(), g.size());
        else
          bd->grad[0] -= detail::K<T>().sum(g.data(), g.size());
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool as = a.size() == 1, bs = b.size() == 1;
  if (!(a.size() == b.size() || as || bs)) shape_fail("mul", a.shape(), b.shape());
  const Tensor<T>& big = (bs || a.size() == b.size()) ? a : b;
  auto out = Tensor<T>::zeros(big.shape());
  const std::size_t n = out.size();
  if (a.size() == b.size())
    detail::K<T>().mul(a.values().data(), b.values().data(),
                       out.values().data(), n);
  else if (bs)
    detail::K<T>().scale(b.values()[0], a.values().data(), out.values().data(),
                         n);
  else
    detail::K<T>().scale(a.values()[0], b.values().data(), out.values().data(),
                         n);
  if (detail::tracing<T>({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    detail::record(out, [ad, bd, od] {
      const auto& g = od->grad;
      const std::size_t n = g.size();
      if (ad->requires_grad) {
        if (ad->grad.size() == n && bd->value.size() == n) {
          for (std::size_t i = 0; i < n; ++i)
            ad->grad[i] = std::fma(g[i], bd->value[i], ad->grad[i]);
        } else if (ad->grad.size() == n) {  // b scalar
          detail::K<T>().axpy(bd->value[0], g.data(), ad->grad.data(), n);
        } else {  // a scalar
          ad->grad[0] +=
              detail::K<T>().dot(g.data(), bd->value.data(), n);
        }
      }
      if (bd->requires_grad) {
        if (bd->grad.size() == n && ad->value.size() == n) {
          for (std::size_t i = 0; i < n; ++i)
            bd->grad[i] = std::fma(g[i], ad->value[i], bd->grad[i]);
        } else if (bd->grad.size() == n) {  // a scalar
          detail::K<T>().axpy(ad->value[0], g.data(), bd->grad.data(), n);
        } else {  // b scalar
          bd->grad[0] +=
              detail::K<T>().dot(g.data(), ad->value.data(), n);
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale_const(const Tensor<T>& x, T c) {
  auto out = Tensor<T>::zeros(x.shape());
  detail::K<T>().scale(c, x.values().data(), out.values().data(), x.size());
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, c] {
      if (xd->requires_grad)
        detail::K<T>().axpy(c, od->grad.data(), xd->grad.data(),
                            od->grad.size());
    });
  }
  return out;
}

// -------------------------------------------------------------------- matmul

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_fail("matmul", sa, sb);
  const std::size_t m = sa[sa.size() - 2], kk = sa.back();
  const std::size_t kb = sb[sb.size() - 2], nn = sb.back();
  const bool shared_b = sb.size() == 2;
  if (kk != kb) shape_fail("matmul", sa, sb);
  const std::size_t nb = detail::lead_count(sa, 2);
  if (!shared_b && detail::lead_count(sb, 2) != nb) shape_fail("matmul", sa, sb);

  Shape so(sa.begin(), sa.end() - 1);
  so.push_back(nn);
  auto out = Tensor<T>::zeros(std::move(so));
  const auto& ops = detail::K<T>();
  for (std::size_t i = 0; i < nb; ++i)
    ops.gemm_nn(m, nn, kk, a.values().data() + i * m * kk, kk,
                b.values().data() + (shared_b ? 0 : i * kk * nn), nn,
                out.values().data() + i * m * nn, nn);
  if (detail::tracing<T>({&a, &b})) {
    auto adp = a.data(), bdp = b.data(), odp = out.data();
    detail::record(out, [adp, bdp, odp, m, nn, kk, nb, shared_b] {
      const auto& ops = detail::K<T>();
      for (std::size_t i = 0; i < nb; ++i) {
        const T* go = odp->grad.data() + i * m * nn;
        const T* bv = bdp->value.data() + (shared_b ? 0 : i * kk * nn);
        const T* av = adp->value.data() + i * m * kk;
        if (adp->requires_grad)
          ops.gemm_nt(m, kk, nn, go, nn, bv, nn,
                      adp->grad.data() + i * m * kk, kk);
        if (bdp->requires_grad)
          ops.gemm_tn(m, nn, kk, av, kk, go, nn,
                      bdp->grad.data() + (shared_b ? 0 : i * kk * nn), nn);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reshuffles

template <class T>
Tensor<T> transpose_last(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose_last: rank < 2");
  const std::size_t r = s[s.size() - 2], c = s.back();
  const std::size_t nb = detail::lead_count(s, 2);
  Shape so = s;
  std::swap(so[so.size() - 2], so.back());
  auto out = Tensor<T>::zeros(std::move(so));
  for (std::size_t b = 0; b < nb; ++b) {
    const T* src = x.values().data() + b * r * c;
    T* dst = out.values().data() + b * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, r, c, nb] {
      if (!xd->requires_grad) return;
      for (std::size_t b = 0; b < nb; ++b) {
        const T* g = od->grad.data() + b * r * c;
        T* dg = xd->grad.data() + b * r * c;
        for (std::size_t j = 0; j < c; ++j)
          for (std::size_t i = 0; i < r; ++i) dg[i * c + j] += g[j * r + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
  if (numel(s) != x.size()) shape_fail("reshape", x.shape(), s);
  auto out = Tensor<T>::from(std::move(s), x.values());
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od] {
      if (xd->requires_grad)
        detail::K<T>().add(xd->grad.data(), od->grad.data(), xd->grad.data(),
                           od->grad.size());
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size() || sa.empty()) shape_fail("concat", sa, sb);
  for (std::size_t i = 0; i + 1 < sa.size(); ++i)
    if (sa[i] != sb[i]) shape_fail("concat", sa, sb);
  const std::size_t la = sa.back(), lb = sb.back();
  const std::size_t rows = detail::lead_count(sa, 1);
  Shape so = sa;
  so.back() = la + lb;
  auto out = Tensor<T>::zeros(std::move(so));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.values().data() + r * la, la,
                out.values().data() + r * (la + lb));
    std::copy_n(b.values().data() + r * lb, lb,
                out.values().data() + r * (la + lb) + la);
  }
  if (detail::tracing<T>({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    detail::record(out, [ad, bd, od, rows, la, lb] {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = od->grad.data() + r * (la + lb);
        if (ad->requires_grad)
          detail::K<T>().add(ad->grad.data() + r * la, g,
                             ad->grad.data() + r * la, la);
        if (bd->requires_grad)
          detail::K<T>().add(bd->grad.data() + r * lb, g + la,
                             bd->grad.data() + r * lb, lb);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
  const auto& s = x.shape();
  if (s.empty() || start + len > s.back())
    throw ShapeError("slice_last: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " +
                     shape_str(s));
  const std::size_t d = s.back();
  const std::size_t rows = detail::lead_count(s, 1);
  Shape so = s;
  so.back() = len;
  auto out = Tensor<T>::zeros(std::move(so));
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.values().data() + r * d + start, len,
                out.values().data() + r * len);
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, rows, d, start, len] {
      if (!xd->requires_grad) return;
      for (std::size_t r = 0; r < rows; ++r)
        detail::K<T>().add(xd->grad.data() + r * d + start,
                           od->grad.data() + r * len,
                           xd->grad.data() + r * d + start, len);
    });
  }
  return out;
}

// (B,S,H*dh) -> (B,H,S,dh)
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[2] % heads != 0)
    throw ShapeError("split_heads: bad shape " + shape_str(s));
  const std::size_t B = s[0], S = s[1], D = s[2], dh = D / heads;
  auto out = Tensor<T>::zeros({B, heads, S, dh});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < S; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(x.values().data() + (b * S + t) * D + h * dh, dh,
                    out.values().data() + ((b * heads + h) * S + t) * dh);
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, B, S, D, heads, dh] {
      if (!xd->requires_grad) return;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < S; ++t)
          for (std::size_t h = 0; h < heads; ++h)
            detail::K<T>().add(
                xd->grad.data() + (b * S + t) * D + h * dh,
                od->grad.data() + ((b * heads + h) * S + t) * dh,
                xd->grad.data() + (b * S + t) * D + h * dh, dh);
    });
  }
  return out;
}

// (B,H,S,dh) -> (B,S,H*dh)
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("merge_heads: bad shape " + shape_str(s));
  const std::size_t B = s[0], H = s[1], S = s[2], dh = s[3], D = H * dh;
  auto out = Tensor<T>::zeros({B, S, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < S; ++t)
        std::copy_n(x.values().data() + ((b * H + h) * S + t) * dh, dh,
                    out.values().data() + (b * S + t) * D + h * dh);
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, B, S, D, H, dh] {
      if (!xd->requires_grad) return;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t t = 0; t < S; ++t)
            detail::K<T>().add(
                xd->grad.data() + ((b * H + h) * S + t) * dh,
                od->grad.data() + (b * S + t) * D + h * dh,
                xd->grad.data() + ((b * H + h) * S + t) * dh, dh);
    });
  }
  return out;
}

// ------------------------------------------------------------------ reductions

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto out = Tensor<T>::scalar(detail::K<T>().sum(x.values().data(), x.size()));
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od] {
      if (!xd->requires_grad) return;
      const T g = od->grad[0];
      for (auto& v : xd->grad) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  const T n = T(x.size());
  auto out =
      Tensor<T>::scalar(detail::K<T>().sum(x.values().data(), x.size()) / n);
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, n] {
      if (!xd->requires_grad) return;
      const T g = od->grad[0] / n;
      for (auto& v : xd->grad) v += g;
    });
  }
  return out;
}

// Population variance over the last axis; output drops that axis.
template <class T>
Tensor<T> variance_last(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.empty()) throw ShapeError("variance_last: rank 0");
  const std::size_t d = s.back();
  const std::size_t rows = detail::lead_count(s, 1);
  Shape so(s.begin(), s.end() - 1);
  if (so.empty()) so.push_back(1);
  auto out = Tensor<T>::zeros(std::move(so));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.values().data() + r * d;
    const T mean = detail::K<T>().sum(row, d) / T(d);
    const T msq = detail::K<T>().sum_sq(row, d) / T(d);
    out.values()[r] = msq - mean * mean;
  }
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, rows, d] {
      if (!xd->requires_grad) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd->value.data() + r * d;
        const T mean = detail::K<T>().sum(row, d) / T(d);
        const T g = od->grad[r] * T(2) / T(d);
        T* dg = xd->grad.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) dg[i] += g * (row[i] - mean);
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------ elementwise

namespace detail {

// dfdx receives (x_i, y_i).
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F&& f, DF&& dfdx) {
  auto out = Tensor<T>::zeros(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = f(x.values()[i]);
  if (tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    record(out, [xd, od, dfdx] {
      if (!xd->requires_grad) return;
      const std::size_t n = od->grad.size();
      for (std::size_t i = 0; i < n; ++i)
        xd->grad[i] += od->grad[i] * dfdx(xd->value[i], od->value[i]);
    });
  }
  return out;
}

template <class T>
T sigmoid_v(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                   : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

template <class T>
Tensor<T> exp_(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log_(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <class T>
Tensor<T> sqrt_(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::sqrt(v); },
      [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> pow_const(const Tensor<T>& x, T p) {
  return detail::unary(
      x, [p](T v) { return std::pow(v, p); },
      [p](T v, T) { return p * std::pow(v, p - T(1)); });
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::sigmoid_v(v); },
      [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * detail::sigmoid_v(v); },
      [](T v, T) {
        const T s = detail::sigmoid_v(v);
        return s * (T(1) + v * (T(1) - s));
      });
}
template <class T>
Tensor<T> scaled_silu(const Tensor<T>& x, T beta) {
  return detail::unary(
      x, [beta](T v) { return v * detail::sigmoid_v(beta * v); },
      [beta](T v, T) {
        const T s = detail::sigmoid_v(beta * v);
        return s + v * beta * s * (T(1) - s);
      });
}
template <class T>
Tensor<T> tanh_(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return detail::unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

// -------------------------------------------------------------------- softmax

template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.empty()) throw ShapeError("softmax_last: rank 0");
  const std::size_t d = s.back();
  const std::size_t rows = detail::lead_count(s, 1);
  auto out = Tensor<T>::zeros(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * d;
    T* o = out.values().data() + r * d;
    T mx = in[0];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, in[i]);
    T z = 0;
    for (std::size_t i = 0; i < d; ++i) {
      o[i] = std::exp(in[i] - mx);
      z += o[i];
    }
    detail::K<T>().scale(T(1) / z, o, o, d);
  }
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, rows, d] {
      if (!xd->requires_grad) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* p = od->value.data() + r * d;
        const T* g = od->grad.data() + r * d;
        const T dotgp = detail::K<T>().dot(g, p, d);
        T* dx = xd->grad.data() + r * d;
        for (std::size_t i = 0; i < d; ++i)
          dx[i] += p[i] * (g[i] - dotgp);
      }
    });
  }
  return out;
}

// Causal row softmax on (..., S, S): row i attends to columns j <= i; the
// strictly-upper triangle of the output is zero.
template <class T>
Tensor<T> causal_softmax(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 2 || s[s.size() - 2] != s.back())
    throw ShapeError("causal_softmax: needs (...,S,S), got " + shape_str(s));
  const std::size_t S = s.back();
  const std::size_t nb = detail::lead_count(s, 2);
  auto out = Tensor<T>::zeros(s);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t i = 0; i < S; ++i) {
      const T* in = x.values().data() + (b * S + i) * S;
      T* o = out.values().data() + (b * S + i) * S;
      const std::size_t w = i + 1;
      T mx = in[0];
      for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, in[j]);
      T z = 0;
      for (std::size_t j = 0; j < w; ++j) {
        o[j] = std::exp(in[j] - mx);
        z += o[j];
      }
      detail::K<T>().scale(T(1) / z, o, o, w);
    }
  }
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, nb, S] {
      if (!xd->requires_grad) return;
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t off = (b * S + i) * S;
          const T* p = od->value.data() + off;
          const T* g = od->grad.data() + off;
          const std::size_t w = i + 1;
          const T dotgp = detail::K<T>().dot(g, p, w);
          T* dx = xd->grad.data() + off;
          for (std::size_t j = 0; j < w; ++j) dx[j] += p[j] * (g[j] - dotgp);
        }
      }
    });
  }
  return out;
}

// -------------------------------------------------------------- stop gradient

// Identity forward (bit-identical copy); no gradient flows back.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>::from(x.shape(), x.values());
}

// ------------------------------------------------------------------- rmsnorm

// y = gain * x / sqrt(mean(x^2) + eps), normalized over the last axis.
template <class T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const auto& s = x.shape();
  if (s.empty() || gain.size() != s.back()) shape_fail("rmsnorm", s, gain.shape());
  const std::size_t d = s.back();
  const std::size_t rows = detail::lead_count(s, 1);
  auto out = Tensor<T>::zeros(s);
  std::vector<T> rinv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * d;
    const T ms = detail::K<T>().sum_sq(in, d) / T(d);
    rinv[r] = T(1) / std::sqrt(ms + eps);
    T* o = out.values().data() + r * d;
    for (std::size_t i = 0; i < d; ++i)
      o[i] = gain.values()[i] * in[i] * rinv[r];
  }
  if (detail::tracing<T>({&x, &gain})) {
    auto xd = x.data(), gd = gain.data(), od = out.data();
    detail::record(out, [xd, gd, od, rows, d, rinv = std::move(rinv)] {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xv = xd->value.data() + r * d;
        const T* u = od->grad.data() + r * d;
        const T ri = rinv[r];
        if (xd->requires_grad) {
          T acc = 0;  // sum_j u_j * gain_j * x_j
          for (std::size_t j = 0; j < d; ++j)
            acc = std::fma(u[j] * gd->value[j], xv[j], acc);
          const T c = acc * ri * ri * ri / T(d);
          T* dx = xd->grad.data() + r * d;
          for (std::size_t i = 0; i < d; ++i)
            dx[i] += u[i] * gd->value[i] * ri - xv[i] * c;
        }
        if (gd->requires_grad) {
          for (std::size_t i = 0; i < d; ++i)
            gd->grad[i] = std::fma(u[i] * ri, xv[i], gd->grad[i]);
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------- cross entropy

// Mean token-level negative log-likelihood. Logits (..., V) are flattened to
// N rows; targets holds N class indices.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<std::int32_t>& targets) {
  const auto& s = logits.shape();
  if (s.empty()) throw ShapeError("cross_entropy: rank 0 logits");
  const std::size_t V = s.back();
  const std::size_t N = detail::lead_count(s, 1);
  if (targets.size() != N)
    throw ShapeError("cross_entropy: " + std::to_string(N) + " rows vs " +
                     std::to_string(targets.size()) + " targets");
  T total = 0;
  for (std::size_t r = 0; r < N; ++r) {
    const T* row = logits.values().data() + r * V;
    T mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[std::size_t(targets[r])];
  }
  auto out = Tensor<T>::scalar(total / T(N));
  if (detail::tracing<T>({&logits})) {
    auto ld = logits.data(), od = out.data();
    detail::record(out, [ld, od, targets, N, V] {
      if (!ld->requires_grad) return;
      const T g = od->grad[0] / T(N);
      for (std::size_t r = 0; r < N; ++r) {
        const T* row = ld->value.data() + r * V;
        T* dl = ld->grad.data() + r * V;
        T mx = row[0];
        for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        T z = 0;
        for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < V; ++j)
          dl[j] += g * std::exp(row[j] - mx) / z;
        dl[std::size_t(targets[r])] -= g;
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------- embedding

// Row gather from table (V, d); ids are flattened token indices and `lead`
// their shape; output is lead + {d}. Backward scatter-adds into the table.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int32_t>& ids,
                    Shape lead) {
  const auto& s = table.shape();
  if (s.size() != 2) throw ShapeError("embedding: table must be 2-D");
  const std::size_t V = s[0], d = s[1];
  if (numel(lead) != ids.size())
    throw ShapeError("embedding: lead shape/ids mismatch");
  Shape so = std::move(lead);
  so.push_back(d);
  auto out = Tensor<T>::zeros(std::move(so));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto id = std::size_t(ids[r]);
    if (id >= V) throw ShapeError("embedding: id out of range");
    std::copy_n(table.values().data() + id * d, d,
                out.values().data() + r * d);
  }
  if (detail::tracing<T>({&table})) {
    auto td = table.data(), od = out.data();
    detail::record(out, [td, od, ids, d] {
      if (!td->requires_grad) return;
      for (std::size_t r = 0; r < ids.size(); ++r)
        detail::K<T>().add(td->grad.data() + std::size_t(ids[r]) * d,
                           od->grad.data() + r * d,
                           td->grad.data() + std::size_t(ids[r]) * d, d);
    });
  }
  return out;
}

// ---------------------------------------------------------------------- rope

// Rotary position embedding on (B, H, S, dh): consecutive pairs (2i, 2i+1)
// at position t are rotated by t * base^(-2i/dh). The rotation is orthogonal,
// so the backward pass applies the inverse rotation to the upstream gradient.
template <class T>
Tensor<T> rope(const Tensor<T>& x, T base) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[3] % 2 != 0)
    throw ShapeError("rope: needs (B,H,S,dh) with even dh, got " +
                     shape_str(s));
  const std::size_t B = s[0], H = s[1], S = s[2], dh = s[3];
  std::vector<T> cs(S * dh / 2), sn(S * dh / 2);
  for (std::size_t t = 0; t < S; ++t)
    for (std::size_t i = 0; i < dh / 2; ++i) {
      const T theta =
          T(t) * std::pow(base, -T(2 * i) / T(dh));
      cs[t * dh / 2 + i] = std::cos(theta);
      sn[t * dh / 2 + i] = std::sin(theta);
    }
  auto out = Tensor<T>::zeros(s);
  for (std::size_t bh = 0; bh < B * H; ++bh)
    for (std::size_t t = 0; t < S; ++t) {
      const T* in = x.values().data() + (bh * S + t) * dh;
      T* o = out.values().data() + (bh * S + t) * dh;
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const T c = cs[t * dh / 2 + i], sv = sn[t * dh / 2 + i];
        o[2 * i] = in[2 * i] * c - in[2 * i + 1] * sv;
        o[2 * i + 1] = in[2 * i] * sv + in[2 * i + 1] * c;
      }
    }
  if (detail::tracing<T>({&x})) {
    auto xd = x.data(), od = out.data();
    detail::record(out, [xd, od, B, H, S, dh, cs = std::move(cs),
                         sn = std::move(sn)] {
      if (!xd->requires_grad) return;
      for (std::size_t bh = 0; bh < B * H; ++bh)
        for (std::size_t t = 0; t < S; ++t) {
          const T* g = od->grad.data() + (bh * S + t) * dh;
          T* dx = xd->grad.data() + (bh * S + t) * dh;
          for (std::size_t i = 0; i < dh / 2; ++i) {
            const T c = cs[t * dh / 2 + i], sv = sn[t * dh / 2 + i];
            dx[2 * i] += g[2 * i] * c + g[2 * i + 1] * sv;
            dx[2 * i + 1] += -g[2 * i] * sv + g[2 * i + 1] * c;
          }
        }
    });
  }
  return out;
}

// ------------------------------------------------------- finite differences

// Central-difference gradient of a scalar-valued function with respect to x.
// `f` must recompute the forward pass from the current contents of x on each
// call (it is invoked with gradient recording disabled).
template <class T, class F>
std::vector<T> finite_difference_grad(F&& f, Tensor<T>& x,
                                      T eps = T(1e-6)) {
  NoGradGuard<T> off;
  std::vector<T> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x.values()[i];
    const T h = eps * (T(1) + std::abs(orig));
    x.values()[i] = orig + h;
    const T fp = f();
    x.values()[i] = orig - h;
    const T fm = f();
    x.values()[i] = orig;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

}  // namespace gpaslab::ad
