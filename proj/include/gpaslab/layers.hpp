#pragma once

// Transformer building blocks: the GPAS gate and its no-stop-gradient
// ablation, RMS normalization, causal multi-head attention with rotary
// embeddings, SwiGLU FFN, and (scaled) token embedding.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gpaslab/ops.hpp"
#include "gpaslab/tensor.hpp"

namespace gpaslab::layers {

using ad::Shape;
using ad::Tensor;

// ------------------------------------------------------------ gate activation

enum class ActKind { Identity, ReLU, LeakyReLU, Tanh, SiLU, ScaledSiLU };

struct GateActivation {
  ActKind kind = ActKind::SiLU;
  double beta = 8.0;        // ScaledSiLU only
  double slope = 0.01;      // LeakyReLU only

  template <class T>
  T operator()(T a) const {
    switch (kind) {
      case ActKind::Identity: return a;
      case ActKind::ReLU: return a > T(0) ? a : T(0);
      case ActKind::LeakyReLU: return a > T(0) ? a : T(slope) * a;
      case ActKind::Tanh: return std::tanh(a);
      case ActKind::SiLU: return a * ad::detail::sigmoid_v(a);
      case ActKind::ScaledSiLU: return a * ad::detail::sigmoid_v(T(beta) * a);
    }
    return a;
  }

  template <class T>
  T deriv(T a) const {
    switch (kind) {
      case ActKind::Identity: return T(1);
      case ActKind::ReLU: return a > T(0) ? T(1) : T(0);
      case ActKind::LeakyReLU: return a > T(0) ? T(1) : T(slope);
      case ActKind::Tanh: {
        const T t = std::tanh(a);
        return T(1) - t * t;
      }
      case ActKind::SiLU: {
        const T s = ad::detail::sigmoid_v(a);
        return s * (T(1) + a * (T(1) - s));
      }
      case ActKind::ScaledSiLU: {
        const T s = ad::detail::sigmoid_v(T(beta) * a);
        return s + a * T(beta) * s * (T(1) - s);
      }
    }
    return T(1);
  }
};

inline const char* act_name(ActKind k) {
  switch (k) {
    case ActKind::Identity: return "identity";
    case ActKind::ReLU: return "relu";
    case ActKind::LeakyReLU: return "leaky_relu";
    case ActKind::Tanh: return "tanh";
    case ActKind::SiLU: return "silu";
    case ActKind::ScaledSiLU: return "scaled_silu";
  }
  return "?";
}

// ------------------------------------------------------------------ GpasGate

// One learnable scalar per layer, shared by that layer's attention and FFN
// sub-layers. grad_clip caps the L2 norm of alpha's gradient per step.
template <class T>
struct GpasGate {
  Tensor<T> alpha;
  GateActivation activation;
  bool learnable = true;
  std::optional<T> grad_clip;

  static GpasGate make(T alpha0 = T(0), GateActivation act = {},
                       bool learnable = true,
                       std::optional<T> clip = std::nullopt) {
    GpasGate g;
    g.alpha = Tensor<T>::scalar(alpha0);
    if (learnable) g.alpha.set_requires_grad();
    g.activation = act;
    g.learnable = learnable;
    g.grad_clip = clip;
    return g;
  }

  T scale() const { return T(1) - activation(alpha.item()); }
};

namespace detail {

// Shared forward for both GPAS variants: y = (1 - Act(alpha)) * x, computed
// as a bitwise copy when Act(alpha) == 0 so that a zero gate is a true no-op.
template <class T>
Tensor<T> gpas_forward(const Tensor<T>& x, T s_act) {
  if (s_act == T(0)) return Tensor<T>::from(x.shape(), x.values());
  auto out = Tensor<T>::zeros(x.shape());
  kern::ops<T>().scale(T(1) - s_act, x.values().data(), out.values().data(),
                       x.size());
  return out;
}

}  // namespace detail

// Eq.-(2)/(11) GPAS block: forward scales by (1 - Act(alpha)); backward
// passes the upstream gradient through unchanged (Jacobian w.r.t. x is I)
// because the scaling term sits under stop_gradient. grad(alpha) =
// -Act'(alpha) * <x, upstream>.
template <class T>
Tensor<T> gpas_apply(const Tensor<T>& x, GpasGate<T>& gate) {
  const T a = gate.alpha.item();
  const T s_act = T(gate.activation(a));
  auto out = detail::gpas_forward(x, s_act);
  if (ad::detail::tracing<T>({&x, &gate.alpha})) {
    auto xd = x.data();
    auto alpd = gate.alpha.data();
    auto od = out.data();
    const T dact = T(gate.activation.deriv(a));
    ad::detail::record(out, [xd, alpd, od, dact] {
      if (xd->requires_grad)
        kern::ops<T>().add(xd->grad.data(), od->grad.data(), xd->grad.data(),
                           od->grad.size());
      if (alpd->requires_grad)
        alpd->grad[0] -= dact * kern::ops<T>().dot(xd->value.data(),
                                                   od->grad.data(),
                                                   od->grad.size());
    });
  }
  return out;
}

// Eq.-(12) ablation without stop_gradient: identical forward, but the
// gradient w.r.t. x is scaled by (1 - Act(alpha)).
template <class T>
Tensor<T> gpas_apply_naive(const Tensor<T>& x, GpasGate<T>& gate) {
  const T a = gate.alpha.item();
  const T s_act = T(gate.activation(a));
  auto out = detail::gpas_forward(x, s_act);
  if (ad::detail::tracing<T>({&x, &gate.alpha})) {
    auto xd = x.data();
    auto alpd = gate.alpha.data();
    auto od = out.data();
    const T dact = T(gate.activation.deriv(a));
    ad::detail::record(out, [xd, alpd, od, dact, s_act] {
      if (xd->requires_grad)
        kern::ops<T>().axpy(T(1) - s_act, od->grad.data(), xd->grad.data(),
                            od->grad.size());
      if (alpd->requires_grad)
        alpd->grad[0] -= dact * kern::ops<T>().dot(xd->value.data(),
                                                   od->grad.data(),
                                                   od->grad.size());
    });
  }
  return out;
}

// ---------------------------------------------------------------- parameters

template <class T>
struct RmsNormParams {
  Tensor<T> gain;
  T epsilon = T(1e-6);

  static RmsNormParams make(std::size_t d_model, T eps = T(1e-6)) {
    RmsNormParams p;
    p.gain = Tensor<T>::full({d_model}, T(1));
    p.gain.set_requires_grad();
    p.epsilon = eps;
    return p;
  }
};

template <class T>
struct AttentionParams {
  Tensor<T> Wq, Wk, Wv, Wo;
  std::size_t n_heads = 1;
  T rope_base = T(10000);
};

template <class T>
struct FfnParams {
  Tensor<T> W_gate, W_up, W_down;
};

template <class T>
struct EmbeddingParams {
  Tensor<T> table;  // vocab x d_model
  bool scale_embed = true;
};

// ------------------------------------------------------------------- forward

template <class T>
Tensor<T> rmsnorm(const Tensor<T>& x, const RmsNormParams<T>& p) {
  return ad::rmsnorm(x, p.gain, p.epsilon);
}

// Causal multi-head attention with RoPE on q and k, on (batch, seq, d_model).
template <class T>
Tensor<T> attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  const auto& s = x.shape();
  if (s.size() != 3) throw ad::ShapeError("attention: x must be (B,S,D)");
  const std::size_t D = s[2];
  if (D % p.n_heads != 0)
    throw ad::ShapeError("attention: d_model not divisible by n_heads");
  const std::size_t dh = D / p.n_heads;

  auto q = ad::rope(ad::split_heads(ad::matmul(x, p.Wq), p.n_heads),
                    p.rope_base);
  auto k = ad::rope(ad::split_heads(ad::matmul(x, p.Wk), p.n_heads),
                    p.rope_base);
  auto v = ad::split_heads(ad::matmul(x, p.Wv), p.n_heads);

  auto scores = ad::scale_const(ad::matmul(q, ad::transpose_last(k)),
                                T(1) / std::sqrt(T(dh)));
  auto probs = ad::causal_softmax(scores);
  auto ctx = ad::merge_heads(ad::matmul(probs, v));
  return ad::matmul(ctx, p.Wo);
}

// (SiLU(x W_gate) ∘ (x W_up)) W_down
template <class T>
Tensor<T> ffn_swiglu(const Tensor<T>& x, const FfnParams<T>& p) {
  auto g = ad::silu(ad::matmul(x, p.W_gate));
  auto u = ad::matmul(x, p.W_up);
  return ad::matmul(ad::mul(g, u), p.W_down);
}

template <class T>
Tensor<T> embed(const std::vector<std::int32_t>& tokens, Shape lead,
                const EmbeddingParams<T>& p) {
  auto e = ad::embedding(p.table, tokens, std::move(lead));
  if (!p.scale_embed) return e;
  return ad::scale_const(e, std::sqrt(T(p.table.shape()[1])));
}

}  // namespace gpaslab::layers
