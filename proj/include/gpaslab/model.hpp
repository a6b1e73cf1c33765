#pragma once

// Normalization schemes and model assembly: per-layer forward rules for
// Post-LN, DeepNorm, Pre-LN, Sandwich-LN, Mix-LN, and LNS, each with an
// optional GPAS gate, plus the full decoder forward pass.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpaslab/layers.hpp"
#include "gpaslab/ops.hpp"

namespace gpaslab::model {

using ad::Shape;
using ad::Tensor;
using layers::ActKind;
using layers::GateActivation;
using layers::GpasGate;

// ------------------------------------------------------------------- config

enum class Scheme { PostLN, DeepNorm, PreLN, SandwichLN, MixLN, LNS };
enum class GpasPosition { AfterSublayer, BeforeSublayer, AfterLayerNorm,
                          AfterModule };
enum class GpasVariant { StopGrad, Naive };

struct SchemeConfig {
  Scheme scheme = Scheme::PreLN;
  bool gpas_enabled = false;
  GpasPosition gpas_position = GpasPosition::AfterSublayer;
  GpasVariant gpas_variant = GpasVariant::StopGrad;
  GateActivation gate_activation;           // SiLU by default
  static constexpr std::size_t kMixDefault = std::size_t(-1);
  std::size_t mix_postln_layers = kMixDefault;  // unset = ceil(L/4)
  double deepnorm_alpha = 0;                // 0 = derive from L
  double deepnorm_beta = 0;

  // mix_postln_layers may equal L (degenerate all-Post partition used by
  // the equivalence tests) but never exceed it.
  void validate(std::size_t L) const {
    if (scheme == Scheme::MixLN && mix_postln_layers != kMixDefault &&
        mix_postln_layers > L)
      throw std::invalid_argument("mix_postln_layers must be <= n_layers");
    if (gpas_enabled && gpas_position != GpasPosition::AfterSublayer &&
        scheme != Scheme::PreLN)
      throw std::invalid_argument(
          "GPAS insertion-position ablations are Pre-LN only");
  }
};

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 6;
  std::size_t d_ff = 0;  // 0 = (8/3)*d_model rounded to a multiple of 8
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  double init_std = 0.02;
  bool scale_embed = true;
  SchemeConfig scheme;

  std::size_t ff_dim() const {
    if (d_ff) return d_ff;
    const std::size_t raw = (8 * d_model + 2) / 3;
    return ((raw + 7) / 8) * 8;
  }
  std::size_t mix_split() const {
    return scheme.mix_postln_layers == SchemeConfig::kMixDefault
               ? (n_layers + 3) / 4
               : scheme.mix_postln_layers;
  }
  double dn_alpha() const {
    return scheme.deepnorm_alpha > 0 ? scheme.deepnorm_alpha
                                     : std::pow(2.0 * double(n_layers), 0.25);
  }
  double dn_beta() const {
    return scheme.deepnorm_beta > 0 ? scheme.deepnorm_beta
                                    : std::pow(8.0 * double(n_layers), -0.25);
  }
};

// Does layer l (0-based) use the Post-LN rule under this config?
inline bool layer_is_post(const ModelConfig& cfg, std::size_t l) {
  switch (cfg.scheme.scheme) {
    case Scheme::PostLN:
    case Scheme::DeepNorm: return true;
    case Scheme::MixLN: return l < cfg.mix_split();
    default: return false;
  }
}

// Final RMSNorm before the head: Pre-family schemes only. Mix-LN carries it
// only when its Pre-LN portion is non-empty, so an all-Post partition is
// bitwise identical to Post-LN.
inline bool has_final_norm(const ModelConfig& cfg) {
  switch (cfg.scheme.scheme) {
    case Scheme::PreLN:
    case Scheme::SandwichLN:
    case Scheme::LNS: return true;
    case Scheme::MixLN: return cfg.mix_split() < cfg.n_layers;
    default: return false;
  }
}

// -------------------------------------------------------------------- model

template <class T>
struct LayerParams {
  layers::AttentionParams<T> attn;
  layers::FfnParams<T> ffn;
  layers::RmsNormParams<T> norm_attn;       // pre-norm (Pre family) or
                                            // post-residual norm (Post family)
  layers::RmsNormParams<T> norm_ffn;
  layers::RmsNormParams<T> norm_attn_post;  // Sandwich inner norms
  layers::RmsNormParams<T> norm_ffn_post;
  GpasGate<T> gate;
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
struct TransformerModel {
  ModelConfig cfg;
  layers::EmbeddingParams<T> embedding;
  std::vector<LayerParams<T>> layer;
  layers::RmsNormParams<T> final_norm;  // present only for Pre family
  Tensor<T> lm_head;

  // Every trainable tensor except the gates, in a fixed order.
  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    out.push_back({"embedding.table", embedding.table});
    for (std::size_t l = 0; l < layer.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& L = layer[l];
      out.push_back({p + "attn.Wq", L.attn.Wq});
      out.push_back({p + "attn.Wk", L.attn.Wk});
      out.push_back({p + "attn.Wv", L.attn.Wv});
      out.push_back({p + "attn.Wo", L.attn.Wo});
      out.push_back({p + "ffn.W_gate", L.ffn.W_gate});
      out.push_back({p + "ffn.W_up", L.ffn.W_up});
      out.push_back({p + "ffn.W_down", L.ffn.W_down});
      out.push_back({p + "norm_attn.gain", L.norm_attn.gain});
      out.push_back({p + "norm_ffn.gain", L.norm_ffn.gain});
      out.push_back({p + "norm_attn_post.gain", L.norm_attn_post.gain});
      out.push_back({p + "norm_ffn_post.gain", L.norm_ffn_post.gain});
    }
    if (has_final_norm(cfg))
      out.push_back({"final_norm.gain", final_norm.gain});
    out.push_back({"lm_head", lm_head});
    return out;
  }
};

// Deterministic initialization: every matrix is filled from one seeded
// stream in declaration order, so two models with the same (config, seed)
// are bitwise identical. DeepNorm's beta scaling is applied afterwards and
// does not perturb the stream.
template <class T>
TransformerModel<T> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.scheme.validate(cfg.n_layers);
  const std::size_t D = cfg.d_model, F = cfg.ff_dim();
  if (D % cfg.n_heads != 0)
    throw std::invalid_argument("d_model must be divisible by n_heads");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, cfg.init_std);
  auto mat = [&](std::size_t r, std::size_t c) {
    auto t = Tensor<T>::zeros({r, c});
    for (auto& v : t.values()) v = T(dist(rng));
    t.set_requires_grad();
    return t;
  };

  TransformerModel<T> m;
  m.cfg = cfg;
  m.embedding.table = mat(cfg.vocab, D);
  m.embedding.scale_embed = cfg.scale_embed;

  const bool deepnorm = cfg.scheme.scheme == Scheme::DeepNorm;
  const T beta = T(cfg.dn_beta());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams<T> L;
    L.attn.Wq = mat(D, D);
    L.attn.Wk = mat(D, D);
    L.attn.Wv = mat(D, D);
    L.attn.Wo = mat(D, D);
    L.attn.n_heads = cfg.n_heads;
    L.attn.rope_base = T(cfg.rope_base);
    L.ffn.W_gate = mat(D, F);
    L.ffn.W_up = mat(D, F);
    L.ffn.W_down = mat(F, D);
    L.norm_attn = layers::RmsNormParams<T>::make(D, T(cfg.norm_eps));
    L.norm_ffn = layers::RmsNormParams<T>::make(D, T(cfg.norm_eps));
    L.norm_attn_post = layers::RmsNormParams<T>::make(D, T(cfg.norm_eps));
    L.norm_ffn_post = layers::RmsNormParams<T>::make(D, T(cfg.norm_eps));
    L.gate = GpasGate<T>::make(T(0), cfg.scheme.gate_activation,
                               /*learnable=*/cfg.scheme.gpas_enabled);
    if (deepnorm) {
      for (Tensor<T>* w :
           {&L.attn.Wv, &L.attn.Wo, &L.ffn.W_gate, &L.ffn.W_up, &L.ffn.W_down})
        kern::ops<T>().scale(beta, w->values().data(), w->values().data(),
                             w->size());
    }
    m.layer.push_back(std::move(L));
  }
  m.final_norm = layers::RmsNormParams<T>::make(D, T(cfg.norm_eps));
  m.lm_head = mat(D, cfg.vocab);
  return m;
}

// ------------------------------------------------------------ forward rules

namespace detail {

template <class T>
Tensor<T> gate_apply(const Tensor<T>& x, LayerParams<T>& L,
                     const SchemeConfig& sc) {
  if (!sc.gpas_enabled) return x;
  return sc.gpas_variant == GpasVariant::StopGrad
             ? layers::gpas_apply(x, L.gate)
             : layers::gpas_apply_naive(x, L.gate);
}

}  // namespace detail

// One Pre-LN sub-layer (Eq. 1 / Eq. 2), including the Table 4 insertion
// positions. `f` is the module (attention or FFN); `norm` its pre-norm;
// lns_scale multiplies the normalized branch input (1 for plain Pre-LN,
// 1/sqrt(l) for LNS).
template <class T, class F>
Tensor<T> sublayer_pre(const Tensor<T>& x, LayerParams<T>& L,
                       const layers::RmsNormParams<T>& norm,
                       const SchemeConfig& sc, F&& f, T lns_scale = T(1)) {
  auto branch_input = [&](const Tensor<T>& in) {
    auto h = layers::rmsnorm(in, norm);
    if (lns_scale != T(1)) h = ad::scale_const(h, lns_scale);
    return h;
  };
  switch (sc.gpas_enabled ? sc.gpas_position : GpasPosition::AfterSublayer) {
    case GpasPosition::BeforeSublayer: {
      auto xg = detail::gate_apply(x, L, sc);
      return ad::add(xg, f(branch_input(xg)));
    }
    case GpasPosition::AfterLayerNorm: {
      auto h = detail::gate_apply(branch_input(x), L, sc);
      return ad::add(x, f(h));
    }
    case GpasPosition::AfterModule:
      return ad::add(x, detail::gate_apply(f(branch_input(x)), L, sc));
    case GpasPosition::AfterSublayer:
    default:
      return detail::gate_apply(ad::add(x, f(branch_input(x))), L, sc);
  }
}

// One Sandwich-LN sub-layer (Eq. 4): x + LN2(f(LN1(x))), GPAS after the
// residual.
template <class T, class F>
Tensor<T> sublayer_sandwich(const Tensor<T>& x, LayerParams<T>& L,
                            const layers::RmsNormParams<T>& pre,
                            const layers::RmsNormParams<T>& post,
                            const SchemeConfig& sc, F&& f) {
  auto y = ad::add(x, layers::rmsnorm(f(layers::rmsnorm(x, pre)), post));
  return detail::gate_apply(y, L, sc);
}

// One Post-LN-family sub-layer. dn_alpha=1 gives plain Post-LN (Eq. 5);
// otherwise DeepNorm (Eq. 6). With GPAS, the shortcut is gated (Eq. 7)
// while the module still sees the ungated x (Eq. 8).
template <class T, class F>
Tensor<T> sublayer_post(const Tensor<T>& x, LayerParams<T>& L,
                        const layers::RmsNormParams<T>& norm,
                        const SchemeConfig& sc, F&& f, T dn_alpha = T(1)) {
  auto shortcut = detail::gate_apply(x, L, sc);
  if (dn_alpha != T(1)) shortcut = ad::scale_const(shortcut, dn_alpha);
  return layers::rmsnorm(ad::add(shortcut, f(x)), norm);
}

// Full layer forward: attention sub-layer then FFN sub-layer, sharing one
// gate. `l` is the 0-based layer index.
template <class T>
Tensor<T> forward_layer(const Tensor<T>& x, TransformerModel<T>& m,
                        std::size_t l) {
  auto& L = m.layer[l];
  const auto& sc = m.cfg.scheme;
  auto attn = [&](const Tensor<T>& h) { return layers::attention(h, L.attn); };
  auto ffn = [&](const Tensor<T>& h) { return layers::ffn_swiglu(h, L.ffn); };

  switch (sc.scheme) {
    case Scheme::PreLN: {
      auto h = sublayer_pre(x, L, L.norm_attn, sc, attn);
      return sublayer_pre(h, L, L.norm_ffn, sc, ffn);
    }
    case Scheme::LNS: {
      const T s = T(1) / std::sqrt(T(l + 1));  // 1-based depth
      auto h = sublayer_pre(x, L, L.norm_attn, sc, attn, s);
      return sublayer_pre(h, L, L.norm_ffn, sc, ffn, s);
    }
    case Scheme::SandwichLN: {
      auto h = sublayer_sandwich(x, L, L.norm_attn, L.norm_attn_post, sc, attn);
      return sublayer_sandwich(h, L, L.norm_ffn, L.norm_ffn_post, sc, ffn);
    }
    case Scheme::PostLN: {
      auto h = sublayer_post(x, L, L.norm_attn, sc, attn);
      return sublayer_post(h, L, L.norm_ffn, sc, ffn);
    }
    case Scheme::DeepNorm: {
      const T a = T(m.cfg.dn_alpha());
      auto h = sublayer_post(x, L, L.norm_attn, sc, attn, a);
      return sublayer_post(h, L, L.norm_ffn, sc, ffn, a);
    }
    case Scheme::MixLN: {
      if (layer_is_post(m.cfg, l)) {
        auto h = sublayer_post(x, L, L.norm_attn, sc, attn);
        return sublayer_post(h, L, L.norm_ffn, sc, ffn);
      }
      auto h = sublayer_pre(x, L, L.norm_attn, sc, attn);
      return sublayer_pre(h, L, L.norm_ffn, sc, ffn);
    }
  }
  throw std::logic_error("forward_layer: unknown scheme");
}

// Hooks for instrumentation and layer-removal analysis. `capture` receives
// the residual-stream tensor entering each layer (input to its first norm).
template <class T>
struct ForwardHooks {
  std::function<void(std::size_t layer, const Tensor<T>& x)> capture;
  std::ptrdiff_t skip_layer = -1;  // replace this layer by the identity map
};

template <class T>
Tensor<T> model_forward(TransformerModel<T>& m,
                        const std::vector<std::int32_t>& tokens,
                        std::size_t batch, std::size_t seq,
                        const ForwardHooks<T>* hooks = nullptr) {
  auto x = layers::embed(tokens, {batch, seq}, m.embedding);
  for (std::size_t l = 0; l < m.layer.size(); ++l) {
    if (hooks && hooks->capture) hooks->capture(l, x);
    if (hooks && std::ptrdiff_t(l) == hooks->skip_layer) continue;
    x = forward_layer(x, m, l);
  }
  if (has_final_norm(m.cfg))
    x = layers::rmsnorm(x, m.final_norm);
  return ad::matmul(x, m.lm_head);
}

}  // namespace gpaslab::model
