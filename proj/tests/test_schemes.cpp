#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>

#include "gpaslab/model.hpp"

using namespace gpaslab;
using namespace gpaslab::model;
using ad::Tensor;

namespace {

using D = double;

ModelConfig tiny_cfg(Scheme s, bool gpas) {
  ModelConfig cfg;
  cfg.vocab = 32;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 4;
  cfg.scheme.scheme = s;
  cfg.scheme.gpas_enabled = gpas;
  return cfg;
}

std::vector<std::int32_t> tiny_tokens(std::size_t n, std::uint64_t seed,
                                      std::int32_t vocab) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> d(0, vocab - 1);
  std::vector<std::int32_t> t(n);
  for (auto& v : t) v = d(rng);
  return t;
}

// Zero all module weights so f ≡ 0 (zero Wo kills attention, zero W_gate
// kills the FFN through SiLU(0)=0; the rest zeroed for good measure).
void zero_modules(TransformerModel<D>& m) {
  for (auto& L : m.layer)
    for (Tensor<D>* w : {&L.attn.Wq, &L.attn.Wk, &L.attn.Wv, &L.attn.Wo,
                         &L.ffn.W_gate, &L.ffn.W_up, &L.ffn.W_down})
      for (auto& v : w->values()) v = 0;
}

struct LossAndGrads {
  D loss;
  std::vector<std::vector<D>> grads;  // per parameter, model order
};

LossAndGrads run_pass(TransformerModel<D>& m,
                      const std::vector<std::int32_t>& tokens,
                      std::size_t B, std::size_t S,
                      const std::vector<std::int32_t>& targets) {
  for (auto& p : m.parameters()) p.tensor.zero_grad();
  for (auto& L : m.layer) L.gate.alpha.zero_grad();
  ad::Tape<D> tape;
  D loss;
  {
    ad::TapeScope<D> sc(tape);
    auto logits = model_forward(m, tokens, B, S);
    auto l = ad::cross_entropy(logits, targets);
    loss = l.item();
    tape.backward(l);
  }
  LossAndGrads out;
  out.loss = loss;
  for (auto& p : m.parameters()) out.grads.push_back(p.tensor.grad());
  return out;
}

}  // namespace

TEST_CASE("alpha=0 equivalence: loss 1e-12, shared grads 1e-9") {
  const std::size_t B = 2, S = 8;
  for (Scheme s : {Scheme::PreLN, Scheme::SandwichLN, Scheme::LNS,
                   Scheme::DeepNorm, Scheme::MixLN}) {
    for (std::uint64_t seed : {0ull, 1ull}) {
      auto base = make_model<D>(tiny_cfg(s, false), seed);
      auto gpas = make_model<D>(tiny_cfg(s, true), seed);
      auto tokens = tiny_tokens(B * S, 100 + seed, 32);
      auto targets = tiny_tokens(B * S, 200 + seed, 32);
      auto ra = run_pass(base, tokens, B, S, targets);
      auto rb = run_pass(gpas, tokens, B, S, targets);
      CAPTURE(int(s));
      CAPTURE(seed);
      CHECK(std::abs(ra.loss - rb.loss) <= 1e-12 * std::abs(ra.loss));
      REQUIRE(ra.grads.size() == rb.grads.size());
      for (std::size_t p = 0; p < ra.grads.size(); ++p)
        for (std::size_t i = 0; i < ra.grads[p].size(); ++i) {
          const D a = ra.grads[p][i], b = rb.grads[p][i];
          CHECK(std::abs(a - b) <= 1e-9 * std::max(std::abs(a), D(1)));
        }
    }
  }
}

TEST_CASE("gpas_enabled=false == gpas_enabled=true with alpha=0, bitwise") {
  const std::size_t B = 2, S = 6;
  auto tokens = tiny_tokens(B * S, 5, 32);
  auto a = make_model<D>(tiny_cfg(Scheme::PreLN, false), 3);
  auto b = make_model<D>(tiny_cfg(Scheme::PreLN, true), 3);
  auto la = model_forward(a, tokens, B, S);
  auto lb = model_forward(b, tokens, B, S);
  CHECK(std::memcmp(la.values().data(), lb.values().data(),
                    la.size() * sizeof(D)) == 0);
}

TEST_CASE("PreLN zeroed modules, GPAS alpha=1: layer scales by 0.2689414^2") {
  auto cfg = tiny_cfg(Scheme::PreLN, true);
  cfg.n_layers = 1;
  auto m = make_model<D>(cfg, 0);
  zero_modules(m);
  m.layer[0].gate.alpha.values()[0] = 1.0;
  auto x = Tensor<D>::zeros({1, 2, 16});
  std::mt19937_64 rng(9);
  std::normal_distribution<D> dist;
  for (auto& v : x.values()) v = dist(rng);
  auto y = forward_layer(x, m, 0);
  const D f = 1.0 - 1.0 / (1.0 + std::exp(-1.0));  // 1 - SiLU(1)
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(y.values()[i] ==
          doctest::Approx(x.values()[i] * f * f).epsilon(1e-10));
}

TEST_CASE("AfterLayerNorm position with zeroed modules: output = x") {
  auto cfg = tiny_cfg(Scheme::PreLN, true);
  cfg.n_layers = 1;
  cfg.scheme.gpas_position = GpasPosition::AfterLayerNorm;
  auto m = make_model<D>(cfg, 0);
  zero_modules(m);
  m.layer[0].gate.alpha.values()[0] = 1.3;
  auto x = Tensor<D>::zeros({1, 2, 16});
  std::mt19937_64 rng(9);
  std::normal_distribution<D> dist;
  for (auto& v : x.values()) v = dist(rng);
  auto y = forward_layer(x, m, 0);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("Sandwich / PostLN / DeepNorm zero-module behavior") {
  auto mk = [&](Scheme s) {
    auto cfg = tiny_cfg(s, false);
    cfg.n_layers = 1;
    auto m = make_model<D>(cfg, 0);
    zero_modules(m);
    return m;
  };
  auto x = Tensor<D>::zeros({1, 3, 16});
  std::mt19937_64 rng(4);
  std::normal_distribution<D> dist;
  for (auto& v : x.values()) v = dist(rng);

  // Sandwich: inner LN(0)=0, residual unchanged.
  {
    auto m = mk(Scheme::SandwichLN);
    auto y = forward_layer(x, m, 0);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(y.values()[i] == x.values()[i]);
  }
  // PostLN: x -> LN(LN(x)); unit gains give per-position RMS 1.
  {
    auto m = mk(Scheme::PostLN);
    auto y = forward_layer(x, m, 0);
    auto ref = layers::rmsnorm(layers::rmsnorm(x, m.layer[0].norm_attn),
                               m.layer[0].norm_ffn);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(y.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-14));
    for (std::size_t t = 0; t < 3; ++t) {
      D ss = 0;
      for (std::size_t j = 0; j < 16; ++j) {
        const D v = y.values()[t * 16 + j];
        ss += v * v;
      }
      CHECK(std::sqrt(ss / 16) == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
  // DeepNorm with alpha forced to 1 and zero modules: LN(LN(x)).
  {
    auto cfg = tiny_cfg(Scheme::DeepNorm, false);
    cfg.n_layers = 1;
    cfg.scheme.deepnorm_alpha = 1.0;
    auto m = make_model<D>(cfg, 0);
    zero_modules(m);
    auto y = forward_layer(x, m, 0);
    auto ref = layers::rmsnorm(layers::rmsnorm(x, m.layer[0].norm_attn),
                               m.layer[0].norm_ffn);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(y.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-14));
  }
}

TEST_CASE("DeepNorm+GPAS gates only the shortcut") {
  auto cfg = tiny_cfg(Scheme::DeepNorm, true);
  cfg.n_layers = 1;
  auto m = make_model<D>(cfg, 2);
  m.layer[0].gate.alpha.values()[0] = 1.0;
  auto x = Tensor<D>::zeros({1, 2, 16});
  std::mt19937_64 rng(11);
  std::normal_distribution<D> dist;
  for (auto& v : x.values()) v = dist(rng);

  // Reference: Eq. (7)-(8) by hand for the attention sub-layer.
  const D gate_scale = 1.0 - 1.0 / (1.0 + std::exp(-1.0));
  const D a = m.cfg.dn_alpha();
  auto f_x = layers::attention(x, m.layer[0].attn);  // module sees ungated x
  auto gated = ad::scale_const(x, gate_scale * a);
  auto ref = layers::rmsnorm(ad::add(gated, f_x), m.layer[0].norm_attn);
  auto got = sublayer_post(
      x, m.layer[0], m.layer[0].norm_attn, m.cfg.scheme,
      [&](const Tensor<D>& h) { return layers::attention(h, m.layer[0].attn); },
      D(a));
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(got.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-12));
}

TEST_CASE("LNS: layer 1 bitwise Pre-LN; gain absorption within 1e-9") {
  const std::size_t B = 2, S = 6;
  auto tokens = tiny_tokens(B * S, 21, 32);
  auto lns = make_model<D>(tiny_cfg(Scheme::LNS, false), 6);
  auto pre = make_model<D>(tiny_cfg(Scheme::PreLN, false), 6);

  // Layer 1 (index 0): identical rule, bitwise.
  auto x = layers::embed(tokens, {B, S}, lns.embedding);
  auto y_lns = forward_layer(x, lns, 0);
  auto y_pre = forward_layer(x, pre, 0);
  CHECK(std::memcmp(y_lns.values().data(), y_pre.values().data(),
                    y_lns.size() * sizeof(D)) == 0);

  // Deeper layers halve/scale the branch: absorb 1/sqrt(l) into Pre-LN's
  // gains and the model outputs agree within 1e-9 relative.
  for (std::size_t l = 0; l < pre.layer.size(); ++l) {
    const D s = 1.0 / std::sqrt(D(l + 1));
    for (auto& g : pre.layer[l].norm_attn.gain.values()) g *= s;
    for (auto& g : pre.layer[l].norm_ffn.gain.values()) g *= s;
  }
  auto out_lns = model_forward(lns, tokens, B, S);
  auto out_pre = model_forward(pre, tokens, B, S);
  for (std::size_t i = 0; i < out_lns.size(); ++i) {
    const D a = out_lns.values()[i], b = out_pre.values()[i];
    CHECK(std::abs(a - b) <= 1e-9 * std::max(std::abs(a), D(1)));
  }
}

TEST_CASE("Mix-LN degenerate partitions are bitwise pure schemes") {
  const std::size_t B = 2, S = 6;
  auto tokens = tiny_tokens(B * S, 31, 32);

  // mix_postln_layers = 0: the whole stack is Pre-LN.
  ModelConfig mix0 = tiny_cfg(Scheme::MixLN, false);
  mix0.scheme.mix_postln_layers = 0;
  auto m_mix0 = make_model<D>(mix0, 8);
  auto m_pre0 = make_model<D>(tiny_cfg(Scheme::PreLN, false), 8);
  auto y0m = model_forward(m_mix0, tokens, B, S);
  auto y0p = model_forward(m_pre0, tokens, B, S);
  CHECK(std::memcmp(y0m.values().data(), y0p.values().data(),
                    y0m.size() * sizeof(D)) == 0);

  // mix_postln_layers = L: the whole stack is Post-LN (no final norm).
  ModelConfig mixL = tiny_cfg(Scheme::MixLN, false);
  mixL.scheme.mix_postln_layers = 4;
  auto m_mixL = make_model<D>(mixL, 8);
  auto m_post = make_model<D>(tiny_cfg(Scheme::PostLN, false), 8);
  auto yL = model_forward(m_mixL, tokens, B, S);
  auto yP = model_forward(m_post, tokens, B, S);
  CHECK(std::memcmp(yL.values().data(), yP.values().data(),
                    yL.size() * sizeof(D)) == 0);

  // Per-layer: a Mix layer beyond the Post prefix is bitwise Pre-LN.
  auto m_mix_def = make_model<D>(tiny_cfg(Scheme::MixLN, false), 8);  // split=1
  auto m_pre = make_model<D>(tiny_cfg(Scheme::PreLN, false), 8);
  auto x = layers::embed(tokens, {B, S}, m_pre.embedding);
  auto y_mix = forward_layer(x, m_mix_def, 2);
  auto y_pre = forward_layer(x, m_pre, 2);
  CHECK(std::memcmp(y_mix.values().data(), y_pre.values().data(),
                    y_mix.size() * sizeof(D)) == 0);
  // And a layer inside the prefix is bitwise Post-LN.
  auto y_mix0 = forward_layer(x, m_mix_def, 0);
  auto y_post0 = forward_layer(x, m_post, 0);
  CHECK(std::memcmp(y_mix0.values().data(), y_post0.values().data(),
                    y_mix0.size() * sizeof(D)) == 0);
}

TEST_CASE("degenerate-chain product law at model level") {
  // Pre-LN, f≡0, alpha=1 on every gate: Naive input grad equals StopGrad
  // input grad times (1-SiLU(1))^(2L) (two gate applications per layer).
  for (std::size_t L : {2ul, 3ul}) {
    auto mk = [&](GpasVariant v) {
      auto cfg = tiny_cfg(Scheme::PreLN, true);
      cfg.n_layers = L;
      cfg.scheme.gpas_variant = v;
      auto m = make_model<D>(cfg, 1);
      zero_modules(m);
      for (auto& lay : m.layer) lay.gate.alpha.values()[0] = 1.0;
      return m;
    };
    auto m_sg = mk(GpasVariant::StopGrad);
    auto m_nv = mk(GpasVariant::Naive);
    auto x = Tensor<D>::zeros({1, 2, 16});
    std::mt19937_64 rng(13);
    std::normal_distribution<D> dist;
    for (auto& v : x.values()) v = dist(rng);

    auto input_grad = [&](TransformerModel<D>& m) {
      auto xi = Tensor<D>::from(x.shape(), x.values());
      xi.set_requires_grad();
      ad::Tape<D> tape;
      ad::TapeScope<D> sc(tape);
      Tensor<D> h = xi;
      for (std::size_t l = 0; l < m.layer.size(); ++l)
        h = forward_layer(h, m, l);
      tape.backward(ad::sum_all(h));
      return xi.grad();
    };
    auto g_sg = input_grad(m_sg);
    auto g_nv = input_grad(m_nv);
    const D beta = 1.0 - 1.0 / (1.0 + std::exp(-1.0));
    const D factor = std::pow(beta, D(2 * L));
    for (std::size_t i = 0; i < g_sg.size(); ++i)
      CHECK(std::abs(g_nv[i] - g_sg[i] * factor) <= 1e-12);
  }
}

TEST_CASE("FD gradient check: every scheme's layer rule (no GPAS)") {
  const std::size_t B = 1, S = 3, Dm = 8;
  for (Scheme s : {Scheme::PostLN, Scheme::DeepNorm, Scheme::PreLN,
                   Scheme::SandwichLN, Scheme::MixLN, Scheme::LNS}) {
    ModelConfig cfg = tiny_cfg(s, false);
    cfg.d_model = Dm;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    auto m = make_model<D>(cfg, 17);
    auto x = Tensor<D>::zeros({B, S, Dm});
    std::mt19937_64 rng(23);
    std::normal_distribution<D> dist;
    for (auto& v : x.values()) v = dist(rng);
    auto w = Tensor<D>::zeros(x.shape());
    for (auto& v : w.values()) v = dist(rng);

    for (std::size_t l = 0; l < 2; ++l) {
      x.set_requires_grad();
      x.zero_grad();
      ad::Tape<D> tape;
      {
        ad::TapeScope<D> sc(tape);
        tape.backward(ad::sum_all(ad::mul(forward_layer(x, m, l), w)));
      }
      auto fd = ad::finite_difference_grad(
          [&] {
            auto y = forward_layer(x, m, l);
            return kern::ops<D>().dot(y.values().data(), w.values().data(),
                                      y.size());
          },
          x);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const D err = std::abs(x.grad()[i] - fd[i]) /
                      std::max(std::abs(fd[i]), D(1));
        CAPTURE(int(s));
        CHECK(err <= 1e-5);
      }
      x.set_requires_grad(false);
    }
  }
}

TEST_CASE("FD gradient check: Naive GPAS layer rule is FD-consistent") {
  ModelConfig cfg = tiny_cfg(Scheme::PreLN, true);
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.scheme.gpas_variant = GpasVariant::Naive;
  auto m = make_model<D>(cfg, 29);
  m.layer[0].gate.alpha.values()[0] = 0.7;
  auto x = Tensor<D>::zeros({1, 3, 8});
  std::mt19937_64 rng(31);
  std::normal_distribution<D> dist;
  for (auto& v : x.values()) v = dist(rng);
  x.set_requires_grad();
  ad::Tape<D> tape;
  {
    ad::TapeScope<D> sc(tape);
    tape.backward(ad::sum_all(forward_layer(x, m, 0)));
  }
  auto fd = ad::finite_difference_grad(
      [&] {
        auto y = forward_layer(x, m, 0);
        return kern::ops<D>().sum(y.values().data(), y.size());
      },
      x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const D err =
        std::abs(x.grad()[i] - fd[i]) / std::max(std::abs(fd[i]), D(1));
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("model_forward: determinism and zero-layer removal") {
  const std::size_t B = 2, S = 5;
  auto tokens = tiny_tokens(B * S, 41, 32);
  auto m1 = make_model<D>(tiny_cfg(Scheme::PreLN, true), 12);
  auto m2 = make_model<D>(tiny_cfg(Scheme::PreLN, true), 12);
  auto y1 = model_forward(m1, tokens, B, S);
  auto y2 = model_forward(m2, tokens, B, S);
  CHECK(std::memcmp(y1.values().data(), y2.values().data(),
                    y1.size() * sizeof(D)) == 0);

  // Zero a layer's modules (gate stays 0): skipping it changes nothing.
  auto m3 = make_model<D>(tiny_cfg(Scheme::PreLN, true), 12);
  for (Tensor<D>* w :
       {&m3.layer[2].attn.Wq, &m3.layer[2].attn.Wk, &m3.layer[2].attn.Wv,
        &m3.layer[2].attn.Wo, &m3.layer[2].ffn.W_gate, &m3.layer[2].ffn.W_up,
        &m3.layer[2].ffn.W_down})
    for (auto& v : w->values()) v = 0;
  auto base = model_forward(m3, tokens, B, S);
  ForwardHooks<D> hooks;
  hooks.skip_layer = 2;
  auto skipped = model_forward(m3, tokens, B, S, &hooks);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(std::abs(base.values()[i] - skipped.values()[i]) <= 1e-12);

  // Capture hook sees L residual-stream tensors and does not alter values.
  std::size_t captured = 0;
  ForwardHooks<D> cap;
  cap.capture = [&](std::size_t, const Tensor<D>&) { ++captured; };
  auto y3 = model_forward(m3, tokens, B, S, &cap);
  CHECK(captured == m3.layer.size());
  CHECK(std::memcmp(y3.values().data(), base.values().data(),
                    base.size() * sizeof(D)) == 0);
}
