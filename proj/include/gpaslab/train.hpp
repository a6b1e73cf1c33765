#pragma once

// Optimization loop: warmup+cosine LR schedule, Adam, gate-first dual-level
// gradient clipping, next-token training and evaluation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpaslab/data.hpp"
#include "gpaslab/model.hpp"

namespace gpaslab::train {

using model::TransformerModel;

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 32;
  std::size_t seq_len = 256;
  std::optional<double> global_clip = 1.0;
  std::optional<double> gate_clip = 0.01;
  std::uint64_t seed = 0;
  bool freeze_gates = false;
  std::size_t eval_interval = 200;
  std::size_t eval_tokens = 65536;

  void validate() const {
    if (warmup_steps > total_steps)
      throw std::invalid_argument("warmup_steps must be <= total_steps");
    if (batch_size == 0 || seq_len == 0)
      throw std::invalid_argument("batch_size and seq_len must be positive");
    if (global_clip && *global_clip <= 0)
      throw std::invalid_argument("global_clip must be positive");
    if (gate_clip && *gate_clip <= 0)
      throw std::invalid_argument("gate_clip must be positive");
  }
};

// Linear warmup to the peak, then cosine decay to 0.1*peak at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  const double peak = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return peak * double(step) / double(cfg.warmup_steps);
  if (step >= cfg.total_steps || cfg.total_steps == cfg.warmup_steps)
    return step >= cfg.total_steps ? 0.1 * peak : peak;
  const double p = double(step - cfg.warmup_steps) /
                   double(cfg.total_steps - cfg.warmup_steps);
  const double floor = 0.1 * peak;
  return floor +
         0.5 * (peak - floor) * (1.0 + std::cos(p * std::numbers::pi));
}

struct ClipReport {
  double global_pre = 0;   // L2 norm over non-gate grads before scaling
  double global_post = 0;
  double scale = 1.0;
  std::vector<double> gate_pre;   // |grad(alpha)| per layer before clip
  std::vector<double> gate_post;
};

// Gate gradients are clipped first (per gate, magnitude capped at
// gate_clip), then the global L2 norm over all non-gate parameters is
// rescaled to global_clip if exceeded.
template <class T>
ClipReport clip_gradients(TransformerModel<T>& m, const TrainConfig& cfg) {
  ClipReport rep;
  for (auto& L : m.layer) {
    if (!L.gate.alpha.requires_grad()) {
      rep.gate_pre.push_back(0);
      rep.gate_post.push_back(0);
      continue;
    }
    T& g = L.gate.alpha.grad()[0];
    rep.gate_pre.push_back(std::abs(double(g)));
    std::optional<T> clip = L.gate.grad_clip;
    if (!clip && cfg.gate_clip) clip = T(*cfg.gate_clip);
    if (clip && std::abs(g) > *clip) g = std::copysign(*clip, g);
    rep.gate_post.push_back(std::abs(double(g)));
  }
  double ss = 0;
  auto params = m.parameters();
  for (auto& p : params)
    ss += double(kern::ops<T>().sum_sq(p.tensor.grad().data(),
                                       p.tensor.grad().size()));
  rep.global_pre = std::sqrt(ss);
  rep.global_post = rep.global_pre;
  if (cfg.global_clip && rep.global_pre > *cfg.global_clip) {
    rep.scale = *cfg.global_clip / rep.global_pre;
    for (auto& p : params)
      kern::ops<T>().scale(T(rep.scale), p.tensor.grad().data(),
                           p.tensor.grad().data(), p.tensor.grad().size());
    rep.global_post = rep.global_pre * rep.scale;
  }
  return rep;
}

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // parameters()-order, gates appended
  T beta1 = T(0.9), beta2 = T(0.95), eps = T(1e-8);
  std::size_t step = 0;

  static AdamState init(TransformerModel<T>& model) {
    AdamState s;
    for (auto& p : model.parameters()) {
      s.m.emplace_back(p.tensor.size(), T(0));
      s.v.emplace_back(p.tensor.size(), T(0));
    }
    for (std::size_t l = 0; l < model.layer.size(); ++l) {
      s.m.emplace_back(1, T(0));
      s.v.emplace_back(1, T(0));
    }
    return s;
  }
};

namespace detail {

template <class T>
void adam_update(std::vector<T>& w, const std::vector<T>& g, std::vector<T>& m,
                 std::vector<T>& v, const AdamState<T>& s, T lr) {
  const T bc1 = T(1) - std::pow(s.beta1, T(s.step));
  const T bc2 = T(1) - std::pow(s.beta2, T(s.step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = s.beta1 * m[i] + (T(1) - s.beta1) * g[i];
    v[i] = s.beta2 * v[i] + (T(1) - s.beta2) * g[i] * g[i];
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

}  // namespace detail

// One bias-corrected Adam step over all parameters and learnable gates.
template <class T>
void adam_step(TransformerModel<T>& model, AdamState<T>& state, T lr,
               bool freeze_gates) {
  ++state.step;
  auto params = model.parameters();
  std::size_t idx = 0;
  for (auto& p : params) {
    detail::adam_update(p.tensor.values(), p.tensor.grad(), state.m[idx],
                        state.v[idx], state, lr);
    ++idx;
  }
  for (auto& L : model.layer) {
    if (L.gate.learnable && !freeze_gates && L.gate.alpha.requires_grad())
      detail::adam_update(L.gate.alpha.values(), L.gate.alpha.grad(),
                          state.m[idx], state.v[idx], state, lr);
    ++idx;
  }
}

// ------------------------------------------------------------------- loops

struct EvalResult {
  double loss = 0;
  double perplexity = 1;
};

template <class T>
EvalResult evaluate(TransformerModel<T>& model, const data::Corpus& corpus,
                    std::size_t n_tokens, std::size_t batch_size,
                    std::size_t seq_len) {
  ad::NoGradGuard<T> off;
  const std::size_t per_batch = batch_size * seq_len;
  const std::size_t n_batches = std::max<std::size_t>(1, n_tokens / per_batch);
  double total = 0;
  for (std::size_t i = 0; i < n_batches; ++i) {
    auto b = corpus.eval_batch(i, batch_size);
    auto logits = model_forward(model, b.inputs, batch_size, seq_len);
    total += double(ad::cross_entropy(logits, b.targets).item());
  }
  EvalResult r;
  r.loss = total / double(n_batches);
  r.perplexity = std::exp(r.loss);
  return r;
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  double global_grad_norm = 0;
};

// Called after backward + clipping, before the optimizer step, with the
// residual-stream tensors captured at each layer's entry.
template <class T>
using InstrumentFn = std::function<void(
    std::size_t step, TransformerModel<T>& model,
    const std::vector<ad::Tensor<T>>& layer_inputs, const ClipReport& clip)>;

struct RunSummary {
  double initial_eval_loss = 0;
  double final_train_loss = 0;
  double final_eval_loss = 0;
  double final_eval_ppl = 0;
  std::size_t steps = 0;
};

template <class T>
struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;         // every step
  std::function<void(const StepRecord&, const EvalResult&)> on_eval;
  InstrumentFn<T> instrument;                             // caller gates cadence
};

template <class T>
RunSummary train_loop(TransformerModel<T>& model, AdamState<T>& opt,
                      const data::Corpus& corpus, const TrainConfig& cfg,
                      const TrainHooks<T>& hooks = {},
                      std::size_t start_step = 0) {
  cfg.validate();
  RunSummary sum;
  sum.initial_eval_loss =
      evaluate(model, corpus, cfg.eval_tokens, cfg.batch_size, cfg.seq_len)
          .loss;
  auto params = model.parameters();
  for (std::size_t step = start_step; step < cfg.total_steps; ++step) {
    auto batch = corpus.next_batch(step, cfg.batch_size);
    for (auto& p : params) p.tensor.zero_grad();
    for (auto& L : model.layer) L.gate.alpha.zero_grad();

    std::vector<ad::Tensor<T>> layer_inputs;
    model::ForwardHooks<T> fh;
    if (hooks.instrument)
      fh.capture = [&](std::size_t, const ad::Tensor<T>& x) {
        layer_inputs.push_back(x);
      };
    ad::Tape<T> tape;
    double loss;
    {
      ad::TapeScope<T> sc(tape);
      auto logits = model_forward(model, batch.inputs, cfg.batch_size,
                                  cfg.seq_len,
                                  hooks.instrument ? &fh : nullptr);
      auto l = ad::cross_entropy(logits, batch.targets);
      loss = double(l.item());
      if (!std::isfinite(loss))
        throw ad::NonFiniteError("train: NaN/Inf loss at step " +
                                 std::to_string(step));
      tape.backward(l);
    }
    auto clip = clip_gradients(model, cfg);
    if (hooks.instrument) hooks.instrument(step, model, layer_inputs, clip);

    const double lr = lr_at(step, cfg);
    adam_step(model, opt, T(lr), cfg.freeze_gates);

    StepRecord rec{step, loss, lr, clip.global_post};
    if (hooks.on_step) hooks.on_step(rec);
    sum.final_train_loss = loss;
    sum.steps = step + 1;
    if (cfg.eval_interval && (step + 1) % cfg.eval_interval == 0 &&
        hooks.on_eval) {
      auto ev = evaluate(model, corpus, cfg.eval_tokens, cfg.batch_size,
                         cfg.seq_len);
      hooks.on_eval(rec, ev);
    }
  }
  auto ev =
      evaluate(model, corpus, cfg.eval_tokens, cfg.batch_size, cfg.seq_len);
  sum.final_eval_loss = ev.loss;
  sum.final_eval_ppl = ev.perplexity;
  return sum;
}

}  // namespace gpaslab::train
