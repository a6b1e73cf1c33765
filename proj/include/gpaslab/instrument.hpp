#pragma once

// Layerwise measurement harness: activation variance, gradient norms, gate
// trajectories, weight norms, layer importance by removal, and run-vs-run
// comparison tables.
//
// Measurement point: the residual-stream tensor entering each layer (the
// input to its first normalization), captured via ForwardHooks. Variance is
// the population variance over the hidden dimension per token, averaged
// over batch and positions.

#include <cmath>
#include <cstddef>
#include <istream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "gpaslab/model.hpp"
#include "gpaslab/train.hpp"

namespace gpaslab::instrument {

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t layer_index = 0;
  double act_var = 0;           // variance of the layer's input activations
  double grad_norm = 0;         // L2 over the layer's parameter grads
  double gate_alpha = 0;
  double gate_silu = 0;         // Act(alpha)
  double attn_weight_norm = 0;
  double ffn_weight_norm = 0;
};

inline void to_json(nlohmann::json& j, const MetricsRecord& r) {
  j = {{"step", r.step},
       {"layer", r.layer_index},
       {"act_var", r.act_var},
       {"grad_norm", r.grad_norm},
       {"gate_alpha", r.gate_alpha},
       {"gate_silu", r.gate_silu},
       {"attn_weight_norm", r.attn_weight_norm},
       {"ffn_weight_norm", r.ffn_weight_norm}};
}

inline void from_json(const nlohmann::json& j, MetricsRecord& r) {
  j.at("step").get_to(r.step);
  j.at("layer").get_to(r.layer_index);
  j.at("act_var").get_to(r.act_var);
  j.at("grad_norm").get_to(r.grad_norm);
  j.at("gate_alpha").get_to(r.gate_alpha);
  j.at("gate_silu").get_to(r.gate_silu);
  j.at("attn_weight_norm").get_to(r.attn_weight_norm);
  j.at("ffn_weight_norm").get_to(r.ffn_weight_norm);
}

// Population variance over the hidden dimension for each token, averaged
// over batch x positions. One value per captured layer input.
template <class T>
std::vector<double> measure_activation_variance(
    const std::vector<ad::Tensor<T>>& layer_inputs) {
  std::vector<double> out;
  out.reserve(layer_inputs.size());
  for (const auto& x : layer_inputs) {
    const auto& s = x.shape();
    if (s.empty()) throw ad::ShapeError("activation_variance: rank-0 input");
    const std::size_t d = s.back();
    const std::size_t rows = x.size() / d;
    const auto& v = x.values();
    double acc = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0, sq = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const double e = double(v[r * d + i]);
        sum += e;
        sq += e * e;
      }
      const double mean = sum / double(d);
      acc += sq / double(d) - mean * mean;
    }
    out.push_back(acc / double(rows));
  }
  return out;
}

// Reference estimator for validation: explicit two-pass per-token variance.
template <class T>
std::vector<double> measure_activation_variance_two_pass(
    const std::vector<ad::Tensor<T>>& layer_inputs) {
  std::vector<double> out;
  for (const auto& x : layer_inputs) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    const auto& v = x.values();
    double acc = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      double mean = 0;
      for (std::size_t i = 0; i < d; ++i) mean += double(v[r * d + i]);
      mean /= double(d);
      double var = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const double e = double(v[r * d + i]) - mean;
        var += e * e;
      }
      acc += var / double(d);
    }
    out.push_back(acc / double(rows));
  }
  return out;
}

namespace detail {

template <class T>
double sq_norm(const std::vector<T>& v) {
  if (v.empty()) return 0;
  return double(kern::ops<T>().sum_sq(v.data(), v.size()));
}

template <class T>
std::vector<ad::Tensor<T>*> layer_weights(model::LayerParams<T>& L,
                                          bool attn_only, bool ffn_only) {
  std::vector<ad::Tensor<T>*> w;
  if (!ffn_only) {
    w.push_back(&L.attn.Wq);
    w.push_back(&L.attn.Wk);
    w.push_back(&L.attn.Wv);
    w.push_back(&L.attn.Wo);
  }
  if (!attn_only) {
    w.push_back(&L.ffn.W_gate);
    w.push_back(&L.ffn.W_up);
    w.push_back(&L.ffn.W_down);
  }
  return w;
}

}  // namespace detail

// Per-layer L2 norm over the layer's parameter gradients (weights and norm
// gains; gate gradients are reported separately). Requires backward to have
// run: errors if any gradient buffer is absent.
template <class T>
std::vector<double> measure_grad_norms(model::TransformerModel<T>& m) {
  std::vector<double> out;
  for (auto& L : m.layer) {
    double ss = 0;
    auto weights = detail::layer_weights(L, false, false);
    std::vector<ad::Tensor<T>*> gains = {&L.norm_attn.gain, &L.norm_ffn.gain,
                                         &L.norm_attn_post.gain,
                                         &L.norm_ffn_post.gain};
    for (auto* t : weights) {
      if (t->grad().empty())
        throw std::logic_error("measure_grad_norms: gradients absent");
      ss += detail::sq_norm(t->grad());
    }
    for (auto* g : gains)
      if (!g->grad().empty()) ss += detail::sq_norm(g->grad());
    out.push_back(std::sqrt(ss));
  }
  return out;
}

// Per-layer |grad(alpha)|; zero for frozen gates.
template <class T>
std::vector<double> measure_gate_grad_norms(model::TransformerModel<T>& m) {
  std::vector<double> out;
  for (auto& L : m.layer)
    out.push_back(L.gate.alpha.grad().empty()
                      ? 0.0
                      : std::abs(double(L.gate.alpha.grad()[0])));
  return out;
}

struct GateState {
  double alpha = 0;
  double activated = 0;  // Act(alpha)
};

template <class T>
std::vector<GateState> gate_states(model::TransformerModel<T>& m) {
  std::vector<GateState> out;
  for (auto& L : m.layer) {
    const double a = double(L.gate.alpha.item());
    out.push_back({a, double(L.gate.activation(T(a)))});
  }
  return out;
}

struct WeightNorms {
  double attn = 0;
  double ffn = 0;
};

template <class T>
std::vector<WeightNorms> measure_weight_norms(model::TransformerModel<T>& m) {
  std::vector<WeightNorms> out;
  for (auto& L : m.layer) {
    double a = 0, f = 0;
    for (auto* t : detail::layer_weights(L, true, false))
      a += detail::sq_norm(t->values());
    for (auto* t : detail::layer_weights(L, false, true))
      f += detail::sq_norm(t->values());
    out.push_back({std::sqrt(a), std::sqrt(f)});
  }
  return out;
}

// One MetricsRecord per layer for an instrumented step. layer_inputs come
// from the training loop's capture hook; gradients must be post-backward.
template <class T>
std::vector<MetricsRecord> collect(std::size_t step,
                                   model::TransformerModel<T>& m,
                                   const std::vector<ad::Tensor<T>>& inputs) {
  auto vars = measure_activation_variance(inputs);
  auto gnorms = measure_grad_norms(m);
  auto gates = gate_states(m);
  auto wnorms = measure_weight_norms(m);
  if (vars.size() != m.layer.size())
    throw std::logic_error("collect: captured " + std::to_string(vars.size()) +
                           " layer inputs for " +
                           std::to_string(m.layer.size()) + " layers");
  std::vector<MetricsRecord> out;
  for (std::size_t l = 0; l < m.layer.size(); ++l) {
    MetricsRecord r;
    r.step = step;
    r.layer_index = l;
    r.act_var = vars[l];
    r.grad_norm = gnorms[l];
    r.gate_alpha = gates[l].alpha;
    r.gate_silu = gates[l].activated;
    r.attn_weight_norm = wnorms[l].attn;
    r.ffn_weight_norm = wnorms[l].ffn;
    out.push_back(r);
  }
  return out;
}

// ------------------------------------------------------------ importance

struct ImportanceReport {
  double base_loss = 0;
  std::vector<double> delta;  // eval-loss(layer removed) - base, per layer
};

// Evaluate with layer l replaced by the identity map (the whole layer is
// skipped, normalizations included). Pure: repeated calls agree bitwise.
template <class T>
ImportanceReport layer_importance(model::TransformerModel<T>& m,
                                  const data::Corpus& corpus,
                                  std::size_t n_tokens, std::size_t batch_size,
                                  std::size_t seq_len) {
  ad::NoGradGuard<T> off;
  const std::size_t per_batch = batch_size * seq_len;
  const std::size_t n_batches = std::max<std::size_t>(1, n_tokens / per_batch);
  auto eval_with = [&](std::ptrdiff_t skip) {
    double total = 0;
    for (std::size_t i = 0; i < n_batches; ++i) {
      auto b = corpus.eval_batch(i, batch_size);
      model::ForwardHooks<T> h;
      h.skip_layer = skip;
      auto logits = model_forward(m, b.inputs, batch_size, seq_len, &h);
      total += double(ad::cross_entropy(logits, b.targets).item());
    }
    return total / double(n_batches);
  };
  ImportanceReport rep;
  rep.base_loss = eval_with(-1);
  for (std::size_t l = 0; l < m.layer.size(); ++l)
    rep.delta.push_back(eval_with(std::ptrdiff_t(l)) - rep.base_loss);
  return rep;
}

// ------------------------------------------------------------- comparison

struct RunMetrics {
  std::vector<MetricsRecord> records;       // layer metrics, all steps
  std::vector<train::StepRecord> losses;    // per-step training losses
};

inline std::string metrics_to_jsonl(const std::vector<MetricsRecord>& recs) {
  std::ostringstream os;
  for (const auto& r : recs) os << nlohmann::json(r).dump() << "\n";
  return os.str();
}

inline std::vector<MetricsRecord> metrics_from_jsonl(std::istream& in) {
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line).get<MetricsRecord>());
  }
  return out;
}

// Per-layer ratios at the final instrumented step, plus loss-curve deltas.
// CSV header: metric,layer,value_a,value_b,ratio. Loss rows use the step
// number in the layer column. Errors if instrumentation schedules differ.
inline std::string compare_runs(const RunMetrics& a, const RunMetrics& b) {
  if (a.records.size() != b.records.size() ||
      a.losses.size() != b.losses.size())
    throw std::invalid_argument("compare_runs: instrumentation schedules differ");
  for (std::size_t i = 0; i < a.records.size(); ++i)
    if (a.records[i].step != b.records[i].step ||
        a.records[i].layer_index != b.records[i].layer_index)
      throw std::invalid_argument(
          "compare_runs: instrumentation schedules differ");

  std::ostringstream os;
  os.precision(17);
  os << "metric,layer,value_a,value_b,ratio\n";
  auto row = [&](const char* metric, std::size_t layer, double va, double vb) {
    os << metric << ',' << layer << ',' << va << ',' << vb << ','
       << (vb == 0 ? (va == 0 ? 1.0 : std::numeric_limits<double>::infinity())
                   : va / vb)
       << "\n";
  };
  if (!a.records.empty()) {
    const std::size_t last = a.records.back().step;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      if (a.records[i].step != last) continue;
      const auto& ra = a.records[i];
      const auto& rb = b.records[i];
      row("act_var", ra.layer_index, ra.act_var, rb.act_var);
      row("grad_norm", ra.layer_index, ra.grad_norm, rb.grad_norm);
      row("gate_silu", ra.layer_index, ra.gate_silu, rb.gate_silu);
      row("attn_weight_norm", ra.layer_index, ra.attn_weight_norm,
          rb.attn_weight_norm);
      row("ffn_weight_norm", ra.layer_index, ra.ffn_weight_norm,
          rb.ffn_weight_norm);
    }
  }
  for (std::size_t i = 0; i < a.losses.size(); ++i) {
    if (a.losses[i].step != b.losses[i].step)
      throw std::invalid_argument(
          "compare_runs: instrumentation schedules differ");
    row("train_loss", a.losses[i].step, a.losses[i].loss, b.losses[i].loss);
  }
  return os.str();
}

}  // namespace gpaslab::instrument
