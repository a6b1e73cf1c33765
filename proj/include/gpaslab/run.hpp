#pragma once

// Run plumbing shared by the CLI and the acceptance suite: strict JSON run
// configuration (unknown keys rejected), the instrumented training runner,
// and run-directory metrics I/O.
//
// metrics.jsonl carries two row kinds, one JSON object per line:
//   - loss rows: {step, split: "train"|"eval", loss, perplexity, lr,
//     global_grad_norm}
//   - layer rows (every instrument_every steps): one MetricsRecord per
//     layer, distinguished by the absence of a "split" key.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "gpaslab/checkpoint.hpp"
#include "gpaslab/instrument.hpp"
#include "gpaslab/model.hpp"
#include "gpaslab/train.hpp"

namespace gpaslab::run {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  std::string precision = "f64";  // f32 | f64
  std::string data_path = "data/corpus.txt";
  std::string out_dir = "runs/default";
  std::size_t instrument_every = 10;  // 0 disables layer metrics
  std::optional<std::string> gates_init;  // per-layer alpha, one per line

  void validate() const {
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be \"f32\" or \"f64\", got \"" +
                        precision + "\"");
    train.validate();
    model.scheme.validate(model.n_layers);
  }
};

// ------------------------------------------------------------ enum names

namespace detail {

template <class E>
struct NamePair {
  const char* name;
  E value;
};

inline constexpr NamePair<model::Scheme> kSchemes[] = {
    {"PostLN", model::Scheme::PostLN},     {"DeepNorm", model::Scheme::DeepNorm},
    {"PreLN", model::Scheme::PreLN},       {"SandwichLN", model::Scheme::SandwichLN},
    {"MixLN", model::Scheme::MixLN},       {"LNS", model::Scheme::LNS},
};
inline constexpr NamePair<model::GpasPosition> kPositions[] = {
    {"AfterSublayer", model::GpasPosition::AfterSublayer},
    {"BeforeSublayer", model::GpasPosition::BeforeSublayer},
    {"AfterLayerNorm", model::GpasPosition::AfterLayerNorm},
    {"AfterModule", model::GpasPosition::AfterModule},
};
inline constexpr NamePair<model::GpasVariant> kVariants[] = {
    {"StopGrad", model::GpasVariant::StopGrad},
    {"Naive", model::GpasVariant::Naive},
};
inline constexpr NamePair<layers::ActKind> kActs[] = {
    {"Identity", layers::ActKind::Identity}, {"ReLU", layers::ActKind::ReLU},
    {"LeakyReLU", layers::ActKind::LeakyReLU}, {"Tanh", layers::ActKind::Tanh},
    {"SiLU", layers::ActKind::SiLU}, {"ScaledSiLU", layers::ActKind::ScaledSiLU},
};

template <class E, std::size_t N>
E parse_enum(const NamePair<E> (&table)[N], const std::string& s,
             const char* what) {
  for (const auto& p : table)
    if (s == p.name) return p.value;
  throw ConfigError(std::string("unknown ") + what + ": \"" + s + "\"");
}

template <class E, std::size_t N>
const char* enum_name(const NamePair<E> (&table)[N], E v) {
  for (const auto& p : table)
    if (v == p.value) return p.name;
  return "?";
}

inline void reject_unknown(const nlohmann::json& j,
                           const std::vector<std::string>& allowed,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : allowed) ok = ok || it.key() == k;
    if (!ok)
      throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
  }
}

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

// ----------------------------------------------------------- JSON codecs

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::reject_unknown(j,
                         {"model", "scheme", "train", "precision", "data",
                          "out_dir", "instrument_every", "gates_init"},
                         "config root");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m,
                           {"vocab", "d_model", "n_heads", "n_layers", "d_ff",
                            "rope_base", "norm_eps", "init_std", "scale_embed"},
                           "\"model\"");
    detail::get_if(m, "vocab", c.model.vocab);
    detail::get_if(m, "d_model", c.model.d_model);
    detail::get_if(m, "n_heads", c.model.n_heads);
    detail::get_if(m, "n_layers", c.model.n_layers);
    detail::get_if(m, "d_ff", c.model.d_ff);
    detail::get_if(m, "rope_base", c.model.rope_base);
    detail::get_if(m, "norm_eps", c.model.norm_eps);
    detail::get_if(m, "init_std", c.model.init_std);
    detail::get_if(m, "scale_embed", c.model.scale_embed);
  }
  if (j.contains("scheme")) {
    const auto& s = j.at("scheme");
    detail::reject_unknown(s,
                           {"scheme", "gpas", "gpas_position", "gpas_variant",
                            "gate_activation", "gate_beta", "gate_slope",
                            "mix_postln_layers", "deepnorm_alpha",
                            "deepnorm_beta"},
                           "\"scheme\"");
    auto& sc = c.model.scheme;
    if (s.contains("scheme"))
      sc.scheme = detail::parse_enum(detail::kSchemes,
                                     s.at("scheme").get<std::string>(),
                                     "scheme");
    detail::get_if(s, "gpas", sc.gpas_enabled);
    if (s.contains("gpas_position"))
      sc.gpas_position =
          detail::parse_enum(detail::kPositions,
                             s.at("gpas_position").get<std::string>(),
                             "gpas_position");
    if (s.contains("gpas_variant"))
      sc.gpas_variant =
          detail::parse_enum(detail::kVariants,
                             s.at("gpas_variant").get<std::string>(),
                             "gpas_variant");
    if (s.contains("gate_activation"))
      sc.gate_activation.kind =
          detail::parse_enum(detail::kActs,
                             s.at("gate_activation").get<std::string>(),
                             "gate_activation");
    detail::get_if(s, "gate_beta", sc.gate_activation.beta);
    detail::get_if(s, "gate_slope", sc.gate_activation.slope);
    detail::get_if(s, "mix_postln_layers", sc.mix_postln_layers);
    detail::get_if(s, "deepnorm_alpha", sc.deepnorm_alpha);
    detail::get_if(s, "deepnorm_beta", sc.deepnorm_beta);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown(t,
                           {"learning_rate", "warmup_steps", "total_steps",
                            "batch_size", "seq_len", "global_clip",
                            "gate_clip", "seed", "freeze_gates",
                            "eval_interval", "eval_tokens"},
                           "\"train\"");
    detail::get_if(t, "learning_rate", c.train.learning_rate);
    detail::get_if(t, "warmup_steps", c.train.warmup_steps);
    detail::get_if(t, "total_steps", c.train.total_steps);
    detail::get_if(t, "batch_size", c.train.batch_size);
    detail::get_if(t, "seq_len", c.train.seq_len);
    if (t.contains("global_clip")) {
      if (t.at("global_clip").is_null())
        c.train.global_clip.reset();
      else
        c.train.global_clip = t.at("global_clip").get<double>();
    }
    if (t.contains("gate_clip")) {
      if (t.at("gate_clip").is_null())
        c.train.gate_clip.reset();
      else
        c.train.gate_clip = t.at("gate_clip").get<double>();
    }
    detail::get_if(t, "seed", c.train.seed);
    detail::get_if(t, "freeze_gates", c.train.freeze_gates);
    detail::get_if(t, "eval_interval", c.train.eval_interval);
    detail::get_if(t, "eval_tokens", c.train.eval_tokens);
  }
  detail::get_if(j, "precision", c.precision);
  detail::get_if(j, "data", c.data_path);
  detail::get_if(j, "out_dir", c.out_dir);
  detail::get_if(j, "instrument_every", c.instrument_every);
  if (j.contains("gates_init"))
    c.gates_init = j.at("gates_init").get<std::string>();
  c.validate();
  return c;
}

inline RunConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config not found: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// Fully resolved config (defaults filled) for the echo file.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = {{"vocab", c.model.vocab},
                {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"n_layers", c.model.n_layers},
                {"d_ff", c.model.ff_dim()},
                {"rope_base", c.model.rope_base},
                {"norm_eps", c.model.norm_eps},
                {"init_std", c.model.init_std},
                {"scale_embed", c.model.scale_embed}};
  const auto& sc = c.model.scheme;
  j["scheme"] = {
      {"scheme", detail::enum_name(detail::kSchemes, sc.scheme)},
      {"gpas", sc.gpas_enabled},
      {"gpas_position", detail::enum_name(detail::kPositions, sc.gpas_position)},
      {"gpas_variant", detail::enum_name(detail::kVariants, sc.gpas_variant)},
      {"gate_activation",
       detail::enum_name(detail::kActs, sc.gate_activation.kind)},
      {"gate_beta", sc.gate_activation.beta},
      {"gate_slope", sc.gate_activation.slope},
      {"mix_postln_layers", c.model.mix_split()},
      {"deepnorm_alpha", c.model.dn_alpha()},
      {"deepnorm_beta", c.model.dn_beta()}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"warmup_steps", c.train.warmup_steps},
                {"total_steps", c.train.total_steps},
                {"batch_size", c.train.batch_size},
                {"seq_len", c.train.seq_len},
                {"global_clip", c.train.global_clip
                                    ? nlohmann::json(*c.train.global_clip)
                                    : nlohmann::json(nullptr)},
                {"gate_clip", c.train.gate_clip
                                  ? nlohmann::json(*c.train.gate_clip)
                                  : nlohmann::json(nullptr)},
                {"seed", c.train.seed},
                {"freeze_gates", c.train.freeze_gates},
                {"eval_interval", c.train.eval_interval},
                {"eval_tokens", c.train.eval_tokens}};
  j["precision"] = c.precision;
  j["data"] = c.data_path;
  j["out_dir"] = c.out_dir;
  j["instrument_every"] = c.instrument_every;
  if (c.gates_init) j["gates_init"] = *c.gates_init;
  return j;
}

// GPASLAB_OUT, when set, becomes the root under which (relative) output
// directories are created.
inline std::filesystem::path resolve_out_dir(const std::string& out_dir) {
  std::filesystem::path p(out_dir);
  if (const char* root = std::getenv("GPASLAB_OUT"); root && *root)
    if (p.is_relative()) p = std::filesystem::path(root) / p;
  return p;
}

inline std::vector<double> read_gates_init(const std::string& path,
                                           std::size_t n_layers) {
  std::ifstream in(path);
  if (!in) throw ConfigError("gates-init file not found: " + path);
  std::vector<double> out;
  double v;
  while (in >> v) out.push_back(v);
  if (out.size() != n_layers)
    throw ConfigError("gates-init: expected " + std::to_string(n_layers) +
                      " values, got " + std::to_string(out.size()));
  return out;
}

// --------------------------------------------------------------- runner

template <class T>
train::RunSummary run_training(const RunConfig& rc) {
  rc.validate();
  const auto out = resolve_out_dir(rc.out_dir);
  std::filesystem::create_directories(out);
  {
    std::ofstream cfg(out / "resolved-config.json");
    cfg << config_to_json(rc).dump(2) << "\n";
  }
  auto corpus = data::Corpus::from_file(rc.data_path, rc.train.seq_len,
                                        rc.train.seed);
  auto m = model::make_model<T>(rc.model, rc.train.seed);
  if (rc.gates_init) {
    auto alphas = read_gates_init(*rc.gates_init, rc.model.n_layers);
    for (std::size_t l = 0; l < alphas.size(); ++l)
      m.layer[l].gate.alpha.values()[0] = T(alphas[l]);
  }
  auto opt = train::AdamState<T>::init(m);

  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot write metrics.jsonl");
  auto loss_row = [&](std::size_t step, const char* split, double loss,
                      double lr, double gnorm) {
    nlohmann::json j = {{"step", step},           {"split", split},
                        {"loss", loss},           {"perplexity", std::exp(loss)},
                        {"lr", lr},               {"global_grad_norm", gnorm}};
    metrics << j.dump() << "\n";
  };

  train::TrainHooks<T> hooks;
  hooks.on_step = [&](const train::StepRecord& r) {
    loss_row(r.step, "train", r.loss, r.lr, r.global_grad_norm);
  };
  hooks.on_eval = [&](const train::StepRecord& r, const train::EvalResult& e) {
    loss_row(r.step, "eval", e.loss, r.lr, r.global_grad_norm);
    ckpt::save(std::string(out / "checkpoint.bin"), m, opt, r.step + 1,
               rc.train.seed);
  };
  if (rc.instrument_every)
    hooks.instrument = [&](std::size_t step, model::TransformerModel<T>& mm,
                           const std::vector<ad::Tensor<T>>& inputs,
                           const train::ClipReport&) {
      if (step % rc.instrument_every != 0) return;
      for (const auto& rec : instrument::collect(step, mm, inputs))
        metrics << nlohmann::json(rec).dump() << "\n";
    };

  auto sum = train::train_loop(m, opt, corpus, rc.train, hooks);
  loss_row(rc.train.total_steps, "eval", sum.final_eval_loss,
           train::lr_at(rc.train.total_steps, rc.train), 0.0);
  ckpt::save(std::string(out / "checkpoint.bin"), m, opt,
             rc.train.total_steps, rc.train.seed);
  return sum;
}

inline train::RunSummary run_training_dispatch(const RunConfig& rc) {
  if (rc.precision == "f32") return run_training<float>(rc);
  return run_training<double>(rc);
}

// ----------------------------------------------------------- run-dir I/O

// Splits a metrics.jsonl stream into layer records and loss rows.
inline instrument::RunMetrics load_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics: " + path);
  instrument::RunMetrics rm;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.contains("split")) {
      if (j.at("split") != "train") continue;  // compare on train losses
      train::StepRecord r;
      j.at("step").get_to(r.step);
      j.at("loss").get_to(r.loss);
      j.at("lr").get_to(r.lr);
      j.at("global_grad_norm").get_to(r.global_grad_norm);
      rm.losses.push_back(r);
    } else {
      rm.records.push_back(j.get<instrument::MetricsRecord>());
    }
  }
  return rm;
}

}  // namespace gpaslab::run
