#pragma once

// Versioned binary checkpoint: magic "GPASLAB1", model config, all
// parameter buffers (stored as 64-bit), gate values, Adam moments, step
// counter, and the run seed (the only RNG state: batching is a pure
// function of seed and step).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpaslab/model.hpp"
#include "gpaslab/train.hpp"

namespace gpaslab::ckpt {

inline constexpr char kMagic[8] = {'G', 'P', 'A', 'S', 'L', 'A', 'B', '1'};
inline constexpr std::uint32_t kVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u64(std::ostream& o, std::uint64_t v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_f64(std::ostream& o, double v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint64_t get_u64(std::istream& i) {
  std::uint64_t v;
  i.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!i) throw CheckpointError("checkpoint truncated");
  return v;
}
inline double get_f64(std::istream& i) {
  double v;
  i.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!i) throw CheckpointError("checkpoint truncated");
  return v;
}

template <class T>
void put_buf(std::ostream& o, const std::vector<T>& v) {
  put_u64(o, v.size());
  for (T x : v) put_f64(o, double(x));
}
template <class T>
void get_buf(std::istream& i, std::vector<T>& v) {
  const std::uint64_t n = get_u64(i);
  if (n != v.size())
    throw CheckpointError("checkpoint buffer size mismatch: stored " +
                          std::to_string(n) + ", expected " +
                          std::to_string(v.size()));
  for (auto& x : v) x = T(get_f64(i));
}

inline void put_config(std::ostream& o, const model::ModelConfig& c) {
  put_u64(o, c.vocab);
  put_u64(o, c.d_model);
  put_u64(o, c.n_heads);
  put_u64(o, c.n_layers);
  put_u64(o, c.d_ff);
  put_f64(o, c.rope_base);
  put_f64(o, c.norm_eps);
  put_f64(o, c.init_std);
  put_u64(o, c.scale_embed ? 1 : 0);
  put_u64(o, std::uint64_t(c.scheme.scheme));
  put_u64(o, c.scheme.gpas_enabled ? 1 : 0);
  put_u64(o, std::uint64_t(c.scheme.gpas_position));
  put_u64(o, std::uint64_t(c.scheme.gpas_variant));
  put_u64(o, std::uint64_t(c.scheme.gate_activation.kind));
  put_f64(o, c.scheme.gate_activation.beta);
  put_f64(o, c.scheme.gate_activation.slope);
  put_u64(o, c.scheme.mix_postln_layers);
  put_f64(o, c.scheme.deepnorm_alpha);
  put_f64(o, c.scheme.deepnorm_beta);
}

inline model::ModelConfig get_config(std::istream& i) {
  model::ModelConfig c;
  c.vocab = get_u64(i);
  c.d_model = get_u64(i);
  c.n_heads = get_u64(i);
  c.n_layers = get_u64(i);
  c.d_ff = get_u64(i);
  c.rope_base = get_f64(i);
  c.norm_eps = get_f64(i);
  c.init_std = get_f64(i);
  c.scale_embed = get_u64(i) != 0;
  c.scheme.scheme = model::Scheme(get_u64(i));
  c.scheme.gpas_enabled = get_u64(i) != 0;
  c.scheme.gpas_position = model::GpasPosition(get_u64(i));
  c.scheme.gpas_variant = model::GpasVariant(get_u64(i));
  c.scheme.gate_activation.kind = layers::ActKind(get_u64(i));
  c.scheme.gate_activation.beta = get_f64(i);
  c.scheme.gate_activation.slope = get_f64(i);
  c.scheme.mix_postln_layers = get_u64(i);
  c.scheme.deepnorm_alpha = get_f64(i);
  c.scheme.deepnorm_beta = get_f64(i);
  return c;
}

}  // namespace detail

template <class T>
void save(const std::string& path, model::TransformerModel<T>& m,
          const train::AdamState<T>& opt, std::size_t step,
          std::uint64_t seed) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw CheckpointError("cannot write checkpoint: " + path);
  o.write(kMagic, sizeof kMagic);
  detail::put_u64(o, kVersion);
  detail::put_config(o, m.cfg);
  detail::put_u64(o, step);
  detail::put_u64(o, seed);

  auto params = m.parameters();
  detail::put_u64(o, params.size());
  for (auto& p : params) detail::put_buf(o, p.tensor.values());
  detail::put_u64(o, m.layer.size());
  for (auto& L : m.layer) detail::put_f64(o, double(L.gate.alpha.item()));

  detail::put_u64(o, opt.m.size());
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    detail::put_buf(o, opt.m[i]);
    detail::put_buf(o, opt.v[i]);
  }
  detail::put_u64(o, opt.step);
  if (!o) throw CheckpointError("write failure: " + path);
}

template <class T>
struct Loaded {
  model::TransformerModel<T> model;
  train::AdamState<T> opt;
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

template <class T>
Loaded<T> load(const std::string& path) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  i.read(magic, sizeof magic);
  if (!i || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a GPASLAB1 checkpoint: " + path);
  const auto version = detail::get_u64(i);
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));
  Loaded<T> out;
  auto cfg = detail::get_config(i);
  out.step = detail::get_u64(i);
  out.seed = detail::get_u64(i);
  out.model = model::make_model<T>(cfg, out.seed);

  auto params = out.model.parameters();
  if (detail::get_u64(i) != params.size())
    throw CheckpointError("checkpoint parameter count mismatch");
  for (auto& p : params) detail::get_buf(i, p.tensor.values());
  if (detail::get_u64(i) != out.model.layer.size())
    throw CheckpointError("checkpoint layer count mismatch");
  for (auto& L : out.model.layer)
    L.gate.alpha.values()[0] = T(detail::get_f64(i));

  out.opt = train::AdamState<T>::init(out.model);
  if (detail::get_u64(i) != out.opt.m.size())
    throw CheckpointError("checkpoint optimizer slot mismatch");
  for (std::size_t k = 0; k < out.opt.m.size(); ++k) {
    detail::get_buf(i, out.opt.m[k]);
    detail::get_buf(i, out.opt.v[k]);
  }
  out.opt.step = detail::get_u64(i);
  return out;
}

}  // namespace gpaslab::ckpt
