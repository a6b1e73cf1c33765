#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gpaslab/run.hpp"

using namespace gpaslab;
namespace fs = std::filesystem;

namespace {

nlohmann::json base_config() {
  return nlohmann::json::parse(R"({
    "model": {"vocab": 256, "d_model": 32, "n_heads": 2, "n_layers": 2},
    "scheme": {"scheme": "PreLN", "gpas": true},
    "train": {"total_steps": 8, "warmup_steps": 2, "batch_size": 2,
              "seq_len": 32, "seed": 3, "eval_interval": 4,
              "eval_tokens": 512},
    "data": "data/corpus.txt",
    "out_dir": "run_a",
    "instrument_every": 2
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config parsing: defaults, enums, and strictness") {
  auto cfg = run::config_from_json(base_config());
  CHECK(cfg.model.d_model == 32);
  CHECK(cfg.model.scheme.gpas_enabled);
  CHECK(cfg.train.learning_rate == 1e-3);     // default preserved
  CHECK(cfg.train.gate_clip == 0.01);         // default preserved
  CHECK(cfg.precision == "f64");
  CHECK(cfg.instrument_every == 2);

  SUBCASE("unknown keys rejected at every level") {
    auto j = base_config();
    j["surprise"] = 1;
    CHECK_THROWS_AS(run::config_from_json(j), run::ConfigError);
    j = base_config();
    j["model"]["d_modl"] = 64;
    CHECK_THROWS_AS(run::config_from_json(j), run::ConfigError);
    j = base_config();
    j["scheme"]["gpas_enabled"] = true;  // correct key is "gpas"
    CHECK_THROWS_AS(run::config_from_json(j), run::ConfigError);
    j = base_config();
    j["train"]["lr"] = 1e-3;
    CHECK_THROWS_AS(run::config_from_json(j), run::ConfigError);
  }
  SUBCASE("bad enum and precision values") {
    auto j = base_config();
    j["scheme"]["scheme"] = "PreLNN";
    CHECK_THROWS_AS(run::config_from_json(j), run::ConfigError);
    j = base_config();
    j["precision"] = "f16";
    CHECK_THROWS_AS(run::config_from_json(j), run::ConfigError);
  }
  SUBCASE("null disables optional clips") {
    auto j = base_config();
    j["train"]["global_clip"] = nullptr;
    auto c = run::config_from_json(j);
    CHECK(!c.train.global_clip.has_value());
  }
  SUBCASE("invalid train settings rejected at load") {
    auto j = base_config();
    j["train"]["warmup_steps"] = 100;  // > total_steps
    CHECK_THROWS(run::config_from_json(j));
  }
}

TEST_CASE("resolved config echo round-trips and fills derived fields") {
  auto cfg = run::config_from_json(base_config());
  auto echoed = run::config_to_json(cfg);
  CHECK(echoed["model"]["d_ff"].get<std::size_t>() ==
        cfg.model.ff_dim());  // derived value materialized
  CHECK(echoed["scheme"]["gpas_variant"] == "StopGrad");
  auto cfg2 = run::config_from_json(echoed);
  CHECK(run::config_to_json(cfg2) == echoed);
}

TEST_CASE("GPASLAB_OUT overrides relative output roots") {
  unsetenv("GPASLAB_OUT");
  CHECK(run::resolve_out_dir("runs/x") == fs::path("runs/x"));
  setenv("GPASLAB_OUT", "/tmp/gpaslab_root", 1);
  CHECK(run::resolve_out_dir("runs/x") == fs::path("/tmp/gpaslab_root/runs/x"));
  CHECK(run::resolve_out_dir("/abs/x") == fs::path("/abs/x"));
  unsetenv("GPASLAB_OUT");
}

TEST_CASE("gates-init file contract") {
  const std::string p = "/tmp/gpaslab_gates.txt";
  {
    std::ofstream o(p);
    o << "-0.5\n0.25\n";
  }
  auto v = run::read_gates_init(p, 2);
  CHECK(v == std::vector<double>{-0.5, 0.25});
  CHECK_THROWS_AS(run::read_gates_init(p, 3), run::ConfigError);
  CHECK_THROWS_AS(run::read_gates_init("/nonexistent/g.txt", 2),
                  run::ConfigError);
  fs::remove(p);
}

TEST_CASE("run_training writes artifacts; metrics are byte-identical") {
  setenv("GPASLAB_OUT", "/tmp/gpaslab_run_test", 1);
  fs::remove_all("/tmp/gpaslab_run_test");
  auto cfg = run::config_from_json(base_config());

  auto s1 = run::run_training_dispatch(cfg);
  const fs::path dir = "/tmp/gpaslab_run_test/run_a";
  REQUIRE(fs::exists(dir / "metrics.jsonl"));
  REQUIRE(fs::exists(dir / "resolved-config.json"));
  REQUIRE(fs::exists(dir / "checkpoint.bin"));
  auto first = slurp(dir / "metrics.jsonl");

  // Identical config + seed: byte-identical metrics.jsonl.
  auto s2 = run::run_training_dispatch(cfg);
  CHECK(slurp(dir / "metrics.jsonl") == first);
  CHECK(s1.final_eval_loss == s2.final_eval_loss);

  // First layer-metrics rows report alpha = 0 for every layer.
  auto rm = run::load_metrics((dir / "metrics.jsonl").string());
  REQUIRE(!rm.records.empty());
  for (std::size_t l = 0; l < cfg.model.n_layers; ++l) {
    CHECK(rm.records[l].step == 0);
    CHECK(rm.records[l].gate_alpha == 0.0);
  }
  CHECK(rm.losses.size() == cfg.train.total_steps);

  // Gates-init steers the initial alphas.
  {
    std::ofstream o("/tmp/gpaslab_run_test/gates.txt");
    o << "0.5\n-0.5\n";
  }
  auto cfg2 = cfg;
  cfg2.out_dir = "run_b";
  cfg2.gates_init = "/tmp/gpaslab_run_test/gates.txt";
  cfg2.train.freeze_gates = true;
  run::run_training_dispatch(cfg2);
  auto rm2 = run::load_metrics("/tmp/gpaslab_run_test/run_b/metrics.jsonl");
  CHECK(rm2.records[0].gate_alpha == 0.5);
  CHECK(rm2.records[1].gate_alpha == -0.5);
  CHECK(rm2.records.back().gate_alpha == -0.5);  // frozen throughout

  // Self-comparison of a loaded run gives all-1.0 ratios.
  auto csv = instrument::compare_runs(rm, rm);
  CHECK(csv.find("metric,layer,value_a,value_b,ratio") == 0);

  // The saved checkpoint reloads and evaluates to the reported loss.
  auto loaded = ckpt::load<double>((dir / "checkpoint.bin").string());
  auto corpus = data::Corpus::from_file(cfg.data_path, cfg.train.seq_len,
                                        cfg.train.seed);
  auto ev = train::evaluate(loaded.model, corpus, cfg.train.eval_tokens,
                            cfg.train.batch_size, cfg.train.seq_len);
  CHECK(ev.loss == s1.final_eval_loss);

  unsetenv("GPASLAB_OUT");
  fs::remove_all("/tmp/gpaslab_run_test");
}

TEST_CASE("f32 precision dispatch runs") {
  setenv("GPASLAB_OUT", "/tmp/gpaslab_run_f32", 1);
  fs::remove_all("/tmp/gpaslab_run_f32");
  auto cfg = run::config_from_json(base_config());
  cfg.precision = "f32";
  cfg.train.total_steps = 2;
  cfg.train.warmup_steps = 1;
  cfg.train.eval_interval = 0;
  auto s = run::run_training_dispatch(cfg);
  CHECK(std::isfinite(s.final_eval_loss));
  unsetenv("GPASLAB_OUT");
  fs::remove_all("/tmp/gpaslab_run_f32");
}
