// gpaslab: desk-scale pretraining laboratory CLI.
//
// Commands: train, eval, importance, theory, compare.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gpaslab/instrument.hpp"
#include "gpaslab/run.hpp"
#include "gpaslab/theory.hpp"

namespace fs = std::filesystem;
using namespace gpaslab;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2;

struct TrainArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::string> out_dir;
  std::optional<std::string> gates_init;
  std::optional<std::string> scheme;
  std::optional<bool> gpas;
  bool freeze_gates = false;
};

run::RunConfig load_with_overrides(const TrainArgs& a) {
  auto cfg = run::config_from_file(a.config_path);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.steps) cfg.train.total_steps = *a.steps;
  if (a.out_dir) cfg.out_dir = *a.out_dir;
  if (a.gates_init) cfg.gates_init = *a.gates_init;
  if (a.scheme)
    cfg.model.scheme.scheme =
        run::detail::parse_enum(run::detail::kSchemes, *a.scheme, "scheme");
  if (a.gpas) cfg.model.scheme.gpas_enabled = *a.gpas;
  if (a.freeze_gates) cfg.train.freeze_gates = true;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  auto cfg = load_with_overrides(a);
  auto sum = run::run_training_dispatch(cfg);
  std::cout << "initial_eval_loss " << sum.initial_eval_loss << "\n"
            << "final_train_loss  " << sum.final_train_loss << "\n"
            << "final_eval_loss   " << sum.final_eval_loss << "\n"
            << "final_eval_ppl    " << sum.final_eval_ppl << "\n"
            << "out_dir           " << run::resolve_out_dir(cfg.out_dir).string()
            << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             std::size_t tokens, std::size_t batch, std::size_t seq) {
  auto loaded = ckpt::load<double>(ckpt_path);
  auto corpus = data::Corpus::from_file(data_path, seq, loaded.seed);
  auto r = train::evaluate(loaded.model, corpus, tokens, batch, seq);
  std::cout << "loss " << r.loss << "\nperplexity " << r.perplexity << "\n";
  return kOk;
}

int cmd_importance(const std::string& ckpt_path, const std::string& data_path,
                   std::size_t tokens, std::size_t batch, std::size_t seq,
                   const std::string& out_path) {
  auto loaded = ckpt::load<double>(ckpt_path);
  auto corpus = data::Corpus::from_file(data_path, seq, loaded.seed);
  auto rep = instrument::layer_importance(loaded.model, corpus, tokens, batch,
                                          seq);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out.precision(17);
  out << "layer,delta,base_loss\n";
  for (std::size_t l = 0; l < rep.delta.size(); ++l)
    out << l << ',' << rep.delta[l] << ',' << rep.base_loss << "\n";
  std::cout << "wrote " << out_path << " (base loss " << rep.base_loss
            << ")\n";
  return kOk;
}

int cmd_theory(double sigma1, double alpha, std::size_t L, double A, double B,
               const std::string& out_path) {
  theory::TheoryParams p;
  p.sigma1_sq = sigma1;
  p.alphas.assign(L - 1, alpha);
  p.A = A;
  p.B = B;
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  auto csv = theory::trajectory_csv(p, alpha == 0.0 ? "preln" : "gpas");
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << csv;
  std::cout << "wrote " << out_path << "\n";
  return kOk;
}

int cmd_compare(const std::string& dir_a, const std::string& dir_b,
                const std::string& out_path) {
  auto a = run::load_metrics((fs::path(dir_a) / "metrics.jsonl").string());
  auto b = run::load_metrics((fs::path(dir_b) / "metrics.jsonl").string());
  std::string csv;
  try {
    csv = instrument::compare_runs(a, b);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << csv;
  std::cout << "wrote " << out_path << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gpaslab: desk-scale GPAS pretraining laboratory"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train from a JSON config");
  train_cmd->add_option("config", ta.config_path, "JSON run config")
      ->required();
  train_cmd->add_option("--seed", ta.seed, "override train.seed");
  train_cmd->add_option("--steps", ta.steps, "override train.total_steps");
  train_cmd->add_option("--out-dir", ta.out_dir, "override out_dir");
  train_cmd->add_option("--gates-init", ta.gates_init,
                        "per-layer alpha file (one value per line)");
  train_cmd->add_option("--scheme", ta.scheme, "override scheme name");
  train_cmd->add_option("--gpas", ta.gpas, "override gpas on/off");
  train_cmd->add_flag("--freeze-gates", ta.freeze_gates, "freeze all gates");

  std::string ckpt_path, data_path = "data/corpus.txt";
  std::size_t tokens = 65536, batch = 32, seq = 256;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("checkpoint", ckpt_path)->required();
  eval_cmd->add_option("--data", data_path);
  eval_cmd->add_option("--tokens", tokens);
  eval_cmd->add_option("--batch", batch);
  eval_cmd->add_option("--seq", seq);

  std::string imp_out = "importance.csv";
  auto* imp_cmd =
      app.add_subcommand("importance", "per-layer removal importance");
  imp_cmd->add_option("checkpoint", ckpt_path)->required();
  imp_cmd->add_option("--data", data_path);
  imp_cmd->add_option("--tokens", tokens);
  imp_cmd->add_option("--batch", batch);
  imp_cmd->add_option("--seq", seq);
  imp_cmd->add_option("--out", imp_out);

  double sigma1 = 1.0, alpha = 0.0, A = 1.0, B = 1.0;
  std::size_t depth = 6;
  std::string theory_out = "theory.csv";
  auto* theory_cmd =
      app.add_subcommand("theory", "variance recurrence / bounds / UP");
  theory_cmd->add_option("--sigma1", sigma1, "initial variance");
  theory_cmd->add_option("--alpha", alpha, "constant gate schedule");
  theory_cmd->add_option("--depth,-L", depth, "number of layers")
      ->check(CLI::Range(std::size_t(2), std::size_t(1) << 20));
  theory_cmd->add_option("--A", A);
  theory_cmd->add_option("--B", B);
  theory_cmd->add_option("--out", theory_out);

  std::string dir_a, dir_b, cmp_out = "comparison.csv";
  auto* cmp_cmd = app.add_subcommand("compare", "compare two run directories");
  cmp_cmd->add_option("run_a", dir_a)->required();
  cmp_cmd->add_option("run_b", dir_b)->required();
  cmp_cmd->add_option("--out", cmp_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(ckpt_path, data_path, tokens, batch, seq);
    if (*imp_cmd)
      return cmd_importance(ckpt_path, data_path, tokens, batch, seq, imp_out);
    if (*theory_cmd)
      return cmd_theory(sigma1, alpha, depth, A, B, theory_out);
    if (*cmp_cmd) return cmd_compare(dir_a, dir_b, cmp_out);
  } catch (const run::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ckpt::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
