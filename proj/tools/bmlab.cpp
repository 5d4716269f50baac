// bmlab command-line front end.
//
//   bmlab train|eval|ablate|visualize|flops|generate [--config <path>] [--out <dir>]
//         [--seed <u64>] [--set key=value ...]
//
// Exit codes: 0 success, 2 usage/config error, 3 runtime/numerical error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bmlab/commands.hpp"

namespace {

struct Options {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string matrix;
};

bmlab::ExperimentConfig effective_config(const Options& o) {
  bmlab::ExperimentConfig cfg = o.config_path.empty() ? bmlab::ExperimentConfig{} : bmlab::load_config(o.config_path);
  for (const auto& kv : o.overrides) bmlab::apply_override(cfg, kv);
  if (o.out) cfg.out = *o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.matrix.empty()) cfg.ablate_matrix = o.matrix;
  return cfg;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_path, "flat key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "output directory (overrides 'out')");
  cmd->add_option("--seed", o.seed, "experiment seed (overrides 'seed')");
  cmd->add_option("--set", o.overrides, "override a config key, key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"boundary-preserving mask head laboratory"};
  app.require_subcommand(1);
  Options opt;

  auto* train = app.add_subcommand("train", "train a head and write checkpoint.bin + loss.csv");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  auto* ablate = app.add_subcommand("ablate", "train/evaluate every row of an ablation matrix");
  auto* viz = app.add_subcommand("visualize", "write overlay PNGs for validation scenes");
  auto* flops = app.add_subcommand("flops", "per-layer mask-head MAC count");
  auto* gen = app.add_subcommand("generate", "write the train/val splits as BMDS1 files");
  for (auto* c : {train, eval, ablate, viz, flops, gen}) add_common(c, opt);
  ablate->add_option("matrix", opt.matrix, "fusion|loss|target|roi|compute (overrides 'ablate.matrix')");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const bmlab::ExperimentConfig cfg = effective_config(opt);
    if (*train) bmlab::cmd_train(cfg, std::cout);
    else if (*eval) bmlab::cmd_eval(cfg, std::cout);
    else if (*ablate) bmlab::cmd_ablate(cfg, std::cout);
    else if (*viz) bmlab::cmd_visualize(cfg, std::cout);
    else if (*flops) bmlab::cmd_flops(cfg, std::cout);
    else if (*gen) bmlab::cmd_generate(cfg, std::cout);
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
