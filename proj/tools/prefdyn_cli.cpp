// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prefdyn/experiment.hpp"

namespace ex = prefdyn::experiment;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "base seed (overrides the config's seed list)");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--format", c.format, "output format")->check(CLI::IsMember({"table", "kv"}));
}

ex::ExperimentConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? ex::ExperimentConfig{} : ex::load_config(c.config);
  if (c.seed) {
    cfg.base_seed = *c.seed;
    cfg.seed_list.clear();
  }
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.format.empty()) cfg.format = ex::parse_format(c.format);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reward-margin gradient-flow laboratory for preference optimization"};
  app.set_version_flag("--version", std::string(PREFDYN_VERSION));
  app.require_subcommand(1);

  Common simulate_opts, sweep_opts, conc_opts, mt_opts;
  auto* simulate = app.add_subcommand("simulate", "integrate margins for each seed and check the sandwich bounds");
  add_common(simulate, simulate_opts);

  auto* sweep = app.add_subcommand("sweep", "vary one parameter and record margin growth");
  add_common(sweep, sweep_opts);
  std::string vary;
  std::vector<double> values;
  sweep->add_option("--vary", vary, "K, Q, beta, v or l_b")->check(CLI::IsMember({"K", "Q", "beta", "v", "l_b"}));
  sweep->add_option("--values", values, "parameter values")->delimiter(',');

  auto* conc = app.add_subcommand("concentration", "Monte Carlo pass rates of the interaction concentration bounds");
  add_common(conc, conc_opts);
  std::optional<std::size_t> trials;
  conc->add_option("--trials", trials, "number of independent datasets");

  auto* mt = app.add_subcommand("multitoken-verify", "check the multi-token gradient formulas numerically");
  add_common(mt, mt_opts);
  std::string batch_path;
  mt->add_option("--batch", batch_path, "optional batch file: sample_id, side, position, token, embedding...");

  auto* embed = app.add_subcommand("embed-analyze", "per-concept mean cosine similarity of an embedding corpus");
  std::string input, output;
  bool subtract = false;
  embed->add_option("--input", input, "corpus: header, then label, sign, embedding...")->required()->check(CLI::ExistingFile);
  embed->add_option("--output", output, "similarity matrix output path")->required();
  embed->add_flag("--subtract-mean", subtract, "remove the global mean embedding first");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) return ex::run_simulate(resolve(simulate_opts)).exit_code;
    if (*sweep) {
      auto cfg = resolve(sweep_opts);
      return ex::run_sweep(cfg, vary.empty() ? cfg.sweep_vary : vary, values.empty() ? cfg.sweep_values : values).exit_code;
    }
    if (*conc) {
      auto cfg = resolve(conc_opts);
      return ex::run_concentration(cfg, trials.value_or(cfg.concentration_trials)).exit_code;
    }
    if (*mt) {
      auto cfg = resolve(mt_opts);
      if (!batch_path.empty()) cfg.mt_batch_path = batch_path;
      return ex::run_multitoken_verify(cfg).exit_code;
    }
    if (*embed) return ex::run_embed_analyze(input, output, subtract).exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
