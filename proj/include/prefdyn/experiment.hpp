// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration behind the command-line tool: configuration
// parsing, the five run modes, and their file outputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefdyn/bounds.hpp"
#include "prefdyn/dynamics.hpp"
#include "prefdyn/embedanalysis.hpp"
#include "prefdyn/interaction.hpp"
#include "prefdyn/multitoken.hpp"
#include "prefdyn/parallel.hpp"
#include "prefdyn/prefdist.hpp"
#include "prefdyn/tabular.hpp"

#ifndef PREFDYN_VERSION
#define PREFDYN_VERSION "0.0.0"
#endif

namespace prefdyn::experiment {

using nlohmann::json;

enum class Format { table, kv };

inline Format parse_format(const std::string& s) {
  if (s == "table") return Format::table;
  if (s == "kv") return Format::kv;
  throw std::invalid_argument("unknown format '" + s + "' (expected table or kv)");
}

struct ExperimentConfig {
  DistributionSpec distribution = DistributionSpec::make(1, 100, 500, 0.025, 0.5, 1);
  std::size_t z_target = 1;

  SimConfig sim = [] {
    SimConfig s;
    s.record_every = 10;
    return s;
  }();
  std::string weight_fn = "dpo";

  double c_const = 1.0;
  std::optional<double> epsilon;
  bool debug_appendix = false;

  std::size_t fresh_count = 1000;
  std::uint64_t base_seed = 0;
  std::size_t replications = 1;
  std::vector<std::uint64_t> seed_list;  // overrides base_seed/replications when nonempty

  std::string out_dir = "out";
  Format format = Format::table;
  bool export_dataset = true;
  bool dump_matrix = false;
  bool write_trajectory = true;

  std::string sweep_vary = "K";
  std::vector<double> sweep_values = {1, 2, 4, 8, 16};
  double slope_fraction = 0.1;
  double horizon_fraction = 1.0;

  std::size_t concentration_trials = 1000;
  std::optional<double> min_pass_rate;

  std::size_t mt_instances = 100;
  std::size_t mt_vocab = 6;
  std::size_t mt_dim = 4;
  std::size_t mt_length = 3;
  std::size_t mt_batch = 4;
  double mt_beta = 1.0;
  double mt_fd_step = 1e-5;
  double mt_decomposition_tol = 1e-12;
  double mt_fd_tol = 1e-4;
  double mt_reduction_tol = 1e-12;
  std::string mt_batch_path;

  std::vector<std::uint64_t> seeds() const {
    if (!seed_list.empty()) return seed_list;
    std::vector<std::uint64_t> out;
    for (std::size_t r = 0; r < replications; ++r) out.push_back(base_seed + r);
    return out;
  }

  void validate() const {
    distribution.validate();
    sim.resolved(distribution.n(), distribution.q);
    if (!(c_const > 0)) throw std::invalid_argument("bounds.c_const must be positive");
    if (epsilon && !(*epsilon > 0)) throw std::invalid_argument("bounds.epsilon must be positive");
    if (seeds().empty()) throw std::invalid_argument("at least one seed is required");
    if (!(slope_fraction > 0 && slope_fraction <= horizon_fraction))
      throw std::invalid_argument("sweep.slope_fraction must lie in (0, horizon_fraction]");
    if (!(horizon_fraction > 0)) throw std::invalid_argument("sweep.horizon_fraction must be positive");
  }
};

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key) && !j.at(key).is_null()) dst = j.at(key).get<T>();
}

}  // namespace detail

/// Every field is optional; missing ones keep the valid-regime baseline
/// (K=1, Q=100, d=500, v=0.025, l_b=0.5, Z=1, beta=tau=1).
inline ExperimentConfig config_from_json(const json& root) {
  using detail::read_opt;
  ExperimentConfig c;
  if (!root.is_object()) throw std::invalid_argument("configuration must be a JSON object");
  if (root.contains("distribution")) {
    const auto& d = root.at("distribution");
    auto& s = c.distribution;
    read_opt(d, "K", s.k);
    read_opt(d, "Q", s.q);
    read_opt(d, "d", s.d);
    read_opt(d, "v", s.v);
    read_opt(d, "l_b", s.l_b);
    read_opt(d, "Z", c.z_target);
    if (d.contains("token_assignment")) {
      s.token_assignment.clear();
      for (const auto& p : d.at("token_assignment")) {
        if (!p.is_array() || p.size() != 2) throw std::invalid_argument("token_assignment entries must be [preferred, rejected]");
        s.token_assignment.push_back({p[0].get<TokenId>(), p[1].get<TokenId>()});
      }
    } else {
      if (s.k == 0 || c.z_target == 0) throw std::invalid_argument("distribution.K and distribution.Z must be >= 1");
      s.token_assignment = default_token_assignment(s.k, c.z_target);
    }
    s.vocab_size = vocab_size_for(s.token_assignment);
    read_opt(d, "vocab_size", s.vocab_size);
  }
  if (root.contains("sim")) {
    const auto& j = root.at("sim");
    read_opt(j, "beta", c.sim.beta);
    read_opt(j, "tau", c.sim.tau);
    if (j.contains("step") && !j.at("step").is_null()) c.sim.step = j.at("step").get<double>();
    if (j.contains("horizon") && !j.at("horizon").is_null()) c.sim.horizon = j.at("horizon").get<double>();
    if (j.contains("integrator")) c.sim.integrator = parse_integrator(j.at("integrator").get<std::string>());
    read_opt(j, "record_every", c.sim.record_every);
    read_opt(j, "weight_fn", c.weight_fn);
  }
  c.sim.weight = set_weight_fn(c.weight_fn);
  if (root.contains("bounds")) {
    const auto& j = root.at("bounds");
    read_opt(j, "c_const", c.c_const);
    if (j.contains("epsilon") && !j.at("epsilon").is_null()) c.epsilon = j.at("epsilon").get<double>();
    read_opt(j, "debug_appendix", c.debug_appendix);
  }
  read_opt(root, "fresh_count", c.fresh_count);
  if (root.contains("seeds")) {
    const auto& j = root.at("seeds");
    if (j.is_array()) {
      c.seed_list = j.get<std::vector<std::uint64_t>>();
    } else {
      read_opt(j, "base_seed", c.base_seed);
      read_opt(j, "replications", c.replications);
    }
  }
  if (root.contains("outputs")) {
    const auto& j = root.at("outputs");
    read_opt(j, "dir", c.out_dir);
    if (j.contains("format")) c.format = parse_format(j.at("format").get<std::string>());
    read_opt(j, "export_dataset", c.export_dataset);
    read_opt(j, "dump_matrix", c.dump_matrix);
    read_opt(j, "write_trajectory", c.write_trajectory);
  }
  if (root.contains("sweep")) {
    const auto& j = root.at("sweep");
    read_opt(j, "vary", c.sweep_vary);
    read_opt(j, "values", c.sweep_values);
    read_opt(j, "slope_fraction", c.slope_fraction);
    read_opt(j, "horizon_fraction", c.horizon_fraction);
  }
  if (root.contains("concentration")) {
    const auto& j = root.at("concentration");
    read_opt(j, "trials", c.concentration_trials);
    if (j.contains("min_pass_rate") && !j.at("min_pass_rate").is_null()) c.min_pass_rate = j.at("min_pass_rate").get<double>();
  }
  if (root.contains("multitoken")) {
    const auto& j = root.at("multitoken");
    read_opt(j, "instances", c.mt_instances);
    read_opt(j, "vocab_size", c.mt_vocab);
    read_opt(j, "d", c.mt_dim);
    read_opt(j, "length", c.mt_length);
    read_opt(j, "batch_size", c.mt_batch);
    read_opt(j, "beta", c.mt_beta);
    read_opt(j, "fd_step", c.mt_fd_step);
    read_opt(j, "decomposition_tol", c.mt_decomposition_tol);
    read_opt(j, "fd_tol", c.mt_fd_tol);
    read_opt(j, "reduction_tol", c.mt_reduction_tol);
    read_opt(j, "batch_path", c.mt_batch_path);
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  auto in = tabular::open_for_read(path);
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("cannot parse config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

inline json to_json(const ExperimentConfig& c) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {
      {"distribution", to_json(c.distribution)},
      {"sim",
       {{"beta", c.sim.beta},
        {"tau", c.sim.tau},
        {"step", opt(c.sim.step)},
        {"horizon", opt(c.sim.horizon)},
        {"integrator", to_string(c.sim.integrator)},
        {"record_every", c.sim.record_every},
        {"weight_fn", c.weight_fn}}},
      {"bounds", {{"c_const", c.c_const}, {"epsilon", opt(c.epsilon)}, {"debug_appendix", c.debug_appendix}}},
      {"fresh_count", c.fresh_count},
      {"seeds", c.seeds()},
      {"outputs",
       {{"dir", c.out_dir},
        {"format", c.format == Format::table ? "table" : "kv"},
        {"export_dataset", c.export_dataset},
        {"dump_matrix", c.dump_matrix},
        {"write_trajectory", c.write_trajectory}}},
      {"sweep",
       {{"vary", c.sweep_vary},
        {"values", c.sweep_values},
        {"slope_fraction", c.slope_fraction},
        {"horizon_fraction", c.horizon_fraction}}},
      {"concentration", {{"trials", c.concentration_trials}, {"min_pass_rate", opt(c.min_pass_rate)}}},
      {"multitoken",
       {{"instances", c.mt_instances},
        {"vocab_size", c.mt_vocab},
        {"d", c.mt_dim},
        {"length", c.mt_length},
        {"batch_size", c.mt_batch},
        {"beta", c.mt_beta},
        {"fd_step", c.mt_fd_step},
        {"decomposition_tol", c.mt_decomposition_tol},
        {"fd_tol", c.mt_fd_tol},
        {"reduction_tol", c.mt_reduction_tol},
        {"batch_path", c.mt_batch_path}}},
  };
}

namespace detail {

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec || !std::filesystem::is_directory(p)) throw std::runtime_error("cannot create output directory '" + dir + "'");
  return p;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = tabular::open_for_write(path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

inline void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& command) {
  json m = {{"command", command},
            {"artifact", "prefdyn"},
            {"version", PREFDYN_VERSION},
            {"threads_env", kThreadsEnv},
            {"config", to_json(cfg)}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline std::string fmt(double x) { return tabular::format_real(x); }

}  // namespace detail

// --- simulate ---------------------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  SandwichResult sandwich;
  double fresh_risk = 0;           // empirical 0-1 risk at the final time
  double final_mean_margin = 0;
  double final_min_margin = 0;
  double final_max_margin = 0;
  double final_loss = 0;
  bool monotone = true;
};

struct SimulateResult {
  bounds::TheoryReport theory;
  std::vector<SeedOutcome> seeds;
  bool checks_passed = true;
  int exit_code = 0;
};

/// Runs one seed end to end; when `dir` is set, writes the per-seed files.
inline SeedOutcome simulate_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                 const std::optional<std::filesystem::path>& dir = std::nullopt) {
  const auto data = sample_dataset(cfg.distribution, seed);
  std::vector<PreferenceSample> fresh;
  if (cfg.fresh_count > 0) fresh = sample_fresh(cfg.distribution, cfg.fresh_count, seed);
  const auto c = build_interaction_matrix(data);
  const auto cross = build_cross_rows(fresh, data);
  const auto sim = cfg.sim.resolved(data.size(), data.spec.q);
  const auto rec = integrate(c, cross.values, sim);

  SeedOutcome out;
  out.seed = seed;
  out.sandwich = check_sandwich(rec, data.size(), data.spec.q, sim);
  const auto& last = rec.train_margins.back();
  out.final_mean_margin = last.mean();
  out.final_min_margin = last.minCoeff();
  out.final_max_margin = last.maxCoeff();
  out.final_loss = rec.loss.back();
  out.fresh_risk = fresh.empty() ? 0.0 : zero_one_risk(rec.fresh_margins.back());
  for (std::size_t k = 1; k < rec.size(); ++k)
    if ((rec.train_margins[k] - rec.train_margins[k - 1]).minCoeff() < 0.0) out.monotone = false;

  if (dir) {
    const std::string tag = "seed" + std::to_string(seed);
    if (cfg.write_trajectory) {
      if (cfg.format == Format::table) {
        auto f = tabular::open_for_write((*dir / ("trajectory_" + tag + ".tsv")).string());
        write_trajectory_table(rec, f);
      } else {
        json j = {{"times", rec.times}, {"loss", rec.loss}};
        json tm = json::array(), fm = json::array();
        for (std::size_t k = 0; k < rec.size(); ++k) {
          tm.push_back(std::vector<double>(rec.train_margins[k].data(), rec.train_margins[k].data() + rec.train_margins[k].size()));
          fm.push_back(std::vector<double>(rec.fresh_margins[k].data(), rec.fresh_margins[k].data() + rec.fresh_margins[k].size()));
        }
        j["train_margins"] = tm;
        j["fresh_margins"] = fm;
        detail::write_text(*dir / ("trajectory_" + tag + ".json"), j.dump() + "\n");
      }
    }
    if (cfg.export_dataset) {
      write_dataset(data, (*dir / ("dataset_" + tag + ".tsv")).string(), (*dir / ("dataset_" + tag + ".meta.json")).string());
      auto f = tabular::open_for_write((*dir / ("corpus_" + tag + ".tsv")).string());
      write_embedding_corpus(data, f);
    }
    if (cfg.dump_matrix) {
      auto f = tabular::open_for_write((*dir / ("interaction_" + tag + ".tsv")).string());
      write_matrix_table(c.values, f);
    }
  }
  return out;
}

inline void report_conditions(const bounds::TheoryReport& t, std::ostream& diag) {
  if (!t.conditions.training_guarantee) {
    diag << "warning: training-guarantee conditions fail:";
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& c = t.conditions.items[i];
      if (!c.pass) diag << ' ' << c.name << " (" << c.lhs << " vs " << c.rhs << ")";
    }
    diag << "; simulating anyway\n";
  }
  if (t.failure_vacuous())
    diag << "warning: failure probability bound " << t.failure_prob << " exceeds 1 (vacuous) with c=" << t.c_const << "\n";
  if (t.gen_vacuous()) diag << "warning: generalization bound " << t.gen_bound.main << " exceeds 1 (vacuous)\n";
}

inline SimulateResult run_simulate(const ExperimentConfig& cfg, std::ostream& diag = std::cerr) {
  cfg.validate();
  const auto dir = detail::ensure_dir(cfg.out_dir);
  detail::write_manifest(dir, cfg, "simulate");

  SimulateResult res;
  res.theory = bounds::theory_report(cfg.distribution, cfg.sim.beta, cfg.sim.tau, cfg.c_const, cfg.epsilon, cfg.debug_appendix);
  report_conditions(res.theory, diag);
  detail::write_text(dir / "theory_report.json", bounds::to_json(res.theory).dump(2) + "\n");

  const auto seeds = cfg.seeds();
  res.seeds = parallel_map(seeds.size(), [&](std::size_t i) { return simulate_seed(cfg, seeds[i], dir); });

  // The sandwich is only a guarantee inside the stated regime.
  const bool in_regime = res.theory.conditions.training_guarantee;
  std::size_t sandwich_pass = 0;
  for (const auto& s : res.seeds) sandwich_pass += s.sandwich.holds;
  res.checks_passed = !in_regime || sandwich_pass == res.seeds.size();
  res.exit_code = res.checks_passed ? 0 : 1;

  if (cfg.format == Format::table) {
    std::ostringstream t;
    t << "seed\tsandwich\tmin_lower_gap\tmin_upper_gap\tfinal_mean_margin\tfinal_min_margin\tfinal_max_margin\tfinal_loss\tfresh_01_risk\n";
    for (const auto& s : res.seeds)
      t << s.seed << '\t' << (s.sandwich.holds ? "pass" : "fail") << '\t' << detail::fmt(s.sandwich.min_lower_gap) << '\t'
        << detail::fmt(s.sandwich.min_upper_gap) << '\t' << detail::fmt(s.final_mean_margin) << '\t'
        << detail::fmt(s.final_min_margin) << '\t' << detail::fmt(s.final_max_margin) << '\t' << detail::fmt(s.final_loss)
        << '\t' << detail::fmt(s.fresh_risk) << '\n';
    detail::write_text(dir / "summary.tsv", t.str());
  } else {
    json arr = json::array();
    for (const auto& s : res.seeds)
      arr.push_back({{"seed", s.seed},
                     {"sandwich", s.sandwich.holds},
                     {"min_lower_gap", s.sandwich.min_lower_gap},
                     {"min_upper_gap", s.sandwich.min_upper_gap},
                     {"final_mean_margin", s.final_mean_margin},
                     {"final_min_margin", s.final_min_margin},
                     {"final_max_margin", s.final_max_margin},
                     {"final_loss", s.final_loss},
                     {"fresh_01_risk", s.fresh_risk}});
    detail::write_text(dir / "summary.json", json{{"seeds", arr}, {"in_regime", in_regime}}.dump(2) + "\n");
  }
  diag << "simulate: sandwich held for " << sandwich_pass << "/" << res.seeds.size() << " seeds"
       << (in_regime ? "" : " (outside the guaranteed regime, informational)") << "\n";
  return res;
}

// --- sweep ------------------------------------------------------------------

struct SweepRow {
  double value = 0;
  double tau1 = 0;
  double horizon = 0;
  double slope_time = 0;
  double initial_slope = 0;  // seed-averaged mean margin at slope_time / slope_time
  double final_mean_margin = 0;
  double final_fresh_mean_margin = 0;
  double lower_slope = 0;
  double upper_slope = 0;
  std::vector<double> times;
  std::vector<double> mean_margin;  // seed-averaged mean training margin per recorded time
};

struct SweepResult {
  std::string vary;
  std::vector<SweepRow> rows;
  int exit_code = 0;
};

inline ExperimentConfig with_parameter(ExperimentConfig cfg, const std::string& name, double value) {
  auto as_count = [&](const char* what) {
    if (!(value >= 1) || value != std::floor(value)) throw std::invalid_argument(std::string(what) + " sweep values must be positive integers");
    return static_cast<std::size_t>(value);
  };
  if (name == "K") {
    cfg.distribution.k = as_count("K");
    cfg.distribution.token_assignment = default_token_assignment(cfg.distribution.k, cfg.z_target);
    cfg.distribution.vocab_size = vocab_size_for(cfg.distribution.token_assignment);
  } else if (name == "Q") {
    cfg.distribution.q = as_count("Q");
  } else if (name == "beta") {
    cfg.sim.beta = value;
  } else if (name == "v") {
    cfg.distribution.v = value;
  } else if (name == "l_b") {
    cfg.distribution.l_b = value;
  } else {
    throw std::invalid_argument("sweep parameter must be one of K, Q, beta, v, l_b (got '" + name + "')");
  }
  return cfg;
}

inline SweepRow sweep_point(const ExperimentConfig& base, const std::string& vary, double value) {
  auto cfg = with_parameter(base, vary, value);
  cfg.validate();
  const auto& spec = cfg.distribution;
  const double n = static_cast<double>(spec.n());
  const double q = static_cast<double>(spec.q);
  SweepRow row;
  row.value = value;
  row.tau1 = bounds::tau1(n, cfg.sim.tau, q, cfg.sim.beta);
  row.horizon = cfg.sim.horizon.value_or(cfg.horizon_fraction * row.tau1);
  row.lower_slope = bounds::lower_slope(n, cfg.sim.tau, q, cfg.sim.beta);
  row.upper_slope = bounds::upper_slope(n, cfg.sim.tau, q, cfg.sim.beta);
  SimConfig sim = cfg.sim;
  sim.horizon = row.horizon;
  if (!sim.step) sim.step = row.tau1 / 1000.0;
  sim = sim.resolved(spec.n(), spec.q);
  const double slope_target = cfg.slope_fraction * row.tau1;

  const auto seeds = cfg.seeds();
  std::vector<double> fresh_sum;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const auto data = sample_dataset(spec, seeds[s]);
    std::vector<PreferenceSample> fresh;
    if (cfg.fresh_count > 0) fresh = sample_fresh(spec, cfg.fresh_count, seeds[s]);
    const auto rec = integrate(build_interaction_matrix(data), build_cross_rows(fresh, data).values, sim);
    if (row.times.empty()) {
      row.times = rec.times;
      row.mean_margin.assign(rec.size(), 0.0);
    }
    for (std::size_t k = 0; k < rec.size(); ++k) row.mean_margin[k] += rec.train_margins[k].mean() / static_cast<double>(seeds.size());
    if (!fresh.empty()) row.final_fresh_mean_margin += rec.fresh_margins.back().mean() / static_cast<double>(seeds.size());
  }
  std::size_t at = row.times.size() - 1;
  for (std::size_t k = 1; k < row.times.size(); ++k)
    if (row.times[k] >= slope_target * (1.0 - 1e-9)) {
      at = k;
      break;
    }
  row.slope_time = row.times[at];
  row.initial_slope = row.mean_margin[at] / row.slope_time;
  row.final_mean_margin = row.mean_margin.back();
  return row;
}

inline SweepResult run_sweep(const ExperimentConfig& cfg, const std::string& vary, const std::vector<double>& values,
                             std::ostream& diag = std::cerr) {
  if (values.empty()) throw std::invalid_argument("sweep needs at least one value");
  for (double v : values) with_parameter(cfg, vary, v).validate();
  const auto dir = detail::ensure_dir(cfg.out_dir);
  auto recorded = cfg;
  recorded.sweep_vary = vary;
  recorded.sweep_values = values;
  detail::write_manifest(dir, recorded, "sweep");

  SweepResult res;
  res.vary = vary;
  res.rows = parallel_map(values.size(), [&](std::size_t i) { return sweep_point(cfg, vary, values[i]); });

  if (cfg.format == Format::table) {
    std::ostringstream t;
    t << vary << "\ttau1\thorizon\tslope_time\tinitial_slope\tfinal_mean_margin\tfinal_fresh_mean_margin\tr_lower_slope\tr_upper_slope\n";
    for (const auto& r : res.rows)
      t << detail::fmt(r.value) << '\t' << detail::fmt(r.tau1) << '\t' << detail::fmt(r.horizon) << '\t'
        << detail::fmt(r.slope_time) << '\t' << detail::fmt(r.initial_slope) << '\t' << detail::fmt(r.final_mean_margin)
        << '\t' << detail::fmt(r.final_fresh_mean_margin) << '\t' << detail::fmt(r.lower_slope) << '\t'
        << detail::fmt(r.upper_slope) << '\n';
    detail::write_text(dir / "sweep_summary.tsv", t.str());
    std::ostringstream tr;
    tr << vary << "\ttime\tmean_margin\n";
    for (const auto& r : res.rows)
      for (std::size_t k = 0; k < r.times.size(); ++k)
        tr << detail::fmt(r.value) << '\t' << detail::fmt(r.times[k]) << '\t' << detail::fmt(r.mean_margin[k]) << '\n';
    detail::write_text(dir / "sweep_trajectories.tsv", tr.str());
  } else {
    json arr = json::array();
    for (const auto& r : res.rows)
      arr.push_back({{"value", r.value},
                     {"tau1", r.tau1},
                     {"horizon", r.horizon},
                     {"slope_time", r.slope_time},
                     {"initial_slope", r.initial_slope},
                     {"final_mean_margin", r.final_mean_margin},
                     {"final_fresh_mean_margin", r.final_fresh_mean_margin},
                     {"r_lower_slope", r.lower_slope},
                     {"r_upper_slope", r.upper_slope},
                     {"times", r.times},
                     {"mean_margin", r.mean_margin}});
    detail::write_text(dir / "sweep_summary.json", json{{"vary", vary}, {"rows", arr}}.dump(2) + "\n");
  }
  diag << "sweep: " << values.size() << " values of " << vary << " done\n";
  return res;
}

// --- concentration -----------------------------------------------------------

struct ConcentrationReport {
  std::size_t trials = 0;
  double epsilon = 0;
  std::array<double, bounds::kFamilyCount> family_rate{};
  double all_rate = 0;
  double theoretical_main = 0;  // 1 - main-text failure probability (may be negative)
  double theoretical_eps = 0;   // 1 - epsilon-form failure probability
  bool passed = true;
  int exit_code = 0;
};

inline ConcentrationReport run_concentration(const ExperimentConfig& cfg, std::size_t trials, std::ostream& diag = std::cerr) {
  cfg.validate();
  if (trials == 0) throw std::invalid_argument("concentration needs at least one trial");
  const auto dir = detail::ensure_dir(cfg.out_dir);
  auto recorded = cfg;
  recorded.concentration_trials = trials;
  detail::write_manifest(dir, recorded, "concentration");

  const auto& spec = cfg.distribution;
  const double z = static_cast<double>(spec.z());
  ConcentrationReport rep;
  rep.trials = trials;
  rep.epsilon = cfg.epsilon.value_or(bounds::default_epsilon(spec.v, z));
  const auto outcomes = parallel_map(trials, [&](std::size_t t) {
    return bounds::concentration_trial(spec, cfg.base_seed + t, rep.epsilon);
  });
  std::size_t all = 0;
  for (const auto& o : outcomes) {
    for (std::size_t f = 0; f < bounds::kFamilyCount; ++f) rep.family_rate[f] += o.holds[f];
    all += o.all();
  }
  for (auto& r : rep.family_rate) r /= static_cast<double>(trials);
  rep.all_rate = static_cast<double>(all) / static_cast<double>(trials);
  rep.theoretical_main = 1.0 - bounds::failure_probability(static_cast<double>(spec.k), static_cast<double>(spec.q), cfg.c_const);
  rep.theoretical_eps = 1.0 - bounds::failure_probability_eps(static_cast<double>(spec.k), static_cast<double>(spec.q), z,
                                                              static_cast<double>(spec.d), spec.v, rep.epsilon, cfg.c_const);
  rep.passed = rep.all_rate >= std::max({0.0, rep.theoretical_main, rep.theoretical_eps}) &&
               (!cfg.min_pass_rate || rep.all_rate >= *cfg.min_pass_rate);
  rep.exit_code = rep.passed ? 0 : 1;

  json fam = json::object();
  for (std::size_t f = 0; f < bounds::kFamilyCount; ++f) fam[bounds::kFamilyNames[f]] = rep.family_rate[f];
  json j = {{"trials", trials},
            {"epsilon", rep.epsilon},
            {"c_const", cfg.c_const},
            {"family_pass_rate", fam},
            {"all_families_pass_rate", rep.all_rate},
            {"theoretical_lower_bound_main", rep.theoretical_main},
            {"theoretical_lower_bound_eps_form", rep.theoretical_eps},
            {"min_pass_rate", cfg.min_pass_rate ? json(*cfg.min_pass_rate) : json(nullptr)},
            {"passed", rep.passed}};
  if (cfg.format == Format::kv) {
    detail::write_text(dir / "concentration.json", j.dump(2) + "\n");
  } else {
    std::ostringstream t;
    t << "family\tpass_rate\n";
    for (std::size_t f = 0; f < bounds::kFamilyCount; ++f) t << bounds::kFamilyNames[f] << '\t' << detail::fmt(rep.family_rate[f]) << '\n';
    t << "all\t" << detail::fmt(rep.all_rate) << '\n';
    t << "theoretical_main\t" << detail::fmt(rep.theoretical_main) << '\n';
    t << "theoretical_eps_form\t" << detail::fmt(rep.theoretical_eps) << '\n';
    detail::write_text(dir / "concentration.tsv", t.str());
  }
  diag << "concentration: all families held in " << all << "/" << trials << " trials (eps=" << rep.epsilon << ")\n";
  return rep;
}

// --- multitoken verification -------------------------------------------------

struct MultiTokenCheck {
  std::string name;
  double worst = 0;
  double tolerance = 0;
  bool passed = false;
};

struct MultiTokenReport {
  std::vector<MultiTokenCheck> checks;
  bool passed = true;
  int exit_code = 0;
};

/// Decomposition vs direct contraction, scale-aware relative error.
inline double decomposition_error(const multitoken::SoftmaxModel& model, const std::vector<multitoken::MultiTokenSample>& batch,
                                  TokenId probe, const Vector& probe_g) {
  const auto b = multitoken::reward_gradient_breakdown(model, batch, probe, probe_g);
  const double direct = multitoken::reward_rate_by_contraction(model, batch, probe, probe_g);
  const double sum = b.cooccurrence - b.probability + b.distribution_corr;
  const double scale = std::max({std::abs(direct), std::abs(b.cooccurrence) + std::abs(b.probability) + std::abs(b.distribution_corr),
                                 std::numeric_limits<double>::min()});
  return std::max(std::abs(sum - b.total), std::abs(sum - direct)) / scale;
}

/// Worst per-entry relative error between -dLoss/dW by central differences and weight_gradient.
inline double finite_difference_error(multitoken::SoftmaxModel model, const std::vector<multitoken::MultiTokenSample>& batch,
                                      double h) {
  const Matrix analytic = multitoken::weight_gradient(model, batch);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < model.w.rows(); ++i)
    for (Eigen::Index j = 0; j < model.w.cols(); ++j) {
      const double saved = model.w(i, j);
      model.w(i, j) = saved + h;
      const double up = multitoken::batch_loss(model, batch);
      model.w(i, j) = saved - h;
      const double down = multitoken::batch_loss(model, batch);
      model.w(i, j) = saved;
      const double fd = -(up - down) / (2.0 * h);
      const double a = analytic(i, j);
      worst = std::max(worst, std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-6}));
    }
  return worst;
}

struct ReductionErrors {
  double margin = 0;  // multi-token L=1 margin vs beta (y_w - y_l)^T dW g
  double rate = 0;    // breakdown difference vs margin_rhs (relative)
};

/// L = 1 with a shared context per sample: multi-token machinery against the
/// single-token margin and margin_rhs on a drawn preference dataset.
inline ReductionErrors single_token_reduction(std::uint64_t seed) {
  const auto spec = DistributionSpec::make(2, 3, 5, 0.1, 0.5, 2);
  const auto data = sample_dataset(spec, seed);
  CounterRng rng = CounterRng(seed, streams::kMultiToken).split(7);
  const auto vocab = static_cast<Eigen::Index>(spec.vocab_size);
  auto model = multitoken::random_model(vocab, static_cast<Eigen::Index>(spec.d), 1.3, rng);
  const Matrix delta = model.w - model.w0;

  std::vector<multitoken::MultiTokenSample> batch;
  Vector single(static_cast<Eigen::Index>(data.size()));
  ReductionErrors err;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.samples[i];
    batch.push_back({{s.embedding}, {s.embedding}, {s.preferred}, {s.rejected}});
    single[static_cast<Eigen::Index>(i)] = model.beta * (delta.row(s.preferred) - delta.row(s.rejected)).dot(s.embedding);
    const double multi = multitoken::sample_margin(model, batch.back());
    err.margin = std::max(err.margin, std::abs(multi - single[static_cast<Eigen::Index>(i)]) / std::max(1.0, std::abs(multi)));
  }
  SimConfig sim;
  sim.beta = model.beta;
  sim.tau = 1.0;
  const Vector rhs = margin_rhs(single, build_interaction_matrix(data), sim);
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto& s = data.samples[k];
    const double via = multitoken::reward_gradient_breakdown(model, batch, s.preferred, s.embedding).total -
                       multitoken::reward_gradient_breakdown(model, batch, s.rejected, s.embedding).total;
    const double ref = rhs[static_cast<Eigen::Index>(k)];
    err.rate = std::max(err.rate, std::abs(via - ref) / std::max(std::abs(ref), 1e-12));
  }
  return err;
}

inline MultiTokenReport multitoken_checks(const ExperimentConfig& cfg) {
  MultiTokenReport rep;
  const auto vocab = static_cast<Eigen::Index>(cfg.mt_vocab);
  const auto dim = static_cast<Eigen::Index>(cfg.mt_dim);
  if (vocab < 2 || dim < 1 || cfg.mt_instances == 0 || cfg.mt_batch == 0 || cfg.mt_length == 0)
    throw std::invalid_argument("multitoken: need vocab_size >= 2, d >= 1 and positive instances, batch_size, length");

  const CounterRng root(cfg.base_seed, streams::kMultiToken);
  double worst_dec = 0.0, worst_fd = 0.0;
  for (std::size_t inst = 0; inst < cfg.mt_instances; ++inst) {
    CounterRng rng = root.split(inst);
    const auto model = multitoken::random_model(vocab, dim, cfg.mt_beta, rng);
    const auto batch = multitoken::random_batch(cfg.mt_batch, cfg.mt_length, vocab, dim, rng);
    std::uniform_int_distribution<TokenId> tok(0, vocab - 1);
    const TokenId probe = tok(rng);
    // Probe at a context embedding from the batch, as for a training token.
    const Vector& probe_g = batch[inst % batch.size()].context_w[inst % cfg.mt_length];
    worst_dec = std::max(worst_dec, decomposition_error(model, batch, probe, probe_g));
    worst_fd = std::max(worst_fd, finite_difference_error(model, batch, cfg.mt_fd_step));
  }
  if (!cfg.mt_batch_path.empty()) {
    auto in = tabular::open_for_read(cfg.mt_batch_path);
    const auto batch = multitoken::read_batch(in);
    if (batch.empty()) throw std::invalid_argument("multitoken batch file has no samples");
    TokenId hi = 1;
    for (const auto& s : batch)
      for (std::size_t j = 0; j < s.length(); ++j) hi = std::max({hi, s.tokens_w[j], s.tokens_l[j]});
    const auto d = batch.front().context_w.front().size();
    CounterRng rng = root.split(1u << 30);
    const auto model = multitoken::random_model(hi + 1, d, cfg.mt_beta, rng);
    for (const auto& s : batch) s.validate(d, hi + 1);
    worst_dec = std::max(worst_dec, decomposition_error(model, batch, batch.front().tokens_w.front(), batch.front().context_w.front()));
    worst_fd = std::max(worst_fd, finite_difference_error(model, batch, cfg.mt_fd_step));
  }
  const auto red = single_token_reduction(cfg.base_seed);
  rep.checks = {
      {"decomposition_identity", worst_dec, cfg.mt_decomposition_tol, worst_dec <= cfg.mt_decomposition_tol},
      {"finite_difference_gradient", worst_fd, cfg.mt_fd_tol, worst_fd <= cfg.mt_fd_tol},
      {"single_token_margin_reduction", red.margin, cfg.mt_reduction_tol, red.margin <= cfg.mt_reduction_tol},
      {"single_token_rate_reduction", red.rate, 1e-10, red.rate <= 1e-10},
  };
  for (const auto& c : rep.checks) rep.passed = rep.passed && c.passed;
  rep.exit_code = rep.passed ? 0 : 1;
  return rep;
}

inline MultiTokenReport run_multitoken_verify(const ExperimentConfig& cfg, std::ostream& diag = std::cerr) {
  const auto dir = detail::ensure_dir(cfg.out_dir);
  detail::write_manifest(dir, cfg, "multitoken-verify");
  auto rep = multitoken_checks(cfg);
  if (cfg.format == Format::kv) {
    json arr = json::array();
    for (const auto& c : rep.checks) arr.push_back({{"check", c.name}, {"worst", c.worst}, {"tolerance", c.tolerance}, {"pass", c.passed}});
    detail::write_text(dir / "multitoken_verify.json", json{{"checks", arr}, {"passed", rep.passed}}.dump(2) + "\n");
  } else {
    std::ostringstream t;
    t << "check\tworst\ttolerance\tresult\n";
    for (const auto& c : rep.checks)
      t << c.name << '\t' << detail::fmt(c.worst) << '\t' << detail::fmt(c.tolerance) << '\t' << (c.passed ? "pass" : "fail") << '\n';
    detail::write_text(dir / "multitoken_verify.tsv", t.str());
  }
  for (const auto& c : rep.checks)
    diag << "multitoken-verify: " << c.name << " worst=" << c.worst << " tol=" << c.tolerance << (c.passed ? " pass" : " FAIL") << "\n";
  return rep;
}

// --- embed-analyze ------------------------------------------------------------

struct EmbedReport {
  Matrix similarity;
  std::vector<std::string> concepts;
  double off_diagonal_mean = 0;
  int exit_code = 0;
};

inline EmbedReport run_embed_analyze(const std::string& input, const std::string& output, bool subtract_mean,
                                     std::ostream& diag = std::cerr) {
  auto in = tabular::open_for_read(input);
  auto corpus = embed::read_corpus(in);
  if (subtract_mean) corpus = embed::subtract_shared_component(corpus);
  EmbedReport rep;
  rep.similarity = embed::mean_similarity_matrix(corpus);
  rep.concepts = corpus.concept_names;
  rep.off_diagonal_mean = embed::off_diagonal_mean(rep.similarity);
  const auto parent = std::filesystem::path(output).parent_path();
  if (!parent.empty()) detail::ensure_dir(parent.string());
  auto out = tabular::open_for_write(output);
  embed::write_similarity_table(rep.similarity, rep.concepts, out);
  if (!out) throw std::runtime_error("failed writing '" + output + "'");
  diag << "embed-analyze: " << rep.concepts.size() << " concepts, off-diagonal mean " << rep.off_diagonal_mean
       << (subtract_mean ? " (shared component removed)" : "") << "\n";
  return rep;
}

}  // namespace prefdyn::experiment
