// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "prefdyn/experiment.hpp"

using namespace prefdyn;
using namespace prefdyn::experiment;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / "prefdyn_test_experiment" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig small(const fs::path& out) {
  auto cfg = config_from_json(json::parse(R"({
    "distribution": {"K": 2, "Q": 8, "d": 12, "v": 0.02, "l_b": 0.4, "Z": 1},
    "sim": {"record_every": 50},
    "fresh_count": 30,
    "seeds": {"base_seed": 5, "replications": 3}
  })"));
  cfg.out_dir = out.string();
  return cfg;
}

}  // namespace

TEST_CASE("empty config is the valid-regime baseline") {
  const auto cfg = config_from_json(json::object());
  CHECK(cfg.distribution.k == 1);
  CHECK(cfg.distribution.q == 100);
  CHECK(cfg.distribution.d == 500);
  CHECK(cfg.distribution.v == 0.025);
  CHECK(cfg.distribution.l_b == 0.5);
  CHECK(cfg.distribution.z() == 1);
  CHECK(cfg.sim.beta == 1.0);
  CHECK(cfg.sim.tau == 1.0);
  CHECK(cfg.sim.integrator == Integrator::rk4);
  CHECK(cfg.seeds() == std::vector<std::uint64_t>{0});
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config fields parse and bad values are rejected") {
  const auto cfg = config_from_json(json::parse(R"({
    "distribution": {"K": 3, "Z": 3, "Q": 50, "d": 40},
    "sim": {"beta": 2, "integrator": "euler", "step": 0.001, "weight_fn": "constant:0.5"},
    "bounds": {"c_const": 3, "epsilon": 0.2},
    "seeds": [4, 9],
    "outputs": {"format": "kv"}
  })"));
  CHECK(cfg.distribution.z() == 3);
  CHECK(cfg.distribution.vocab_size == 4);
  CHECK(cfg.sim.integrator == Integrator::euler);
  CHECK(cfg.sim.weight(10.0) == 0.5);
  CHECK(*cfg.epsilon == 0.2);
  CHECK(cfg.seeds() == std::vector<std::uint64_t>{4, 9});
  CHECK(cfg.format == Format::kv);

  CHECK_THROWS(config_from_json(json::parse(R"({"sim": {"integrator": "rk45"}})")));
  CHECK_THROWS(config_from_json(json::parse(R"({"outputs": {"format": "csv"}})")));
  CHECK_THROWS(config_from_json(json::parse(R"({"sim": {"weight_fn": "hinge"}})")));
  CHECK_THROWS(config_from_json(json::parse(R"([1, 2])")));
  CHECK_THROWS(config_from_json(json::parse(R"({"distribution": {"d": 1}})")).validate());
  CHECK_THROWS(config_from_json(json::parse(R"({"sim": {"tau": -1}})")).validate());
}

TEST_CASE("simulate writes manifest, report, trajectories and is byte-reproducible") {
  const auto a = scratch("sim_a");
  const auto b = scratch("sim_b");
  std::ostringstream diag;
  const auto ra = run_simulate(small(a), diag);
  auto cfg_b = small(b);
  run_simulate(cfg_b, diag);
  CHECK(ra.seeds.size() == 3);
  for (const char* f : {"theory_report.json", "summary.tsv", "trajectory_seed5.tsv", "trajectory_seed7.tsv",
                        "dataset_seed6.tsv", "dataset_seed6.meta.json", "corpus_seed6.tsv"}) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const auto manifest = json::parse(slurp(a / "manifest.json"));
  CHECK(manifest.at("command") == "simulate");
  CHECK(manifest.at("config").at("seeds") == json::array({5, 6, 7}));
  CHECK(manifest.at("version") == PREFDYN_VERSION);
  const auto header = slurp(a / "trajectory_seed5.tsv").substr(0, 40);
  CHECK(header.rfind("time\tr_1\tr_2", 0) == 0);
}

TEST_CASE("simulate warns outside the regime but still runs") {
  auto cfg = config_from_json(json::parse(R"({"distribution": {"Q": 10, "d": 20}, "sim": {"record_every": 100}})"));
  cfg.out_dir = scratch("sim_q10").string();
  cfg.fresh_count = 10;
  std::ostringstream diag;
  const auto res = run_simulate(cfg, diag);
  CHECK(diag.str().find("conditions fail") != std::string::npos);
  CHECK(diag.str().find("z_le_q_quarter_minus_2") != std::string::npos);
  CHECK(res.exit_code == 0);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "trajectory_seed0.tsv"));
}

TEST_CASE("kv format writes JSON outputs") {
  auto cfg = small(scratch("sim_kv"));
  cfg.format = Format::kv;
  std::ostringstream diag;
  run_simulate(cfg, diag);
  const auto s = json::parse(slurp(fs::path(cfg.out_dir) / "summary.json"));
  CHECK(s.at("seeds").size() == 3);
  const auto t = json::parse(slurp(fs::path(cfg.out_dir) / "trajectory_seed5.json"));
  CHECK(t.at("train_margins").front().size() == 32);
}

TEST_CASE("sweep over beta scales tau1 as beta^-2") {
  auto cfg = small(scratch("sweep_beta"));
  cfg.fresh_count = 0;
  cfg.seed_list = {1};
  std::ostringstream diag;
  const auto res = run_sweep(cfg, "beta", {1.0, 2.0, 4.0}, diag);
  REQUIRE(res.rows.size() == 3);
  CHECK(res.rows[1].tau1 == Catch::Approx(res.rows[0].tau1 / 4).epsilon(1e-14));
  CHECK(res.rows[2].tau1 == Catch::Approx(res.rows[0].tau1 / 16).epsilon(1e-14));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "sweep_summary.tsv"));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "sweep_trajectories.tsv"));
  CHECK_THROWS_AS(run_sweep(cfg, "d", {10}, diag), std::invalid_argument);
  CHECK_THROWS_AS(run_sweep(cfg, "K", {1.5}, diag), std::invalid_argument);
}

TEST_CASE("concentration with tiny noise passes every trial") {
  auto cfg = config_from_json(json::parse(R"({"distribution": {"K": 2, "Q": 10, "d": 20, "v": 1e-7, "Z": 2, "l_b": 0.5}})"));
  cfg.out_dir = scratch("conc").string();
  std::ostringstream diag;
  const auto rep = run_concentration(cfg, 20, diag);
  CHECK(rep.all_rate == 1.0);
  CHECK(rep.exit_code == 0);
  CHECK(rep.theoretical_main < 0);  // vacuous at this size
  const auto table = slurp(fs::path(cfg.out_dir) / "concentration.tsv");
  CHECK(table.find("theoretical_eps_form") != std::string::npos);
}

TEST_CASE("concentration exit code honours a required pass rate") {
  auto cfg = config_from_json(json::parse(R"({"distribution": {"K": 1, "Q": 20, "d": 50}, "concentration": {"min_pass_rate": 0.9}})"));
  cfg.out_dir = scratch("conc_fail").string();
  std::ostringstream diag;
  const auto rep = run_concentration(cfg, 10, diag);
  CHECK(rep.all_rate < 0.9);
  CHECK(rep.exit_code == 1);
}

TEST_CASE("multitoken verification passes at default tolerances") {
  auto cfg = config_from_json(json::object());
  cfg.out_dir = scratch("mt").string();
  cfg.mt_instances = 20;
  std::ostringstream diag;
  const auto rep = run_multitoken_verify(cfg, diag);
  CHECK(rep.passed);
  CHECK(rep.checks.size() == 4);
  cfg.mt_fd_tol = 1e-14;
  CHECK(multitoken_checks(cfg).exit_code == 1);
}

TEST_CASE("embed-analyze writes the similarity matrix") {
  const auto dir = scratch("embed");
  {
    std::ofstream f(dir / "c.tsv");
    f << "concept\tsign\ta\tb\nx\t+\t1\t0\nx\t+\t1\t0\nx\t-\t1\t0\nx\t-\t1\t0\n";
  }
  std::ostringstream diag;
  const auto rep = run_embed_analyze((dir / "c.tsv").string(), (dir / "sub" / "s.tsv").string(), false, diag);
  CHECK(rep.similarity(0, 0) == 1.0);
  CHECK(slurp(dir / "sub" / "s.tsv") == "concept\tx\nx\t1\n");
  CHECK_THROWS(run_embed_analyze((dir / "missing.tsv").string(), (dir / "o.tsv").string(), false, diag));
}
