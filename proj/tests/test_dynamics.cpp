// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "prefdyn/dynamics.hpp"

using namespace prefdyn;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// r' = a sigma(-r), r(0) = 0 integrates to r + e^r - 1 = a t.
double scalar_oracle(double a, double t) {
  double lo = 0, hi = a * t + 1;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (mid + std::exp(mid) - 1 < a * t ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

InteractionMatrix single(double c) { return {Matrix::Constant(1, 1, c)}; }

SimConfig fixed(double step, double horizon, Integrator kind) {
  SimConfig s;
  s.step = step;
  s.horizon = horizon;
  s.integrator = kind;
  return s;
}

}  // namespace

TEST_CASE("one-sample DPO flow matches the implicit closed form") {
  for (double c : {0.5, 2.0, 7.0}) {
    auto cfg = fixed(1e-3, 1.5, Integrator::rk4);
    cfg.beta = 1.3;
    cfg.tau = 0.8;
    const auto rec = integrate(single(c), Matrix(), cfg);
    const double a = cfg.beta * cfg.beta * c / cfg.tau;
    for (std::size_t k = 0; k < rec.size(); k += 100)
      CHECK_THAT(rec.train_margins[k][0], WithinAbs(scalar_oracle(a, rec.times[k]), 1e-11));
  }
}

TEST_CASE("Euler is first order and RK4 fourth order") {
  const double a = 3.0;
  const double t = 1.0;
  const double exact = scalar_oracle(a, t);
  auto err = [&](Integrator kind, double h) {
    const auto rec = integrate(single(a), Matrix(), fixed(h, t, kind));
    return std::abs(rec.train_margins.back()[0] - exact);
  };
  const double e1 = err(Integrator::euler, 1e-2), e2 = err(Integrator::euler, 5e-3);
  CHECK_THAT(std::log2(e1 / e2), WithinAbs(1.0, 0.1));
  const double r1 = err(Integrator::rk4, 1e-1), r2 = err(Integrator::rk4, 5e-2);
  CHECK_THAT(std::log2(r1 / r2), WithinAbs(4.0, 0.3));
}

TEST_CASE("constant weight gives linear margins with slope beta^2 (C^T 1) c / (N tau)") {
  const auto spec = DistributionSpec::make(2, 3, 5, 0.2, 0.5, 2);
  const auto data = sample_dataset(spec, 3);
  SimConfig cfg = fixed(0.01, 0.5, Integrator::rk4);
  cfg.beta = 2.0;
  cfg.tau = 1.5;
  cfg.weight = WeightFunction::constant(0.3);
  const auto rec = integrate(data, {}, cfg);
  const auto c = build_interaction_matrix(data);
  for (std::size_t j = 0; j < data.size(); ++j) {
    double col = 0;
    for (std::size_t i = 0; i < data.size(); ++i) col += c(i, j);
    const double slope = 4.0 * 0.3 * col / (data.size() * 1.5);
    CHECK_THAT(rec.train_margins.back()[static_cast<Eigen::Index>(j)], WithinAbs(slope * 0.5, 1e-12));
  }
}

TEST_CASE("margin-space and weight-space Euler agree, including held-out margins") {
  const auto spec = DistributionSpec::make(2, 6, 8, 0.1, 0.5, 2);
  const auto data = sample_dataset(spec, 17);
  const auto fresh = sample_fresh(spec, 20, 17);
  SimConfig cfg = fixed(1e-3, 0.4, Integrator::euler);
  cfg.beta = 1.4;
  cfg.tau = 0.9;
  const auto m = integrate(data, fresh, cfg);
  WeightState ws;
  const auto w = integrate_weights(data, cfg, &ws);
  REQUIRE(m.size() == w.size());
  for (std::size_t k = 0; k < m.size(); ++k) {
    CHECK(m.times[k] == w.times[k]);
    CHECK((m.train_margins[k] - w.train_margins[k]).cwiseAbs().maxCoeff() < 1e-12);
  }
  for (std::size_t f = 0; f < fresh.size(); ++f) {
    const auto& s = fresh[f];
    const double direct = cfg.beta * (ws.delta_w.row(s.preferred) - ws.delta_w.row(s.rejected)).dot(s.embedding);
    CHECK_THAT(m.fresh_margins.back()[static_cast<Eigen::Index>(f)], WithinAbs(direct, 1e-12));
  }
}

TEST_CASE("held-out samples never influence the training margins") {
  const auto spec = DistributionSpec::make(1, 10, 20, 0.05, 0.5, 1);
  const auto data = sample_dataset(spec, 2);
  SimConfig cfg;
  const auto with = integrate(data, sample_fresh(spec, 50, 2), cfg);
  const auto without = integrate(data, {}, cfg);
  REQUIRE(with.size() == without.size());
  for (std::size_t k = 0; k < with.size(); ++k) CHECK(with.train_margins[k] == without.train_margins[k]);
  CHECK(with.fresh_margins.back().size() == 50);
  CHECK(without.fresh_margins.back().size() == 0);
}

TEST_CASE("valid-regime margins grow monotonically inside the sandwich") {
  const auto spec = DistributionSpec::make(1, 100, 500, 0.025, 0.5, 1);
  const auto data = sample_dataset(spec, 0);
  SimConfig cfg;
  const auto resolved = cfg.resolved(data.size(), spec.q);
  const auto rec = integrate(data, {}, cfg);
  REQUIRE(rec.times.back() == *resolved.horizon);
  for (std::size_t k = 1; k < rec.size(); ++k) CHECK((rec.train_margins[k] - rec.train_margins[k - 1]).minCoeff() > 0);
  for (std::size_t k = 1; k < rec.size(); ++k) CHECK(rec.loss[k] < rec.loss[k - 1]);
  const auto sw = check_sandwich(rec, data.size(), spec.q, resolved);
  CHECK(sw.holds);
  CHECK(sw.checked_times == rec.size());
  CHECK_THAT(rec.loss.front(), WithinRel(std::log(2.0), 1e-13));
}

TEST_CASE("time grid lands exactly on the horizon") {
  const TimeGrid g(0.3, 1.0);
  CHECK(g.steps == 4);
  CHECK(g.time(3) == Catch::Approx(0.9));
  CHECK(g.time(4) == 1.0);
  const TimeGrid exact(0.25, 1.0);
  CHECK(exact.steps == 4);
  auto cfg = fixed(0.3, 1.0, Integrator::rk4);
  cfg.record_every = 3;
  const auto rec = integrate(single(1.0), Matrix(), cfg);
  CHECK(rec.times == std::vector<double>{0.0, 0.8999999999999999, 1.0});
}

TEST_CASE("configuration errors and instability are reported") {
  SimConfig cfg;
  cfg.beta = 0;
  CHECK_THROWS_AS(cfg.resolved(10, 5), std::invalid_argument);
  cfg = SimConfig{};
  cfg.step = 2.0;
  cfg.horizon = 1.0;
  CHECK_THROWS_AS(cfg.resolved(10, 5), std::invalid_argument);
  cfg = SimConfig{};
  cfg.record_every = 0;
  CHECK_THROWS_AS(cfg.resolved(10, 5), std::invalid_argument);

  auto blow = fixed(0.1, 1.0, Integrator::euler);
  blow.weight = WeightFunction::custom("huge", [](double r) { return 1e300 * (1.0 + std::abs(r)); });
  CHECK_THROWS_AS(integrate(single(1e10), Matrix(), blow), InstabilityError);

  auto nan = fixed(0.1, 1.0, Integrator::rk4);
  nan.weight = WeightFunction::custom("nan", [](double) { return std::nan(""); });
  CHECK_THROWS_AS(integrate(single(1.0), Matrix(), nan), std::domain_error);
}

TEST_CASE("sandwich stops at tau1 and zero-one risk counts nonpositive margins") {
  CHECK(zero_one_risk(Vector::Zero(0)) == 0.0);
  Vector m(4);
  m << 0.1, 0.0, -2.0, 3.0;
  CHECK(zero_one_risk(m) == 0.5);

  const auto spec = DistributionSpec::make(1, 100, 500, 0.025, 0.5, 1);
  const auto data = sample_dataset(spec, 1);
  SimConfig cfg;
  const double t1 = bounds::tau1(200, 1, 100, 1);
  cfg.horizon = 2 * t1;
  cfg.step = t1 / 100;
  const auto rec = integrate(data, {}, cfg);
  const auto sw = check_sandwich(rec, data.size(), spec.q, cfg.resolved(data.size(), spec.q));
  CHECK(sw.checked_times == 101);
}
