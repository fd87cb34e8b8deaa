// SPDX-License-Identifier: Apache-2.0
//
// Closed-form quantities of the single-token training-reward and
// generalization guarantees, the regime conditions under which they are
// stated, and a single Monte Carlo trial of the pairwise-interaction
// concentration inequalities.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "prefdyn/interaction.hpp"
#include "prefdyn/prefdist.hpp"

namespace prefdyn::bounds {

inline const double kLog3 = std::log(3.0);

/// Guaranteed horizon N tau ln3 / (10 Q beta^2).
inline double tau1(double n, double tau, double q, double beta) {
  if (!(n > 0 && tau > 0 && q > 0 && beta > 0)) throw std::invalid_argument("tau1: arguments must be positive");
  return n * tau * kLog3 / (10.0 * q * beta * beta);
}

inline double lower_slope(double n, double tau, double q, double beta) { return q * beta * beta / (4.0 * n * tau); }
inline double upper_slope(double n, double tau, double q, double beta) { return 10.0 * q * beta * beta / (n * tau); }

struct MarginBounds {
  double lower;
  double upper;
};

/// Linear sandwich r^L(t) <= r(t) <= r^U(t), valid for 0 <= t <= tau1.
inline MarginBounds margin_bounds(double t, double n, double tau, double q, double beta) {
  const double horizon = tau1(n, tau, q, beta);
  if (t < 0.0) throw std::invalid_argument("margin_bounds: t must be nonnegative");
  if (t > horizon) throw std::domain_error("margin_bounds: t exceeds tau1, where the bounds are not established");
  // Evaluated as fraction-of-horizon so r(tau1) is exactly ln3/40 and ln3.
  if (t == horizon) return {kLog3 / 40.0, kLog3};
  return {lower_slope(n, tau, q, beta) * t, upper_slope(n, tau, q, beta) * t};
}

struct Condition {
  std::string name;
  double lhs;
  double rhs;
  bool pass;
};

struct ConditionReport {
  std::vector<Condition> items;
  bool training_guarantee = false;     // Z, d, v conditions of the training guarantee
  bool generalization = false;   // training_guarantee and Q >= 40

  const Condition& get(const std::string& name) const {
    for (const auto& c : items)
      if (c.name == name) return c;
    throw std::out_of_range("no condition named " + name);
  }
};

inline ConditionReport check_conditions(const DistributionSpec& spec) {
  const double z = static_cast<double>(spec.z());
  const double q = static_cast<double>(spec.q);
  const double d = static_cast<double>(spec.d);
  const double inv_lb = spec.l_b == 0.0 ? std::numeric_limits<double>::infinity() : 1.0 / (4.0 * spec.l_b * spec.l_b);
  const double q_quarter = std::pow(q, 0.25) - 2.0;

  ConditionReport r;
  r.items = {
      {"z_le_inv_4lb2", z, inv_lb, z <= inv_lb},
      {"z_le_q_quarter_minus_2", z, q_quarter, z <= q_quarter},
      {"d_le_5q", d, 5.0 * q, d <= 5.0 * q},
      {"v_le_inv_4sqrtq", spec.v, 1.0 / (4.0 * std::sqrt(q)), spec.v <= 1.0 / (4.0 * std::sqrt(q))},
      {"q_ge_40", q, 40.0, q >= 40.0},
      // Appendix generalization statement asks for the opposite of d <= 5Q.
      {"appendix_d_ge_5q_over_2v2", d, 5.0 * q / (2.0 * spec.v * spec.v), d >= 5.0 * q / (2.0 * spec.v * spec.v)},
  };
  r.training_guarantee = r.items[0].pass && r.items[1].pass && r.items[2].pass && r.items[3].pass;
  r.generalization = r.training_guarantee && r.items[4].pass;
  return r;
}

/// epsilon = 1 / (16 v (Z + 2)).
inline double default_epsilon(double v, double z) {
  if (!(v > 0)) throw std::invalid_argument("default_epsilon: v must be positive");
  return 1.0 / (16.0 * v * (z + 2.0));
}

/// 8 K Q^{9/4} exp(-min(c sqrt(Q)/5, Q^{3/4}/256)). Values above 1 are vacuous.
inline double failure_probability(double k, double q, double c_const) {
  if (!(c_const > 0)) throw std::invalid_argument("failure_probability: c must be positive");
  const double rate = std::min(c_const * std::sqrt(q) / 5.0, std::pow(q, 0.75) / 256.0);
  return 8.0 * k * std::pow(q, 2.25) * std::exp(-rate);
}

/// (8Z+4) K Q^2 [exp(-eps^2/16) + exp(-(c eps / v) min(1, eps/(d v)))].
inline double failure_probability_eps(double k, double q, double z, double d, double v, double eps, double c_const) {
  if (!(c_const > 0)) throw std::invalid_argument("failure_probability_eps: c must be positive");
  const double tail = std::exp(-eps * eps / 16.0) + std::exp(-(c_const * eps / v) * std::min(1.0, eps / (d * v)));
  return (8.0 * z + 4.0) * k * q * q * tail;
}

struct GeneralizationBound {
  double main;      // 2 K Q^2 exp(-Q^{1/4}/6)
  double appendix;  // 2 K Q^2 exp(-eps^2 / (2 (2 + d v^2 + eps v)))
};

inline GeneralizationBound generalization_bound(double k, double q, double d, double v, double eps) {
  const double pre = 2.0 * k * q * q;
  return {pre * std::exp(-std::pow(q, 0.25) / 6.0),
          pre * std::exp(-eps * eps / (2.0 * (2.0 + d * v * v + eps * v)))};
}

struct TheoryReport {
  double tau1 = 0;
  double r_lower_slope = 0;
  double r_upper_slope = 0;
  double r_lower_at_tau1 = 0;
  double r_upper_at_tau1 = 0;
  ConditionReport conditions;
  double failure_prob = 0;
  double failure_prob_eps = 0;
  GeneralizationBound gen_bound{};
  double epsilon = 0;
  double c_const = 1.0;
  // Only populated with debug_appendix.
  bool debug_appendix = false;
  double appendix_upper_slope = 0;     // 2 d v^2 beta^2 / (N tau)
  double proof_upper_slope = 0;        // (5Q + 2 d v^2) beta^2 / (2 N tau)

  bool failure_vacuous() const { return failure_prob > 1.0; }
  bool gen_vacuous() const { return gen_bound.main > 1.0; }
};

inline TheoryReport theory_report(const DistributionSpec& spec, double beta, double tau, double c_const,
                                  std::optional<double> epsilon_override = std::nullopt,
                                  bool debug_appendix = false) {
  const double n = static_cast<double>(spec.n());
  const double q = static_cast<double>(spec.q);
  const double k = static_cast<double>(spec.k);
  const double d = static_cast<double>(spec.d);
  const double z = static_cast<double>(spec.z());
  TheoryReport r;
  r.tau1 = tau1(n, tau, q, beta);
  r.r_lower_slope = lower_slope(n, tau, q, beta);
  r.r_upper_slope = upper_slope(n, tau, q, beta);
  const auto at = margin_bounds(r.tau1, n, tau, q, beta);
  r.r_lower_at_tau1 = at.lower;
  r.r_upper_at_tau1 = at.upper;
  r.conditions = check_conditions(spec);
  r.c_const = c_const;
  r.epsilon = epsilon_override.value_or(default_epsilon(spec.v, z));
  r.failure_prob = failure_probability(k, q, c_const);
  r.failure_prob_eps = failure_probability_eps(k, q, z, d, spec.v, r.epsilon, c_const);
  r.gen_bound = generalization_bound(k, q, d, spec.v, r.epsilon);
  r.debug_appendix = debug_appendix;
  if (debug_appendix) {
    r.appendix_upper_slope = 2.0 * d * spec.v * spec.v * beta * beta / (n * tau);
    r.proof_upper_slope = (5.0 * q + 2.0 * d * spec.v * spec.v) * beta * beta / (2.0 * n * tau);
  }
  return r;
}

inline nlohmann::json to_json(const TheoryReport& r) {
  nlohmann::json conds = nlohmann::json::object();
  for (const auto& c : r.conditions.items) {
    // JSON has no infinity; an unbounded right side is reported as null.
    nlohmann::json rhs = std::isfinite(c.rhs) ? nlohmann::json(c.rhs) : nlohmann::json(nullptr);
    conds[c.name] = {{"lhs", c.lhs}, {"rhs", rhs}, {"pass", c.pass}};
  }
  nlohmann::json j = {
      {"tau1", r.tau1},
      {"r_lower_slope", r.r_lower_slope},
      {"r_upper_slope", r.r_upper_slope},
      {"r_lower_at_tau1", r.r_lower_at_tau1},
      {"r_upper_at_tau1", r.r_upper_at_tau1},
      {"conditions", conds},
      {"training_guarantee_conditions_hold", r.conditions.training_guarantee},
      {"generalization_conditions_hold", r.conditions.generalization},
      {"failure_prob", r.failure_prob},
      {"failure_prob_vacuous", r.failure_vacuous()},
      {"failure_prob_eps_form", r.failure_prob_eps},
      {"gen_bound", r.gen_bound.main},
      {"gen_bound_vacuous", r.gen_vacuous()},
      {"gen_bound_eps_form", r.gen_bound.appendix},
      {"epsilon", r.epsilon},
      {"c_const", r.c_const},
  };
  if (r.debug_appendix) {
    j["appendix_upper_slope"] = r.appendix_upper_slope;
    j["proof_upper_slope"] = r.proof_upper_slope;
  }
  return j;
}

// --- concentration --------------------------------------------------------

enum class Family : std::size_t { exact_same = 0, same, opp, share1, share2 };
inline constexpr std::size_t kFamilyCount = 5;
inline constexpr std::array<const char*, kFamilyCount> kFamilyNames = {"exact_same", "same", "opp", "share1", "share2"};

struct ConcentrationResult {
  std::array<bool, kFamilyCount> holds{};
  std::array<double, kFamilyCount> max_excess{};  // max(|C - center| - threshold); <= 0 means held
  std::array<std::size_t, kFamilyCount> pairs{};  // applicable pair count

  bool all() const { return std::all_of(holds.begin(), holds.end(), [](bool b) { return b; }); }
};

/// Checks every pairwise C of one dataset draw against its concentration
/// center. Families without applicable pairs pass vacuously.
inline ConcentrationResult concentration_check(const Dataset& data, const InteractionMatrix& c, double eps) {
  const auto& spec = data.spec;
  const double lb2 = spec.l_b * spec.l_b;
  const double ev = eps * spec.v;
  const double self_center = 2.0 * (1.0 + lb2 + static_cast<double>(spec.d) * spec.v * spec.v);

  // Cluster pairs that share at least one token.
  std::vector<std::vector<bool>> shares(spec.k, std::vector<bool>(spec.k, false));
  for (std::size_t a = 0; a < spec.k; ++a)
    for (std::size_t b = 0; b < spec.k; ++b) {
      const auto& pa = spec.token_assignment[a];
      const auto& pb = spec.token_assignment[b];
      shares[a][b] = a != b && (pa.preferred == pb.preferred || pa.preferred == pb.rejected ||
                                pa.rejected == pb.preferred || pa.rejected == pb.rejected);
    }

  ConcentrationResult out;
  out.max_excess.fill(-std::numeric_limits<double>::infinity());
  auto note = [&](Family f, double excess) {
    const auto idx = static_cast<std::size_t>(f);
    out.max_excess[idx] = std::max(out.max_excess[idx], excess);
    ++out.pairs[idx];
  };

  const std::size_t n = data.size();
  for (std::size_t j = 0; j < n; ++j) {
    const auto& sj = data.samples[j];
    for (std::size_t i = 0; i <= j; ++i) {
      const auto& si = data.samples[i];
      const double cij = c(i, j);
      if (i == j) {
        note(Family::exact_same, std::abs(cij - self_center) - 4.0 * ev);
      } else if (si.cluster == sj.cluster) {
        if (si.sign == sj.sign)
          note(Family::same, std::abs(cij - 2.0 * (1.0 + lb2)) - 4.0 * ev);
        else
          note(Family::opp, std::abs(cij - 2.0 * (1.0 - lb2)) - 4.0 * ev);
      } else if (shares[si.cluster][sj.cluster]) {
        note(si.sign == sj.sign ? Family::share1 : Family::share2, std::abs(cij) - (lb2 + 2.0 * ev));
      }
    }
  }
  for (std::size_t f = 0; f < kFamilyCount; ++f) out.holds[f] = out.pairs[f] == 0 || out.max_excess[f] <= 0.0;
  return out;
}

inline ConcentrationResult concentration_trial(const DistributionSpec& spec, std::uint64_t seed, double eps) {
  const auto data = sample_dataset(spec, seed);
  return concentration_check(data, build_interaction_matrix(data), eps);
}

}  // namespace prefdyn::bounds
