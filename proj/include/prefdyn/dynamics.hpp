// SPDX-License-Identifier: Apache-2.0
//
// Reward-margin gradient flow. With a fixed encoder and single-token
// responses the margins obey the closed system
//
//   tau r_j' = (beta^2 / N) sum_i w(r_i) C(x_i, x_j),     r(0) = 0,
//
// and a held-out sample follows the same law with its cross row C(x~, x_i)
// while never feeding back into the training margins. The weight-space flow
// on Delta W is kept as an independent route to the same margins.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefdyn/bounds.hpp"
#include "prefdyn/integrators.hpp"
#include "prefdyn/interaction.hpp"
#include "prefdyn/prefdist.hpp"
#include "prefdyn/tabular.hpp"
#include "prefdyn/weight_fn.hpp"

namespace prefdyn {

struct SimConfig {
  double beta = 1.0;
  double tau = 1.0;
  std::optional<double> step;     // default horizon / 1000
  std::optional<double> horizon;  // default tau1
  Integrator integrator = Integrator::rk4;
  WeightFunction weight = WeightFunction::dpo();
  std::size_t record_every = 1;

  /// Fills step and horizon from tau1 of the given dataset size and checks the invariants.
  SimConfig resolved(std::size_t n, std::size_t q) const {
    SimConfig out = *this;
    if (!(beta > 0)) throw std::invalid_argument("SimConfig: beta must be positive");
    if (!(tau > 0)) throw std::invalid_argument("SimConfig: tau must be positive");
    if (!out.horizon) out.horizon = bounds::tau1(static_cast<double>(n), tau, static_cast<double>(q), beta);
    if (!out.step) out.step = *out.horizon / 1000.0;
    if (!(*out.step > 0)) throw std::invalid_argument("SimConfig: step must be positive");
    if (!(*out.horizon >= *out.step)) throw std::invalid_argument("SimConfig: horizon must be >= step");
    if (out.record_every == 0) throw std::invalid_argument("SimConfig: record_every must be >= 1");
    return out;
  }
};

/// Uniform grid with a shortened final step landing exactly on the horizon.
struct TimeGrid {
  double step;
  double horizon;
  std::size_t steps;

  TimeGrid(double step_, double horizon_)
      : step(step_), horizon(horizon_), steps(static_cast<std::size_t>(std::ceil(horizon_ / step_ - 1e-9))) {
    if (steps == 0) steps = 1;
  }
  double time(std::size_t k) const { return k >= steps ? horizon : static_cast<double>(k) * step; }
};

struct TrajectoryRecord {
  std::vector<double> times;
  std::vector<Vector> train_margins;
  std::vector<Vector> fresh_margins;  // empty vectors when no held-out samples
  std::vector<double> loss;

  std::size_t size() const { return times.size(); }
};

struct WeightState {
  Matrix delta_w;  // |V| x d
};

class InstabilityError : public std::runtime_error {
public:
  InstabilityError(double t) : std::runtime_error("non-finite margin at t=" + std::to_string(t)), time_(t) {}
  double time() const { return time_; }

private:
  double time_;
};

inline Vector apply_weight(const Vector& margins, const WeightFunction& w) {
  Vector out(margins.size());
  for (Eigen::Index i = 0; i < margins.size(); ++i) out[i] = w(margins[i]);
  return out;
}

/// (1/N) sum -log sigma(r_i).
inline double dpo_loss(const Vector& margins) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < margins.size(); ++i) s += softplus(-margins[i]);
  return s / static_cast<double>(margins.size());
}

/// r' = (beta^2 / (N tau)) C^T w(r).
inline Vector margin_rhs(const Vector& margins, const InteractionMatrix& c, const SimConfig& cfg) {
  if (static_cast<std::size_t>(margins.size()) != c.n()) throw std::invalid_argument("margin_rhs: size mismatch");
  const double scale = cfg.beta * cfg.beta / (static_cast<double>(c.n()) * cfg.tau);
  return scale * (c.values.transpose() * apply_weight(margins, cfg.weight));
}

/// Integrates training margins and, through `cross`, held-out margins.
/// `cfg` must already be resolved.
inline TrajectoryRecord integrate(const InteractionMatrix& c, const Matrix& cross, const SimConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(c.n());
  if (n == 0) throw std::invalid_argument("integrate: empty interaction matrix");
  if (cross.size() != 0 && cross.cols() != n) throw std::invalid_argument("integrate: cross rows have wrong width");
  if (!cfg.step || !cfg.horizon) throw std::invalid_argument("integrate: config not resolved");
  const double scale = cfg.beta * cfg.beta / (static_cast<double>(n) * cfg.tau);
  const bool has_fresh = cross.rows() > 0;

  // State is [r; A] with A' = w(r): the held-out margins are scale * cross * A.
  Vector w(n);
  auto system = [&](double, const Vector& x, Vector& dx) {
    const auto r = x.head(n);
    for (Eigen::Index i = 0; i < n; ++i) w[i] = cfg.weight(r[i]);
    dx.head(n).noalias() = scale * (c.values.transpose() * w);
    dx.tail(n) = w;
  };
  Stepper stepper(cfg.integrator, 2 * n, system);
  Vector state = Vector::Zero(2 * n);

  TrajectoryRecord rec;
  auto record = [&](double t) {
    rec.times.push_back(t);
    rec.train_margins.push_back(state.head(n));
    rec.fresh_margins.push_back(has_fresh ? Vector(scale * (cross * state.tail(n))) : Vector());
    rec.loss.push_back(dpo_loss(state.head(n)));
  };

  const TimeGrid grid(*cfg.step, *cfg.horizon);
  record(0.0);
  for (std::size_t k = 0; k < grid.steps; ++k) {
    const double t0 = grid.time(k);
    const double t1 = grid.time(k + 1);
    stepper.step(state, t0, t1 - t0);
    if (!state.allFinite()) throw InstabilityError(t1);
    if ((k + 1) % cfg.record_every == 0 || k + 1 == grid.steps) record(t1);
  }
  return rec;
}

inline TrajectoryRecord integrate(const Dataset& data, const std::vector<PreferenceSample>& fresh,
                                  const SimConfig& cfg) {
  const auto resolved = cfg.resolved(data.size(), data.spec.q);
  const auto c = build_interaction_matrix(data);
  const auto cross = build_cross_rows(fresh, data);
  return integrate(c, cross.values, resolved);
}

/// Forward-Euler flow of Delta W:
///   tau dW' = (1/N) sum_i beta w(r_i) (y_w,i - y_l,i) g(x_i)^T,
///   r_i = beta (y_w,i - y_l,i)^T dW g(x_i).
inline TrajectoryRecord integrate_weights(const Dataset& data, const SimConfig& cfg, WeightState* final_state = nullptr) {
  const auto resolved = cfg.resolved(data.size(), data.spec.q);
  const auto n = static_cast<Eigen::Index>(data.size());
  const auto vocab = static_cast<Eigen::Index>(data.spec.vocab_size);
  const Matrix x = embedding_matrix(data.samples);
  Matrix diff = Matrix::Zero(n, vocab);
  for (Eigen::Index i = 0; i < n; ++i) {
    diff(i, data.samples[static_cast<std::size_t>(i)].preferred) += 1.0;
    diff(i, data.samples[static_cast<std::size_t>(i)].rejected) -= 1.0;
  }
  Matrix delta_w = Matrix::Zero(vocab, x.cols());
  auto margins = [&] { return Vector(resolved.beta * (diff * delta_w).cwiseProduct(x).rowwise().sum()); };

  TrajectoryRecord rec;
  auto record = [&](double t, const Vector& r) {
    rec.times.push_back(t);
    rec.train_margins.push_back(r);
    rec.fresh_margins.emplace_back();
    rec.loss.push_back(dpo_loss(r));
  };

  const double rate = resolved.beta / (static_cast<double>(n) * resolved.tau);
  const TimeGrid grid(*resolved.step, *resolved.horizon);
  Vector r = margins();
  record(0.0, r);
  for (std::size_t k = 0; k < grid.steps; ++k) {
    const double t1 = grid.time(k + 1);
    const double h = t1 - grid.time(k);
    const Vector w = apply_weight(r, resolved.weight);
    delta_w.noalias() += (h * rate) * (diff.transpose() * (w.asDiagonal() * x));
    r = margins();
    if (!r.allFinite()) throw InstabilityError(t1);
    if ((k + 1) % resolved.record_every == 0 || k + 1 == grid.steps) record(t1, r);
  }
  if (final_state) final_state->delta_w = delta_w;
  return rec;
}

// --- checks over a trajectory ----------------------------------------------

struct SandwichResult {
  bool holds = true;
  std::size_t checked_times = 0;
  double min_lower_gap = std::numeric_limits<double>::infinity();  // min over (r - r^L), t > 0
  double min_upper_gap = std::numeric_limits<double>::infinity();  // min over (r^U - r), t > 0
};

/// r^L(t) <= r_i(t) <= r^U(t) at every recorded t <= tau1.
inline SandwichResult check_sandwich(const TrajectoryRecord& rec, std::size_t n, std::size_t q, const SimConfig& cfg) {
  const double nn = static_cast<double>(n);
  const double qq = static_cast<double>(q);
  const double horizon = bounds::tau1(nn, cfg.tau, qq, cfg.beta);
  SandwichResult out;
  bool at_zero_ok = true;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    const double t = rec.times[k];
    if (t > horizon) break;
    const auto b = bounds::margin_bounds(t, nn, cfg.tau, qq, cfg.beta);
    const auto& r = rec.train_margins[k];
    ++out.checked_times;
    if (t == 0.0) {
      // Both bounds vanish here; keep the gaps informative by checking t = 0 separately.
      at_zero_ok = at_zero_ok && r.minCoeff() >= b.lower && r.maxCoeff() <= b.upper;
      continue;
    }
    out.min_lower_gap = std::min(out.min_lower_gap, r.minCoeff() - b.lower);
    out.min_upper_gap = std::min(out.min_upper_gap, b.upper - r.maxCoeff());
  }
  out.holds = at_zero_ok && out.min_lower_gap >= 0.0 && out.min_upper_gap >= 0.0;
  return out;
}

/// Fraction of margins <= 0 (empirical 0-1 risk).
inline double zero_one_risk(const Vector& margins) {
  if (margins.size() == 0) return 0.0;
  return static_cast<double>((margins.array() <= 0.0).count()) / static_cast<double>(margins.size());
}

/// Columns: time, r_1..r_N, fresh_1..fresh_M, loss.
inline void write_trajectory_table(const TrajectoryRecord& rec, std::ostream& out) {
  const auto n = rec.train_margins.empty() ? 0 : rec.train_margins.front().size();
  const auto m = rec.fresh_margins.empty() ? 0 : rec.fresh_margins.front().size();
  out << "time";
  for (Eigen::Index i = 0; i < n; ++i) out << "\tr_" << i + 1;
  for (Eigen::Index i = 0; i < m; ++i) out << "\tfresh_" << i + 1;
  out << "\tloss\n";
  for (std::size_t k = 0; k < rec.size(); ++k) {
    out << tabular::format_real(rec.times[k]);
    for (Eigen::Index i = 0; i < n; ++i) out << '\t' << tabular::format_real(rec.train_margins[k][i]);
    for (Eigen::Index i = 0; i < m; ++i) out << '\t' << tabular::format_real(rec.fresh_margins[k][i]);
    out << '\t' << tabular::format_real(rec.loss[k]) << '\n';
  }
}

}  // namespace prefdyn
