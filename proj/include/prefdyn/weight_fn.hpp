// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>

namespace prefdyn {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Scalar w(r) that multiplies C in the margin flow. sigma(-r) for DPO; any
/// other member of the generalized family is supplied as a custom function
/// and used exactly as given (no sign convention is applied).
class WeightFunction {
public:
  enum class Kind { dpo, custom };

  static WeightFunction dpo() { return WeightFunction(Kind::dpo, "dpo", [](double r) { return sigmoid(-r); }); }

  static WeightFunction custom(std::string name, std::function<double(double)> fn) {
    if (!fn) throw std::invalid_argument("custom weight function must be callable");
    return WeightFunction(Kind::custom, std::move(name), std::move(fn));
  }

  static WeightFunction constant(double c) {
    return custom("constant:" + std::to_string(c), [c](double) { return c; });
  }

  static WeightFunction exponential() {
    return custom("exponential", [](double r) { return std::exp(-r); });
  }

  double operator()(double r) const {
    const double w = fn_(r);
    if (!std::isfinite(w))
      throw std::domain_error("weight function '" + name_ + "' produced a non-finite value at r=" + std::to_string(r));
    return w;
  }

  Kind kind() const { return kind_; }
  const std::string& name() const { return name_; }

private:
  WeightFunction(Kind k, std::string name, std::function<double(double)> fn)
      : kind_(k), name_(std::move(name)), fn_(std::move(fn)) {}

  Kind kind_;
  std::string name_;
  std::function<double(double)> fn_;
};

/// Named lookup used by configuration files: "dpo", "exponential", "constant" or "constant:<c>".
inline WeightFunction set_weight_fn(const std::string& spec) {
  if (spec == "dpo") return WeightFunction::dpo();
  if (spec == "exponential") return WeightFunction::exponential();
  if (spec == "constant") return WeightFunction::constant(1.0);
  if (spec.rfind("constant:", 0) == 0) return WeightFunction::constant(std::stod(spec.substr(9)));
  throw std::invalid_argument("unknown weight function '" + spec + "'");
}

inline WeightFunction set_weight_fn(WeightFunction::Kind kind, std::function<double(double)> fn = {}) {
  if (kind == WeightFunction::Kind::dpo) return WeightFunction::dpo();
  return WeightFunction::custom("custom", std::move(fn));
}

}  // namespace prefdyn
