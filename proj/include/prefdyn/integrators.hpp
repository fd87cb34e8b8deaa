// SPDX-License-Identifier: Apache-2.0
//
// Fixed-step explicit integrators for autonomous or time-dependent systems
// x' = f(t, x) over Eigen vectors.
#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace prefdyn {

enum class Integrator { euler, rk4 };

inline Integrator parse_integrator(const std::string& s) {
  if (s == "euler") return Integrator::euler;
  if (s == "rk4") return Integrator::rk4;
  throw std::invalid_argument("unknown integrator '" + s + "' (expected euler or rk4)");
}

inline const char* to_string(Integrator i) { return i == Integrator::euler ? "euler" : "rk4"; }

/// System signature: void(double t, const Eigen::VectorXd& x, Eigen::VectorXd& dxdt).
template <class System>
class Stepper {
public:
  Stepper(Integrator kind, Eigen::Index n, System system)
      : kind_(kind), system_(std::move(system)), k1_(n), k2_(n), k3_(n), k4_(n), tmp_(n) {}

  void step(Eigen::VectorXd& x, double t, double h) {
    if (kind_ == Integrator::euler) {
      system_(t, x, k1_);
      x.noalias() += h * k1_;
      return;
    }
    const double h2 = h / 2;
    system_(t, x, k1_);
    tmp_ = x + h2 * k1_;
    system_(t + h2, tmp_, k2_);
    tmp_ = x + h2 * k2_;
    system_(t + h2, tmp_, k3_);
    tmp_ = x + h * k3_;
    system_(t + h, tmp_, k4_);
    x += (h / 6) * (k1_ + 2 * k2_ + 2 * k3_ + k4_);
  }

  System& system() { return system_; }

private:
  Integrator kind_;
  System system_;
  Eigen::VectorXd k1_, k2_, k3_, k4_, tmp_;
};

template <class System>
Stepper(Integrator, Eigen::Index, System) -> Stepper<System>;

}  // namespace prefdyn
