#pragma once

// Velocity field interface: anything callable as (state, time) -> velocity.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <utility>

#include "kinflow/error.hpp"
#include "kinflow/mlp.hpp"

namespace kinflow {

template <typename F>
concept VelocityField = requires(const F& f, const Eigen::VectorXd& x, double t) {
  { f(x, t) } -> std::convertible_to<Eigen::VectorXd>;
};

/// Type-erased field for code paths chosen at run time.
using AnyField = std::function<Eigen::VectorXd(const Eigen::VectorXd&, double)>;

/// The trained network viewed as a 2D velocity field.
class NeuralField {
 public:
  explicit NeuralField(MlpParams p) : p_(std::move(p)) {}

  Eigen::VectorXd operator()(const Eigen::VectorXd& x, double t) const {
    require(x.size() == 2, "network field is two-dimensional");
    const Point2 v = forward(p_, {x(0), x(1)}, t);
    return Eigen::Vector2d(v.x, v.y);
  }

  const MlpParams& params() const { return p_; }

 private:
  MlpParams p_;
};

struct KtsSchedule {
  double alpha0 = 0.0;
  double beta0 = 0.0;
  double k = 3.0;
  double tau_split = 0.6;

  void validate() const {
    require(alpha0 >= 0.0 && std::isfinite(alpha0), "alpha0 must be non-negative");
    require(beta0 >= 0.0 && std::isfinite(beta0), "beta0 must be non-negative");
    require(k > 0.0 && std::isfinite(k), "k must be positive");
    require(tau_split > 0.0 && tau_split < 1.0, "tau_split must lie in (0, 1)");
  }

  bool is_identity() const { return alpha0 == 0.0 && beta0 == 0.0; }
};

/// Gain eta(t): linear launch boost before tau_split, exponential damping after.
inline double kts_eta(const KtsSchedule& s, double t) {
  if (t < s.tau_split) return 1.0 + s.alpha0 * std::max(0.0, 1.0 - t / s.tau_split);
  return 1.0 - s.beta0 * (std::exp(s.k * (t - s.tau_split)) - 1.0);
}

template <VelocityField F>
class ShapedField {
 public:
  ShapedField(F base, KtsSchedule s) : base_(std::move(base)), s_(s) { s_.validate(); }

  Eigen::VectorXd operator()(const Eigen::VectorXd& x, double t) const {
    // Identity gain returns the base evaluation untouched so shaped and baseline runs match bitwise.
    if (s_.is_identity()) return base_(x, t);
    return kts_eta(s_, t) * base_(x, t);
  }

  const KtsSchedule& schedule() const { return s_; }

 private:
  F base_;
  KtsSchedule s_;
};

template <VelocityField F>
ShapedField<F> shaped_field(F base, const KtsSchedule& s) {
  return ShapedField<F>(std::move(base), s);
}

}  // namespace kinflow
