#pragma once

// Empirical flow matching: the Gaussian mixture p_t = (1/N) sum_i N(gamma x_i, (1 - gamma)^2 I),
// its score and responsibilities, and the closed-form regression-optimal velocity.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kinflow/error.hpp"
#include "kinflow/synthdata.hpp"

namespace kinflow {

using Vec = Eigen::VectorXd;

inline constexpr double kTimeFloor = 1e-9;

inline double clamp_time(double t) { return std::clamp(t, kTimeFloor, 1.0 - kTimeFloor); }

inline void require_open_time(double t) {
  if (!(t > 0.0 && t < 1.0)) throw InvalidArgument("time must lie in (0, 1)");
}

class GammaSchedule {
 public:
  enum class Kind { linear, custom };

  static GammaSchedule linear() {
    return GammaSchedule(Kind::linear, [](double t) { return t; }, [](double) { return 1.0; });
  }

  static GammaSchedule custom(std::function<double(double)> gamma, std::function<double(double)> gamma_dot) {
    GammaSchedule s(Kind::custom, std::move(gamma), std::move(gamma_dot));
    if (std::abs(s.gamma(0.0)) > 1e-12 || std::abs(s.gamma(1.0) - 1.0) > 1e-12)
      throw InvalidArgument("schedule must satisfy gamma(0) = 0 and gamma(1) = 1");
    return s;
  }

  Kind kind() const { return kind_; }
  double gamma(double t) const { return gamma_(t); }
  double gamma_dot(double t) const { return gamma_dot_(t); }
  double sigma(double t) const { return 1.0 - gamma(t); }
  double sigma2(double t) const { return sigma(t) * sigma(t); }
  /// m(t) = -gamma'/(1 - gamma)
  double m(double t) const { return -gamma_dot(t) / (1.0 - gamma(t)); }
  double alpha(double t) const {
    const double g = gamma(t);
    return gamma_dot(t) * sigma2(t) / (g * (1.0 - g));
  }
  double beta(double t) const { return gamma_dot(t) / gamma(t); }

 private:
  GammaSchedule(Kind k, std::function<double(double)> g, std::function<double(double)> gd)
      : kind_(k), gamma_(std::move(g)), gamma_dot_(std::move(gd)) {}

  Kind kind_;
  std::function<double(double)> gamma_;
  std::function<double(double)> gamma_dot_;
};

class MixtureModel {
 public:
  /// atoms: one column per training point.
  MixtureModel(Eigen::MatrixXd atoms, GammaSchedule schedule = GammaSchedule::linear())
      : atoms_(std::move(atoms)), schedule_(std::move(schedule)) {
    require(atoms_.cols() >= 1, "mixture needs at least one atom");
    require(atoms_.rows() >= 1, "atoms need dimension at least 1");
    require(atoms_.allFinite(), "atoms must be finite");
  }

  static MixtureModel from_points(std::span<const Point2> pts, GammaSchedule schedule = GammaSchedule::linear()) {
    require(!pts.empty(), "mixture needs at least one atom");
    Eigen::MatrixXd a(2, static_cast<Eigen::Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      a(0, static_cast<Eigen::Index>(i)) = pts[i].x;
      a(1, static_cast<Eigen::Index>(i)) = pts[i].y;
    }
    return MixtureModel(std::move(a), std::move(schedule));
  }

  const Eigen::MatrixXd& atoms() const { return atoms_; }
  const GammaSchedule& schedule() const { return schedule_; }
  Eigen::Index size() const { return atoms_.cols(); }
  Eigen::Index dim() const { return atoms_.rows(); }
  Vec atom(Eigen::Index i) const { return atoms_.col(i); }
  Vec mean(Eigen::Index i, double t) const { return schedule_.gamma(t) * atoms_.col(i); }

 private:
  Eigen::MatrixXd atoms_;
  GammaSchedule schedule_;
};

namespace detail {

/// Squared distances ||z - gamma x_i||^2 for every atom.
inline Vec bridge_sq_dists(const Eigen::MatrixXd& atoms, const Vec& z, double g) {
  return ((g * atoms).colwise() - z).colwise().squaredNorm().transpose();
}

/// Normalized softmax of -s / (2 var), max-subtracted.
inline Vec softmax_neg(const Vec& s, double var) {
  const double smin = s.minCoeff();
  Vec w = (-(s.array() - smin) / (2.0 * var)).exp().matrix();
  return w / w.sum();
}

inline double log_sum_exp(const Eigen::ArrayXd& a) {
  const double mx = a.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((a - mx).exp().sum());
}

}  // namespace detail

/// Responsibilities lambda_i(x, t) over all atoms.
inline Vec posterior_weights(const MixtureModel& m, const Vec& x, double t) {
  require_open_time(t);
  require(x.size() == m.dim(), "query dimension does not match atoms");
  const double tc = clamp_time(t);
  const double g = m.schedule().gamma(tc);
  return detail::softmax_neg(detail::bridge_sq_dists(m.atoms(), x, g), m.schedule().sigma2(tc));
}

inline double mixture_log_density(const MixtureModel& m, const Vec& z, double t) {
  require_open_time(t);
  require(z.size() == m.dim(), "query dimension does not match atoms");
  const double tc = clamp_time(t);
  const double var = m.schedule().sigma2(tc);
  const Vec s = detail::bridge_sq_dists(m.atoms(), z, m.schedule().gamma(tc));
  const double d = static_cast<double>(m.dim());
  const double n = static_cast<double>(m.size());
  return detail::log_sum_exp(-s.array() / (2.0 * var)) - std::log(n) -
         0.5 * d * std::log(2.0 * std::numbers::pi * var);
}

/// grad_z log p_t(z) = (1/sigma^2) sum_i lambda_i (mu_i - z)
inline Vec mixture_score(const MixtureModel& m, const Vec& z, double t) {
  require_open_time(t);
  const double tc = clamp_time(t);
  const Vec lam = posterior_weights(m, z, t);
  const double g = m.schedule().gamma(tc);
  return (g * (m.atoms() * lam) - z) / m.schedule().sigma2(tc);
}

/// alpha(t) score + beta(t) z; valid for any schedule with gamma(t) in (0, 1).
inline Vec general_velocity(const MixtureModel& m, const Vec& z, double t) {
  require_open_time(t);
  const double g = m.schedule().gamma(t);
  if (!(g > 0.0 && g < 1.0)) throw InvalidArgument("gamma(t) must lie in (0, 1)");
  return m.schedule().alpha(t) * mixture_score(m, z, t) + m.schedule().beta(t) * z;
}

/// Index whose responsibility is at least 1 - eps; lowest index on ties.
inline std::optional<Eigen::Index> dominance(const MixtureModel& m, const Vec& z, double t, double eps) {
  require(eps > 0.0 && eps < 0.5, "eps must lie in (0, 0.5)");
  const Vec lam = posterior_weights(m, z, t);
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < lam.size(); ++i)
    if (lam(i) > lam(best)) best = i;
  if (lam(best) >= 1.0 - eps) return best;
  return std::nullopt;
}

/// Closed-form EFM velocity for the linear bridge, optionally truncated to the K atoms
/// nearest in bridge distance ||x - t x_i||. The neighbor set is recomputed per call.
class EfmField {
 public:
  static constexpr std::size_t kAll = 0;

  EfmField(Eigen::MatrixXd atoms, std::size_t k = kAll) : atoms_(std::move(atoms)), k_(k) {
    require(atoms_.cols() >= 1, "EFM field needs at least one atom");
    require(atoms_.allFinite(), "atoms must be finite");
    require(k_ == kAll || k_ <= static_cast<std::size_t>(atoms_.cols()), "K must not exceed the atom count");
  }

  static EfmField from_points(std::span<const Point2> pts, std::size_t k = kAll) {
    return EfmField(MixtureModel::from_points(pts).atoms(), k);
  }

  const Eigen::MatrixXd& atoms() const { return atoms_; }
  std::size_t neighbors() const { return k_ == kAll ? static_cast<std::size_t>(atoms_.cols()) : k_; }

  /// Responsibilities over the kept atoms, returned with their indices.
  std::pair<std::vector<Eigen::Index>, Vec> weights(const Vec& x, double t) const {
    const double tc = clamp_time(t);
    const Vec s = detail::bridge_sq_dists(atoms_, x, tc);
    const auto n = static_cast<std::size_t>(atoms_.cols());
    std::vector<Eigen::Index> idx(n);
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    const std::size_t k = neighbors();
    if (k < n) {
      auto closer = [&](Eigen::Index a, Eigen::Index b) { return s(a) < s(b) || (s(a) == s(b) && a < b); };
      std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), closer);
      idx.resize(k);
      std::sort(idx.begin(), idx.end());
    }
    Vec sk(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) sk(static_cast<Eigen::Index>(j)) = s(idx[j]);
    return {std::move(idx), detail::softmax_neg(sk, (1.0 - tc) * (1.0 - tc))};
  }

  /// Defined on [0, 1): at t = 0 the weights take their t -> 0 limit. The 1/(1 - t) factor is exact.
  Vec operator()(const Vec& x, double t) const {
    if (!(t >= 0.0 && t < 1.0)) throw InvalidArgument("EFM velocity needs t in [0, 1)");
    require(x.size() == atoms_.rows(), "query dimension does not match atoms");
    const auto [idx, lam] = weights(x, t);
    Vec target = Vec::Zero(x.size());
    for (std::size_t j = 0; j < idx.size(); ++j) target += lam(static_cast<Eigen::Index>(j)) * atoms_.col(idx[j]);
    return (target - x) / (1.0 - t);
  }

 private:
  Eigen::MatrixXd atoms_;
  std::size_t k_;
};

inline Vec efm_velocity(const EfmField& f, const Vec& x, double t) {
  require_open_time(t);
  return f(x, t);
}

}  // namespace kinflow
