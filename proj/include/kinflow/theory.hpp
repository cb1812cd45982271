#pragma once

// Numerical checks of the energy-density bounds, the local Gaussian remainders, terminal
// posterior concentration, terminal energy blow-up, and the path-energy lower bound.

#include <Eigen/Dense>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "kinflow/efm.hpp"
#include "kinflow/error.hpp"
#include "kinflow/rng.hpp"
#include "kinflow/sampler.hpp"

namespace kinflow {

/// Relative slack for inequalities that hold exactly in real arithmetic.
inline constexpr double kExactSlack = 1e-9;

inline bool leq_slack(double a, double b) {
  return a <= b + kExactSlack * std::max({1.0, std::abs(a), std::abs(b)});
}

struct BoundConstants {
  double eps = 0.0;
  double m = 0.0;
  double sigma2 = 0.0;
  double alpha = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double delta = 0.0;  // max_j |mu_j - mu_*|
  double b_norm = 0.0;
  double e = 0.0;
  double f = 0.0;
  double c_minus = 0.0;
  double c_plus = 0.0;
  double c0 = 0.0;
  double k = 0.0;
  double c_prime = 0.0;
};

inline BoundConstants bound_constants(const MixtureModel& mix, double t, double eps, Eigen::Index dominant) {
  require_open_time(t);
  require(eps > 0.0 && eps < 0.5, "eps must lie in (0, 0.5)");
  const auto& s = mix.schedule();
  const double g = s.gamma(t);
  require(g > 0.0 && g < 1.0, "gamma(t) must lie in (0, 1)");
  BoundConstants c;
  c.eps = eps;
  c.m = s.m(t);
  c.sigma2 = s.sigma2(t);
  c.alpha = s.alpha(t);
  // m^2 sigma^2 = gamma'^2; written this way the linear bridge gives exactly 1/2 and 12.
  const double gd2 = s.gamma_dot(t) * s.gamma_dot(t);
  c.c1 = 0.5 * gd2;
  c.c2 = 12.0 * gd2;
  const Vec mu_star = mix.mean(dominant, t);
  for (Eigen::Index j = 0; j < mix.size(); ++j) c.delta = std::max(c.delta, (mix.mean(j, t) - mu_star).norm());
  c.b_norm = std::abs(c.alpha / c.sigma2) * mu_star.norm();
  c.e = std::abs(c.alpha) * eps * c.delta / c.sigma2;
  c.f = c.b_norm + c.e;
  const double m2 = c.m * c.m;
  const double mu2 = mu_star.squaredNorm();
  c.c_minus = 0.5 * m2 * mu2 + 2.0 * c.f * c.f;
  c.c_plus = 6.0 * m2 * mu2 + 3.0 * (c.b_norm * c.b_norm + c.e * c.e);
  const double d = static_cast<double>(mix.dim());
  c.c0 = 0.5 * d * std::log(2.0 * std::numbers::pi) + 0.5 * d * std::log(c.sigma2) +
         std::log(static_cast<double>(mix.size()));
  c.k = std::abs(c.c0) - std::log(1.0 - eps);
  c.c_prime = std::max(c.c_minus + c.c1 * c.k, c.c_plus + c.c2 * c.k);
  return c;
}

struct BoundRecord {
  Vec z;
  double t = 0.0;
  std::optional<Eigen::Index> dominant;
  double lambda = 0.0;
  double neg_log_p = 0.0;
  double energy = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool lower_ok = false;
  bool upper_ok = false;
  std::string skipped;  // non-empty when the point is not dominant

  bool passed() const { return skipped.empty() && lower_ok && upper_ok; }
};

struct BoundCheckReport {
  std::vector<BoundRecord> records;
  std::size_t checked = 0;
  std::size_t passed = 0;
  std::size_t skipped = 0;
  double pass_rate() const { return checked == 0 ? 1.0 : static_cast<double>(passed) / static_cast<double>(checked); }
};

inline BoundRecord check_energy_density_bound(const MixtureModel& mix, const Vec& z, double t, double eps) {
  BoundRecord r;
  r.z = z;
  r.t = t;
  r.dominant = dominance(mix, z, t, eps);
  if (!r.dominant) {
    r.skipped = "posterior not dominant";
    return r;
  }
  const BoundConstants c = bound_constants(mix, t, eps, *r.dominant);
  r.lambda = posterior_weights(mix, z, t)(*r.dominant);
  r.neg_log_p = -mixture_log_density(mix, z, t);
  r.energy = general_velocity(mix, z, t).squaredNorm();
  r.lower = c.c1 * r.neg_log_p - c.c_prime;
  r.upper = c.c2 * r.neg_log_p + c.c_prime;
  r.lower_ok = leq_slack(r.lower, r.energy);
  r.upper_ok = leq_slack(r.energy, r.upper);
  return r;
}

inline BoundCheckReport check_energy_density_bounds(const MixtureModel& mix,
                                                    const std::vector<std::pair<Vec, double>>& points, double eps) {
  BoundCheckReport rep;
  for (const auto& [z, t] : points) {
    BoundRecord r = check_energy_density_bound(mix, z, t, eps);
    if (!r.skipped.empty()) {
      ++rep.skipped;
    } else {
      ++rep.checked;
      if (r.passed()) ++rep.passed;
    }
    rep.records.push_back(std::move(r));
  }
  return rep;
}

struct RemainderCheck {
  bool skipped = true;
  double value = 0.0;  // R_t, or |r_t| for the score remainder
  double lo = 0.0;
  double hi = 0.0;
  bool ok = false;
};

/// R_t = -log p - |z - mu_*|^2 / (2 sigma^2) - C0, expected in [log(1 - eps), 0].
inline RemainderCheck check_local_gaussian_remainder(const MixtureModel& mix, const Vec& z, double t, double eps) {
  RemainderCheck r;
  const auto dom = dominance(mix, z, t, eps);
  if (!dom) return r;
  r.skipped = false;
  const BoundConstants c = bound_constants(mix, t, eps, *dom);
  const double nlp = -mixture_log_density(mix, z, t);
  const double a = (z - mix.mean(*dom, t)).squaredNorm() / (2.0 * c.sigma2);
  r.value = nlp - a - c.c0;
  r.lo = std::log(1.0 - eps);
  r.hi = 0.0;
  const double scale = std::max({1.0, std::abs(nlp), a, std::abs(c.c0)});
  r.ok = r.value >= r.lo - kExactSlack * scale && r.value <= r.hi + kExactSlack * scale;
  return r;
}

/// r_t = score + (z - mu_*) / sigma^2, expected |r_t| <= eps Delta / sigma^2.
inline RemainderCheck check_score_remainder(const MixtureModel& mix, const Vec& z, double t, double eps) {
  RemainderCheck r;
  const auto dom = dominance(mix, z, t, eps);
  if (!dom) return r;
  r.skipped = false;
  const BoundConstants c = bound_constants(mix, t, eps, *dom);
  const Vec score = mixture_score(mix, z, t);
  const Vec pull = (z - mix.mean(*dom, t)) / c.sigma2;
  r.value = (score + pull).norm();
  r.lo = 0.0;
  r.hi = eps * c.delta / c.sigma2;
  r.ok = r.value <= r.hi + kExactSlack * std::max({1.0, score.norm(), pull.norm()});
  return r;
}

// ---------------------------------------------------------------------------
// Terminal concentration.

struct ConcentrationRecord {
  double t = 0.0;
  double margin = 0.0;  // min_{j != i*} s_j - s_{i*}
  bool margin_valid = false;
  double one_minus_lambda = 0.0;
  double bound = 0.0;
  bool ok = false;
};

struct ConcentrationReport {
  Eigen::Index dominant = 0;
  std::vector<ConcentrationRecord> records;
  std::size_t checked = 0;
  std::size_t violations = 0;
  std::size_t margin_invalid = 0;
};

/// 1 - lambda_* as the sum of the other responsibilities (no cancellation).
inline double one_minus_lambda(const Vec& s, Eigen::Index dominant, double var) {
  const double smin = s.minCoeff();
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index j = 0; j < s.size(); ++j) {
    const double w = std::exp(-(s(j) - smin) / (2.0 * var));
    den += w;
    if (j != dominant) num += w;
  }
  return num / den;
}

/// Checks 1 - lambda_* <= (n - 1) exp(-m_gap / (2 (1 - t)^2)) along (times, states) with t >= t0,
/// linear bridge. The dominant index is the nearest atom in bridge distance at the last point.
inline ConcentrationReport check_concentration(const MixtureModel& mix, const std::vector<double>& times,
                                               const std::vector<Vec>& states, double m_gap, double t0) {
  require(times.size() == states.size() && !times.empty(), "path times and states must match");
  require(m_gap >= 0.0, "margin must be non-negative");
  ConcentrationReport rep;
  const double n = static_cast<double>(mix.size());
  {
    const Vec s = detail::bridge_sq_dists(mix.atoms(), states.back(), clamp_time(times.back()));
    s.minCoeff(&rep.dominant);
  }
  for (std::size_t k = 0; k < times.size(); ++k) {
    const double t = times[k];
    if (t < t0 || t >= 1.0) continue;
    ConcentrationRecord r;
    r.t = t;
    const double tc = clamp_time(t);
    const Vec s = detail::bridge_sq_dists(mix.atoms(), states[k], tc);
    r.margin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < s.size(); ++j)
      if (j != rep.dominant) r.margin = std::min(r.margin, s(j) - s(rep.dominant));
    r.margin_valid = r.margin >= m_gap;
    const double u = 1.0 - tc;
    r.one_minus_lambda = one_minus_lambda(s, rep.dominant, u * u);
    r.bound = (n - 1.0) * std::exp(-m_gap / (2.0 * u * u));
    if (!r.margin_valid) {
      ++rep.margin_invalid;
    } else {
      ++rep.checked;
      r.ok = r.one_minus_lambda <= r.bound * (1.0 + kExactSlack) + 1e-300;
      if (!r.ok) ++rep.violations;
    }
    rep.records.push_back(r);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Terminal blow-up at a frozen point.

struct BlowupPoint {
  double delta = 0.0;
  double energy = 0.0;  // I(delta)
  double lower = 0.0;   // (c^2/4)(1/delta - 1/(1 - t_bar))
  bool ok = false;
};

struct BlowupReport {
  double c = 0.0;
  double radius = 0.0;  // max_i |x_i|
  double t_bar = 0.0;
  std::vector<BlowupPoint> points;
};

struct BlowupOptions {
  double t_start = 0.5;
  double steps_per_efold = 4000.0;  // trapezoid nodes per unit of log(1 - t)
};

namespace detail {

/// Trapezoid of |v(x, t)|^2 over t in [1 - u_hi, 1 - u_lo] on a grid uniform in log(1 - t).
inline double terminal_energy(const EfmField& f, const Vec& x, double u_hi, double u_lo, double per_efold) {
  const double span = std::log(u_hi / u_lo);
  const auto n = static_cast<std::size_t>(std::max(1.0, std::ceil(span * per_efold)));
  const double h = span / static_cast<double>(n);
  // dt = u ds with s = log u, so integrate |v|^2 u over s.
  auto g = [&](double s) {
    const double u = std::exp(s);
    return f(x, 1.0 - u).squaredNorm() * u;
  };
  const double s_lo = std::log(u_lo);
  double acc = 0.5 * (g(s_lo) + g(std::log(u_hi)));
  for (std::size_t k = 1; k < n; ++k) acc += g(s_lo + static_cast<double>(k) * h);
  return acc * h;
}

}  // namespace detail

/// Energy I(delta) accumulated over [t_bar, 1 - delta] at a frozen point x that keeps gap c to every atom.
inline BlowupReport blowup_probe(const EfmField& f, const Vec& x, double c, std::vector<double> deltas,
                                 const BlowupOptions& opt = {}) {
  require(c > 0.0, "gap c must be positive");
  require(!deltas.empty(), "delta grid is empty");
  const auto& atoms = f.atoms();
  double gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < atoms.cols(); ++i) gap = std::min(gap, (atoms.col(i) - x).norm());
  if (gap < c) throw InvalidArgument("hypothesis failed: frozen point is closer than c to an atom");
  BlowupReport rep;
  rep.c = c;
  for (Eigen::Index i = 0; i < atoms.cols(); ++i) rep.radius = std::max(rep.radius, atoms.col(i).norm());
  std::sort(deltas.begin(), deltas.end(), std::greater<>());
  const double dmin = deltas.back();
  require(dmin > 0.0 && deltas.front() < 1.0 - opt.t_start, "deltas must lie in (0, 1 - t_start)");

  // Concentration time: first point of a geometric grid in 1 - t with 2R(1 - lambda_*) <= c/2.
  std::optional<double> t_bar;
  for (double u = 1.0 - opt.t_start; u >= dmin; u *= 0.99) {
    const double t = 1.0 - u;
    const Vec s = detail::bridge_sq_dists(atoms, x, t);
    Eigen::Index dom = 0;
    s.minCoeff(&dom);
    if (2.0 * rep.radius * one_minus_lambda(s, dom, u * u) <= 0.5 * c) {
      t_bar = t;
      break;
    }
  }
  if (!t_bar) throw InvalidArgument("hypothesis failed: posterior does not concentrate before the smallest delta");
  rep.t_bar = *t_bar;
  const double u_bar = 1.0 - rep.t_bar;
  for (double d : deltas) {
    BlowupPoint p;
    p.delta = d;
    if (d < u_bar) p.energy = detail::terminal_energy(f, x, u_bar, d, opt.steps_per_efold);
    p.lower = 0.25 * c * c * (1.0 / d - 1.0 / u_bar);
    p.ok = leq_slack(p.lower, p.energy);
    rep.points.push_back(p);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Path-energy lower bound.

struct LowerBoundCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;
  bool ok = false;
};

/// Any path ending at an atom at time 1: int_t^1 |x'|^2 ds >= |x_i - x(t)|^2 / (1 - t).
/// Velocities are forward differences, so the integral is sum |dx|^2 / dt.
inline LowerBoundCheck universal_lower_bound_check(const std::vector<double>& times, const std::vector<Vec>& states,
                                                   const Eigen::MatrixXd& atoms, std::size_t start) {
  require(times.size() == states.size() && times.size() >= 2, "path needs at least two points");
  require(start + 1 < times.size(), "start index must precede the final point");
  require(std::abs(times.back() - 1.0) <= 1e-12, "path must end at t = 1");
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < atoms.cols(); ++i) best = std::min(best, (atoms.col(i) - states.back()).norm());
  if (best > 1e-12) throw InvalidArgument("path does not terminate at an atom");
  LowerBoundCheck r;
  for (std::size_t k = start; k + 1 < times.size(); ++k) {
    const double dt = times[k + 1] - times[k];
    require(dt > 0.0, "path times must increase");
    r.lhs += (states[k + 1] - states[k]).squaredNorm() / dt;
  }
  r.rhs = (states.back() - states[start]).squaredNorm() / (1.0 - times[start]);
  r.slack = 10.0 / static_cast<double>(times.size() - 1) * r.rhs;
  r.ok = r.lhs >= r.rhs - r.slack;
  return r;
}

// ---------------------------------------------------------------------------
// Integrated energy against integrated surprisal along a trajectory.

struct IntegratedEnergyDensity {
  double kpe = 0.0;
  double neg_log_density = 0.0;
  double ratio = 0.0;  // NaN when the density integral is zero
};

inline IntegratedEnergyDensity integrated_energy_density(const Trajectory& tr, const MixtureModel& mix) {
  IntegratedEnergyDensity r;
  r.kpe = tr.kpe;
  for (std::size_t k = 0; k + 1 < tr.times.size(); ++k) {
    const double a = -mixture_log_density(mix, tr.states[k], clamp_time(tr.times[k]));
    const double b = -mixture_log_density(mix, tr.states[k + 1], clamp_time(tr.times[k + 1]));
    r.neg_log_density += 0.5 * (a + b) * (tr.times[k + 1] - tr.times[k]);
  }
  r.ratio = r.neg_log_density == 0.0 ? std::nan("") : r.kpe / r.neg_log_density;
  return r;
}

// ---------------------------------------------------------------------------
// Sweep over random mixtures.

struct TheorySweepConfig {
  std::vector<int> dims{1, 2, 5};
  std::vector<int> atom_counts{1, 5, 50};
  std::vector<double> times{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<double> eps{0.05, 0.1, 0.3};
  std::size_t points_per_cell = 50;
  std::size_t max_draws_per_cell = 5000;
  std::uint64_t seed = 0;
};

struct TheorySweepCell {
  int d = 0;
  int n = 0;
  double t = 0.0;
  double eps = 0.0;
  std::size_t draws = 0;
  std::size_t dominant = 0;
  std::size_t bound_pass = 0;
  std::size_t remainder_pass = 0;
  std::size_t score_pass = 0;
  double min_lower_slack = std::numeric_limits<double>::infinity();  // energy - lower
  double min_upper_slack = std::numeric_limits<double>::infinity();  // upper - energy
};

struct TheorySweepReport {
  std::vector<TheorySweepCell> cells;
  std::size_t dominant = 0;
  std::size_t draws = 0;
  std::size_t bound_pass = 0;
  std::size_t remainder_pass = 0;
  std::size_t score_pass = 0;
  bool all_passed() const {
    return bound_pass == dominant && remainder_pass == dominant && score_pass == dominant;
  }
};

namespace detail {

/// Random atoms in a cube sized so that the component means gamma x_i are separated on the scale
/// of sigma times `spread`.
inline Eigen::MatrixXd random_atoms(Rng& rng, int d, int n, double t, double spread) {
  const double sigma = 1.0 - t;
  const double side = spread * sigma / t * std::pow(static_cast<double>(n), 1.0 / d);
  Eigen::MatrixXd a(d, n);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < d; ++k) a(k, j) = rng.uniform(-side, side);
  return a;
}

}  // namespace detail

/// Draws z ~ N(mu_i(t), (s sigma)^2 I) around random atoms, keeps the eps-dominant draws, and runs the
/// energy-density bound and both remainder checks on each.
inline TheorySweepReport run_theory_sweep(const TheorySweepConfig& cfg) {
  TheorySweepReport rep;
  std::uint64_t cell_id = 0;
  const double spreads[] = {1.0, 3.0, 8.0};
  const double scales[] = {0.5, 1.0, 2.0};
  for (int d : cfg.dims) {
    for (int n : cfg.atom_counts) {
      for (double t : cfg.times) {
        for (double eps : cfg.eps) {
          Rng rng = Rng::stream(cfg.seed, cell_id++);
          TheorySweepCell cell{d, n, t, eps};
          std::optional<MixtureModel> mix;
          while (cell.dominant < cfg.points_per_cell && cell.draws < cfg.max_draws_per_cell) {
            if (cell.draws % 10 == 0)
              mix.emplace(detail::random_atoms(rng, d, n, t, spreads[(cell.draws / 10) % 3]));
            ++cell.draws;
            const auto i = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)));
            const double s = scales[rng.index(3)] * (1.0 - t);
            Vec z = mix->mean(i, t);
            for (int k = 0; k < d; ++k) z(k) += s * rng.normal();
            const BoundRecord b = check_energy_density_bound(*mix, z, t, eps);
            if (!b.skipped.empty()) continue;
            ++cell.dominant;
            if (b.passed()) ++cell.bound_pass;
            cell.min_lower_slack = std::min(cell.min_lower_slack, b.energy - b.lower);
            cell.min_upper_slack = std::min(cell.min_upper_slack, b.upper - b.energy);
            if (check_local_gaussian_remainder(*mix, z, t, eps).ok) ++cell.remainder_pass;
            if (check_score_remainder(*mix, z, t, eps).ok) ++cell.score_pass;
          }
          rep.draws += cell.draws;
          rep.dominant += cell.dominant;
          rep.bound_pass += cell.bound_pass;
          rep.remainder_pass += cell.remainder_pass;
          rep.score_pass += cell.score_pass;
          rep.cells.push_back(cell);
        }
      }
    }
  }
  return rep;
}

inline nlohmann::json to_json(const TheorySweepReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"d", c.d},
                     {"n", c.n},
                     {"t", c.t},
                     {"eps", c.eps},
                     {"draws", c.draws},
                     {"dominant", c.dominant},
                     {"rejected", c.draws - c.dominant},
                     {"bound_pass", c.bound_pass},
                     {"remainder_pass", c.remainder_pass},
                     {"score_remainder_pass", c.score_pass},
                     {"min_lower_slack", c.dominant ? nlohmann::json(c.min_lower_slack) : nlohmann::json()},
                     {"min_upper_slack", c.dominant ? nlohmann::json(c.min_upper_slack) : nlohmann::json()}});
  auto rate = [&](std::size_t k) { return r.dominant ? static_cast<double>(k) / static_cast<double>(r.dominant) : 1.0; };
  return {{"draws", r.draws},
          {"dominant_points", r.dominant},
          {"acceptance_rate", r.draws ? static_cast<double>(r.dominant) / static_cast<double>(r.draws) : 0.0},
          {"bound_pass_rate", rate(r.bound_pass)},
          {"remainder_pass_rate", rate(r.remainder_pass)},
          {"score_remainder_pass_rate", rate(r.score_pass)},
          {"slack_policy", {{"exact_relative", kExactSlack}, {"path_integral", "10/N * rhs"}}},
          {"cells", cells}};
}

}  // namespace kinflow
