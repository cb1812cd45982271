#pragma once

// Fixed-step ODE integration with kinetic path energy bookkeeping.

#include <Eigen/Dense>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "kinflow/error.hpp"
#include "kinflow/field.hpp"
#include "kinflow/rng.hpp"
#include "kinflow/synthdata.hpp"

namespace kinflow {

enum class SolverMethod { euler, midpoint };

inline std::string_view to_string(SolverMethod m) { return m == SolverMethod::euler ? "euler" : "midpoint"; }

inline SolverMethod parse_solver_method(std::string_view s) {
  if (s == "euler") return SolverMethod::euler;
  if (s == "midpoint") return SolverMethod::midpoint;
  throw InvalidArgument("unknown solver method: " + std::string(s));
}

struct SolverConfig {
  SolverMethod method = SolverMethod::euler;
  std::size_t steps = 100;
  double delta_cut = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(steps >= 1, "solver needs at least one step");
    require(delta_cut >= 0.0 && delta_cut < 0.5, "delta_cut must lie in [0, 0.5)");
  }
};

struct Trajectory {
  SolverMethod method = SolverMethod::euler;
  double delta_cut = 0.0;
  double tau_split = 0.6;
  std::vector<double> times;            // N + 1 grid points
  std::vector<Eigen::VectorXd> states;  // N + 1 states
  std::vector<Eigen::VectorXd> velocities;  // per step: the evaluation that moved the state
  std::vector<double> power;            // per step: |v|^2
  double dt = 0.0;
  double kpe = 0.0;
  double kpe_early = 0.0;
  double kpe_late = 0.0;

  std::size_t steps() const { return power.size(); }
  const Eigen::VectorXd& endpoint() const { return states.back(); }

  /// Cumulative KPE at each grid point (size N + 1, starts at 0).
  std::vector<double> cumulative_kpe() const {
    std::vector<double> c(times.size(), 0.0);
    for (std::size_t j = 0; j < power.size(); ++j) c[j + 1] = c[j] + 0.5 * power[j] * dt;
    return c;
  }
};

/// Integrates dx/dt = v(x, t) on [t0, t1] with n uniform steps.
template <VelocityField F>
Trajectory integrate_interval(const F& field, const Eigen::VectorXd& x0, double t0, double t1, std::size_t n,
                              SolverMethod method, double tau_split = 0.6) {
  require(n >= 1, "solver needs at least one step");
  require(t1 > t0, "integration interval is empty");
  require(x0.allFinite(), "initial state must be finite");
  Trajectory tr;
  tr.method = method;
  tr.tau_split = tau_split;
  tr.dt = (t1 - t0) / static_cast<double>(n);
  tr.times.reserve(n + 1);
  tr.states.reserve(n + 1);
  tr.velocities.reserve(n);
  tr.power.reserve(n);
  Eigen::VectorXd x = x0;
  tr.times.push_back(t0);
  tr.states.push_back(x);
  const double h = tr.dt;
  for (std::size_t j = 0; j < n; ++j) {
    const double t = t0 + static_cast<double>(j) * h;
    Eigen::VectorXd v = field(x, t);
    if (method == SolverMethod::midpoint) {
      const Eigen::VectorXd xm = x + 0.5 * h * v;
      if (!xm.allFinite()) throw IntegrationDiverged(j);
      v = field(xm, t + 0.5 * h);
    }
    x += h * v;
    if (!x.allFinite() || !v.allFinite()) throw IntegrationDiverged(j);
    const double p = v.squaredNorm();
    const double e = 0.5 * p * h;
    tr.kpe += e;
    (t < tau_split ? tr.kpe_early : tr.kpe_late) += e;
    tr.power.push_back(p);
    tr.velocities.push_back(std::move(v));
    tr.times.push_back(j + 1 == n ? t1 : t0 + static_cast<double>(j + 1) * h);
    tr.states.push_back(x);
  }
  return tr;
}

template <VelocityField F>
Trajectory integrate(const F& field, const Eigen::VectorXd& x0, const SolverConfig& cfg, double tau_split = 0.6) {
  cfg.validate();
  Trajectory tr = integrate_interval(field, x0, 0.0, 1.0 - cfg.delta_cut, cfg.steps, cfg.method, tau_split);
  tr.delta_cut = cfg.delta_cut;
  return tr;
}

/// Initial state of trajectory i: N(0, I) from its own substream.
inline Eigen::VectorXd initial_state(std::uint64_t seed, std::size_t i, Eigen::Index dim = 2) {
  Rng rng = Rng::stream(seed, i);
  Eigen::VectorXd x(dim);
  for (Eigen::Index k = 0; k < dim; ++k) x(k) = rng.normal();
  return x;
}

struct SampleFailure {
  std::size_t trajectory = 0;
  std::string message;
};

struct SampleBatch {
  std::vector<Trajectory> trajectories;
  std::vector<std::size_t> ids;  // trajectory index of each entry
  std::vector<SampleFailure> failures;
};

template <VelocityField F>
SampleBatch sample_batch(const F& field, std::size_t m, const SolverConfig& cfg, double tau_split = 0.6,
                         Eigen::Index dim = 2) {
  require(m >= 1, "need at least one trajectory");
  cfg.validate();
  SampleBatch out;
  out.trajectories.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    try {
      out.trajectories.push_back(integrate(field, initial_state(cfg.seed, i, dim), cfg, tau_split));
      out.ids.push_back(i);
    } catch (const IntegrationDiverged& e) {
      out.failures.push_back({i, e.what()});
    }
  }
  return out;
}

inline std::vector<Point2> endpoints(const std::vector<Trajectory>& trs) {
  std::vector<Point2> pts;
  pts.reserve(trs.size());
  for (const auto& t : trs) pts.push_back({t.endpoint()(0), t.endpoint()(1)});
  return pts;
}

inline double mean_of(const std::vector<Trajectory>& trs, double Trajectory::*field) {
  require(!trs.empty(), "no trajectories");
  double s = 0.0;
  for (const auto& t : trs) s += t.*field;
  return s / static_cast<double>(trs.size());
}

// ---------------------------------------------------------------------------
// Trace files.

/// Rows j = 0..N per trajectory; power on row j is the step starting at t_j ("nan" on the last row).
inline void write_traces_csv(std::ostream& os, const SampleBatch& b) {
  os << "traj_id,t,x,y,power,cum_kpe\n";
  for (std::size_t k = 0; k < b.trajectories.size(); ++k) {
    const auto& tr = b.trajectories[k];
    const auto cum = tr.cumulative_kpe();
    for (std::size_t j = 0; j < tr.times.size(); ++j) {
      os << b.ids[k] << ',' << format_double(tr.times[j]) << ',' << format_double(tr.states[j](0)) << ','
         << format_double(tr.states[j](1)) << ',' << (j < tr.power.size() ? format_double(tr.power[j]) : "nan")
         << ',' << format_double(cum[j]) << '\n';
    }
  }
}

inline nlohmann::json batch_summary_json(const SampleBatch& b, const SolverConfig& cfg, double tau_split,
                                         const std::string& field_name, const KtsSchedule& kts) {
  nlohmann::json trs = nlohmann::json::array();
  for (std::size_t k = 0; k < b.trajectories.size(); ++k) {
    const auto& tr = b.trajectories[k];
    trs.push_back({{"id", b.ids[k]},
                   {"kpe", tr.kpe},
                   {"kpe_early", tr.kpe_early},
                   {"kpe_late", tr.kpe_late},
                   {"endpoint", {tr.endpoint()(0), tr.endpoint()(1)}}});
  }
  nlohmann::json fails = nlohmann::json::array();
  for (const auto& f : b.failures) fails.push_back({{"id", f.trajectory}, {"error", f.message}});
  return {{"solver",
           {{"method", to_string(cfg.method)},
            {"steps", cfg.steps},
            {"delta_cut", cfg.delta_cut},
            {"seed", cfg.seed},
            {"tau_split", tau_split}}},
          {"field", field_name},
          {"kts", {{"alpha0", kts.alpha0}, {"beta0", kts.beta0}, {"k", kts.k}, {"tau_split", kts.tau_split}}},
          {"trajectories", trs},
          {"failures", fails}};
}

/// A parsed trace row set, grouped by trajectory; enough for plots and diagnostics.
struct TraceRecord {
  std::size_t id = 0;
  std::vector<double> t, x, y, power, cum_kpe;
  double kpe() const { return cum_kpe.empty() ? 0.0 : cum_kpe.back(); }
};

inline std::vector<TraceRecord> read_traces_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "traj_id,t,x,y,power,cum_kpe")
    throw InvalidArgument("trace file must start with header traj_id,t,x,y,power,cum_kpe");
  std::vector<TraceRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1))
      f.push_back(rest.substr(0, pos));
    f.push_back(rest);
    if (f.size() != 6) throw InvalidArgument("trace row needs 6 fields: " + line);
    const auto id = static_cast<std::size_t>(std::stoull(std::string(f[0])));
    if (out.empty() || out.back().id != id) out.push_back({id, {}, {}, {}, {}, {}});
    auto& r = out.back();
    r.t.push_back(parse_double(f[1]));
    r.x.push_back(parse_double(f[2]));
    r.y.push_back(parse_double(f[3]));
    r.power.push_back(f[4] == "nan" ? std::nan("") : parse_double(f[4]));
    r.cum_kpe.push_back(parse_double(f[5]));
  }
  return out;
}

inline std::vector<TraceRecord> read_traces_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open trace file " + path);
  return read_traces_csv(is);
}

}  // namespace kinflow
