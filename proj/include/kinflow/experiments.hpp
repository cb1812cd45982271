#pragma once

// Experiment routines shared by the pipeline and the acceptance suite.

#include <Eigen/Dense>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "kinflow/diagnostics.hpp"
#include "kinflow/efm.hpp"
#include "kinflow/field.hpp"
#include "kinflow/sampler.hpp"
#include "kinflow/synthdata.hpp"

namespace kinflow {

/// Across-trajectory summary of a per-step series (power or cumulative energy).
struct SeriesBand {
  std::vector<double> t;
  std::vector<double> mean;
  std::vector<double> q25;
  std::vector<double> q75;
};

inline double quantile(std::vector<double> v, double q) {
  require(!v.empty(), "quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// series[i][j]: value j of trajectory i; all trajectories share the grid t.
inline SeriesBand band(const std::vector<double>& t, const std::vector<std::vector<double>>& series) {
  require(!series.empty(), "no series to summarize");
  SeriesBand b;
  b.t = t;
  for (std::size_t j = 0; j < t.size(); ++j) {
    std::vector<double> col;
    col.reserve(series.size());
    for (const auto& s : series) {
      require(s.size() == t.size(), "series lengths differ");
      col.push_back(s[j]);
    }
    double m = 0.0;
    for (double v : col) m += v;
    b.mean.push_back(m / static_cast<double>(col.size()));
    b.q25.push_back(quantile(col, 0.25));
    b.q75.push_back(quantile(col, 0.75));
  }
  return b;
}

/// Batch power profile indexed by step start time.
inline SeriesBand power_band(const std::vector<Trajectory>& trs) {
  require(!trs.empty(), "no trajectories");
  std::vector<double> t(trs.front().times.begin(), trs.front().times.end() - 1);
  std::vector<std::vector<double>> s;
  for (const auto& tr : trs) s.push_back(tr.power);
  return band(t, s);
}

inline SeriesBand energy_band(const std::vector<Trajectory>& trs) {
  require(!trs.empty(), "no trajectories");
  std::vector<std::vector<double>> s;
  for (const auto& tr : trs) s.push_back(tr.cumulative_kpe());
  return band(trs.front().times, s);
}

// ---------------------------------------------------------------------------

struct PeakPower {
  double peak = 0.0;    // max over steps of the batch-mean power
  double t_peak = 0.0;  // start time of that step
  std::size_t step = 0;
};

inline PeakPower peak_power(const std::vector<Trajectory>& trs) {
  const SeriesBand b = power_band(trs);
  PeakPower p;
  for (std::size_t j = 0; j < b.mean.size(); ++j)
    if (b.mean[j] > p.peak) {
      p.peak = b.mean[j];
      p.t_peak = b.t[j];
      p.step = j;
    }
  return p;
}

struct PowerSpikeResult {
  PeakPower vanilla;
  PeakPower efm;
  double ratio = 0.0;  // efm peak / vanilla peak
  double mean_kpe_vanilla = 0.0;
  double mean_kpe_efm = 0.0;
};

inline nlohmann::json to_json(const PowerSpikeResult& r) {
  return {{"vanilla_peak", r.vanilla.peak}, {"vanilla_t_peak", r.vanilla.t_peak},
          {"efm_peak", r.efm.peak},         {"efm_t_peak", r.efm.t_peak},
          {"peak_ratio", r.ratio},          {"mean_kpe_vanilla", r.mean_kpe_vanilla},
          {"mean_kpe_efm", r.mean_kpe_efm}};
}

inline PowerSpikeResult compare_power(const std::vector<Trajectory>& vanilla, const std::vector<Trajectory>& efm) {
  PowerSpikeResult r;
  r.vanilla = peak_power(vanilla);
  r.efm = peak_power(efm);
  r.ratio = r.vanilla.peak > 0.0 ? r.efm.peak / r.vanilla.peak : std::numeric_limits<double>::infinity();
  r.mean_kpe_vanilla = mean_of(vanilla, &Trajectory::kpe);
  r.mean_kpe_efm = mean_of(efm, &Trajectory::kpe);
  return r;
}

// ---------------------------------------------------------------------------

inline std::vector<double> kpe_values(const std::vector<Trajectory>& trs) {
  std::vector<double> v;
  v.reserve(trs.size());
  for (const auto& t : trs) v.push_back(t.kpe);
  return v;
}

struct DiagnosticsParams {
  std::size_t knn_k = 50;
  double bandwidth = 0.1;
  double tau_gap = 1.0 / 3.0;
  std::size_t k_mem = 2;
};

/// The diagnose report: rank statistics of KPE vs density, F_mem, optional W2 against held-out data.
inline nlohmann::json diagnose(const std::vector<double>& kpe, const std::vector<Point2>& endpoints,
                               const LabeledDataset& data, const DiagnosticsParams& p,
                               const std::vector<Point2>* heldout) {
  const KpeDensityReport r = kpe_density_report(kpe, endpoints, data, p.knn_k, p.bandwidth);
  const MemorizationReport mem = f_mem(endpoints, data.points, p.tau_gap, p.k_mem);
  nlohmann::json w2 = nullptr;
  if (heldout) {
    const std::size_t n = std::min(heldout->size(), endpoints.size());
    w2 = exact_w2(std::span(endpoints).first(n), std::span(*heldout).first(n));
  }
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"rho_knn", r.rho_knn},
          {"rho_kde", r.rho_kde},
          {"cliffs_delta", opt(r.cliffs_delta)},
          {"mwu_u", r.mwu ? nlohmann::json(r.mwu->u) : nlohmann::json()},
          {"mwu_p", r.mwu ? nlohmann::json(r.mwu->p) : nlohmann::json()},
          {"f_mem", mem.f_mem},
          {"w2", w2},
          {"n", r.n},
          {"n_dense", r.n_dense},
          {"n_sparse", r.n_sparse},
          {"mean_kpe_dense", r.mean_kpe_dense},
          {"mean_kpe_sparse", r.mean_kpe_sparse},
          {"config",
           {{"knn_k", p.knn_k},
            {"bandwidth", p.bandwidth},
            {"tau_gap", p.tau_gap},
            {"k_mem", p.k_mem},
            {"cliffs_delta_order", "dense_vs_sparse"}}}};
}

// ---------------------------------------------------------------------------
// KTS sweep.

struct SweepRow {
  bool baseline = false;
  double alpha0 = 0.0;
  double beta0 = 0.0;
  double w2 = 0.0;
  double f_mem = 0.0;
  double kpe_early = 0.0;
  double kpe_late = 0.0;
  double kpe = 0.0;
  std::size_t failures = 0;
  std::string error;  // non-empty when the cell failed
};

inline std::string csv_field(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "label,alpha0,beta0,w2,f_mem,kpe_early,kpe_late,kpe,failures,error\n";
  for (const auto& r : rows) {
    os << (r.baseline ? "baseline" : "kts") << ',' << format_double(r.alpha0) << ',' << format_double(r.beta0)
       << ',' << format_double(r.w2) << ',' << format_double(r.f_mem) << ',' << format_double(r.kpe_early) << ','
       << format_double(r.kpe_late) << ',' << format_double(r.kpe) << ',' << r.failures << ',' << csv_field(r.error) << '\n';
  }
}

template <VelocityField F>
SweepRow sweep_cell(const F& field, const LabeledDataset& data, const std::vector<Point2>& heldout, std::size_t m,
                    const SolverConfig& solver, double tau_split, const DiagnosticsParams& dp) {
  SweepRow row;
  const SampleBatch b = sample_batch(field, m, solver, tau_split);
  row.failures = b.failures.size();
  require(!b.trajectories.empty(), "every trajectory diverged");
  const auto ends = endpoints(b.trajectories);
  const std::size_t n = std::min(ends.size(), heldout.size());
  row.w2 = exact_w2(std::span(ends).first(n), std::span(heldout).first(n));
  row.f_mem = f_mem(ends, data.points, dp.tau_gap, dp.k_mem).f_mem;
  row.kpe_early = mean_of(b.trajectories, &Trajectory::kpe_early);
  row.kpe_late = mean_of(b.trajectories, &Trajectory::kpe_late);
  row.kpe = mean_of(b.trajectories, &Trajectory::kpe);
  return row;
}

/// One baseline row (unshaped field) followed by one row per (alpha0, beta0) in row-major order.
template <VelocityField F>
std::vector<SweepRow> kts_sweep(const F& base, const LabeledDataset& data, const std::vector<Point2>& heldout,
                                std::size_t m, const SolverConfig& solver, const std::vector<double>& alphas,
                                const std::vector<double>& betas, double k = 3.0, double tau_split = 0.6,
                                const DiagnosticsParams& dp = {}) {
  std::vector<SweepRow> rows;
  {
    SweepRow r = sweep_cell(base, data, heldout, m, solver, tau_split, dp);
    r.baseline = true;
    rows.push_back(r);
  }
  for (double a : alphas) {
    for (double b : betas) {
      SweepRow r;
      try {
        r = sweep_cell(shaped_field(std::cref(base), KtsSchedule{a, b, k, tau_split}), data, heldout, m, solver,
                       tau_split, dp);
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      r.alpha0 = a;
      r.beta0 = b;
      rows.push_back(r);
    }
  }
  return rows;
}

}  // namespace kinflow
