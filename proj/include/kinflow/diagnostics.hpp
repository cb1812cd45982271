#pragma once

// Density estimates, rank statistics, memorization fraction, and exact small-sample W2.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "kinflow/error.hpp"
#include "kinflow/hungarian.hpp"
#include "kinflow/synthdata.hpp"

namespace kinflow {

inline constexpr double kDensityFloor = 1e-300;

inline double safe_log(double density) { return std::log(std::max(density, kDensityFloor)); }

/// Volume of the unit ball in R^d.
inline double unit_ball_volume(int d) {
  require(d >= 1, "dimension must be positive");
  const double h = 0.5 * static_cast<double>(d);
  return std::pow(std::numbers::pi, h) / std::tgamma(h + 1.0);
}

/// Distance from q to its k-th nearest point in `train` (k is 1-based).
inline double kth_distance(std::span<const Point2> train, Point2 q, std::size_t k) {
  require(k >= 1 && k <= train.size(), "k must lie in [1, n]");
  std::vector<double> d2(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) d2[i] = squared_distance(train[i], q);
  std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(k - 1), d2.end());
  return std::sqrt(d2[k - 1]);
}

/// k / (n V_2 r_k^2); +infinity when r_k = 0.
inline double knn_density(std::span<const Point2> train, Point2 q, std::size_t k) {
  require(!train.empty(), "training set is empty");
  if (k > train.size()) throw InvalidArgument("k exceeds the training set size");
  const double r = kth_distance(train, q, k);
  if (r == 0.0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(k) / (static_cast<double>(train.size()) * unit_ball_volume(2) * r * r);
}

// ---------------------------------------------------------------------------
// Rank statistics.

/// Average ranks (1-based), ties share their mean rank.
inline std::vector<double> mid_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), "pearson needs equal non-empty inputs");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedStatistic("correlation is undefined for a constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  require(xs.size() == ys.size(), "spearman needs inputs of equal length");
  require(xs.size() >= 3, "spearman needs at least 3 pairs");
  const auto rx = mid_ranks(xs);
  const auto ry = mid_ranks(ys);
  return pearson(rx, ry);
}

inline double cliffs_delta(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty(), "cliff's delta needs two non-empty samples");
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sb.begin(), sb.end());
  long long dom = 0;
  for (double x : a) {
    const auto less = std::lower_bound(sb.begin(), sb.end(), x) - sb.begin();     // b_j < x
    const auto greater = sb.end() - std::upper_bound(sb.begin(), sb.end(), x);    // b_j > x
    dom += static_cast<long long>(less) - static_cast<long long>(greater);
  }
  return static_cast<double>(dom) / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

struct MwuResult {
  double u = 0.0;  // U for the first sample
  double p = 1.0;  // two-sided
  bool exact = false;
};

inline constexpr std::size_t kMwuExactMax = 20;

namespace detail {

/// Exact null distribution of the rank sum of n_a items drawn from the pooled mid-ranks,
/// counted over all C(n, n_a) subsets. Ranks are doubled so that they are integers.
inline std::pair<double, double> exact_rank_sum_tails(const std::vector<double>& ranks, std::size_t n_a,
                                                      long long observed2) {
  std::vector<long long> r2(ranks.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) r2[i] = std::llround(2.0 * ranks[i]);
  const long long total = std::accumulate(r2.begin(), r2.end(), 0LL);
  // dp[k][s]: number of k-subsets with doubled rank sum s.
  std::vector<std::vector<double>> dp(n_a + 1, std::vector<double>(static_cast<std::size_t>(total) + 1, 0.0));
  dp[0][0] = 1.0;
  for (long long r : r2)
    for (std::size_t k = n_a; k >= 1; --k)
      for (long long s = total; s >= r; --s) dp[k][s] += dp[k - 1][s - r];
  double le = 0.0, ge = 0.0, all = 0.0;
  for (long long s = 0; s <= total; ++s) {
    const double c = dp[n_a][s];
    all += c;
    if (s <= observed2) le += c;
    if (s >= observed2) ge += c;
  }
  return {le / all, ge / all};
}

}  // namespace detail

/// Mann-Whitney U with exact enumeration when |a| + |b| <= 20, otherwise the tie-corrected
/// normal approximation with continuity correction. Two-sided p doubles the smaller tail.
inline MwuResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty(), "mann-whitney needs two non-empty samples");
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto ranks = mid_ranks(pooled);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  double ra = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ra += ranks[i];
  MwuResult r;
  r.u = ra - na * (na + 1.0) / 2.0;
  if (pooled.size() <= kMwuExactMax) {
    r.exact = true;
    const auto [le, ge] = detail::exact_rank_sum_tails(ranks, a.size(), std::llround(2.0 * ra));
    r.p = std::min(1.0, 2.0 * std::min(le, ge));
    return r;
  }
  const double n = na + nb;
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double mu = na * nb / 2.0;
  const double var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var <= 0.0) {
    r.p = 1.0;
    return r;
  }
  const double z = std::max(0.0, std::abs(r.u - mu) - 0.5) / std::sqrt(var);
  r.p = std::min(1.0, std::erfc(z / std::numbers::sqrt2));
  return r;
}

inline double cohens_d(std::span<const double> a, std::span<const double> b) {
  require(a.size() >= 2 && b.size() >= 2, "cohen's d needs at least 2 values per group");
  auto mean = [](std::span<const double> x) { return std::accumulate(x.begin(), x.end(), 0.0) / x.size(); };
  auto ss = [](std::span<const double> x, double m) {
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return s;
  };
  const double ma = mean(a), mb = mean(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double pooled = std::sqrt((ss(a, ma) + ss(b, mb)) / (na + nb - 2.0));
  if (pooled == 0.0) throw UndefinedStatistic("cohen's d is undefined for zero pooled spread");
  return (ma - mb) / pooled;
}

// ---------------------------------------------------------------------------
// Memorization.

struct MemorizationReport {
  double f_mem = 0.0;
  double tau_gap = 1.0 / 3.0;
  std::size_t k_mem = 2;
  std::vector<double> d1;
  std::vector<double> dk;
  std::vector<double> ratio;
  std::vector<bool> memorized;
};

inline MemorizationReport f_mem(std::span<const Point2> generated, std::span<const Point2> train,
                                double tau_gap = 1.0 / 3.0, std::size_t k_mem = 2) {
  require(k_mem >= 2, "k_mem must be at least 2");
  require(train.size() >= k_mem, "training set smaller than k_mem");
  require(!generated.empty(), "no generated samples");
  MemorizationReport r;
  r.tau_gap = tau_gap;
  r.k_mem = k_mem;
  std::size_t count = 0;
  std::vector<double> d2(train.size());
  for (const Point2& g : generated) {
    for (std::size_t i = 0; i < train.size(); ++i) d2[i] = squared_distance(train[i], g);
    std::partial_sort(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(k_mem), d2.end());
    const double a = std::sqrt(d2[0]);
    const double b = std::sqrt(d2[k_mem - 1]);
    const double ratio = b == 0.0 ? 0.0 : a / b;
    const bool mem = b == 0.0 || ratio < tau_gap;
    r.d1.push_back(a);
    r.dk.push_back(b);
    r.ratio.push_back(ratio);
    r.memorized.push_back(mem);
    count += mem ? 1 : 0;
  }
  r.f_mem = static_cast<double>(count) / static_cast<double>(generated.size());
  return r;
}

// ---------------------------------------------------------------------------
// Exact W2 between equal-size empirical measures.

inline constexpr std::size_t kW2MaxSize = 1024;

inline double exact_w2(std::span<const Point2> a, std::span<const Point2> b) {
  if (a.size() != b.size()) throw InvalidArgument("exact_w2 needs equal-size samples");
  require(a.size() <= kW2MaxSize, "exact_w2 is limited to 1024 points");
  if (a.empty()) return 0.0;
  const auto n = static_cast<Eigen::Index>(a.size());
  Eigen::MatrixXd c(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) c(i, j) = squared_distance(a[i], b[j]);
  const Assignment m = solve_assignment(c);
  return std::sqrt(std::max(0.0, m.cost / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// KPE against training density.

struct KpeDensityReport {
  std::size_t n = 0;
  double rho_knn = 0.0;
  double rho_kde = 0.0;
  std::optional<double> cliffs_delta;  // delta(KPE dense, KPE sparse); negative when sparse is higher
  std::optional<MwuResult> mwu;        // first sample = dense
  std::size_t n_dense = 0;
  std::size_t n_sparse = 0;
  double mean_kpe_dense = 0.0;
  double mean_kpe_sparse = 0.0;
  std::vector<double> log_knn;
  std::vector<double> log_kde;
  std::vector<bool> dense;
};

inline constexpr std::size_t kMinReportTrajectories = 30;

/// Index of the training point nearest to q (lowest index on ties).
inline std::size_t nearest_index(std::span<const Point2> train, Point2 q) {
  require(!train.empty(), "training set is empty");
  std::size_t best = 0;
  double bd = squared_distance(train[0], q);
  for (std::size_t i = 1; i < train.size(); ++i) {
    const double d = squared_distance(train[i], q);
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return best;
}

inline KpeDensityReport kpe_density_report(std::span<const double> kpe, std::span<const Point2> endpoints,
                                           const LabeledDataset& data, std::size_t k = 50, double h = 0.1) {
  require(kpe.size() == endpoints.size(), "one KPE value per endpoint");
  require(kpe.size() >= kMinReportTrajectories, "need at least 30 trajectories");
  const KdeEstimator kde(data.points, h);
  KpeDensityReport r;
  r.n = kpe.size();
  std::vector<double> dense_kpe, sparse_kpe;
  for (std::size_t i = 0; i < kpe.size(); ++i) {
    r.log_knn.push_back(safe_log(knn_density(data.points, endpoints[i], k)));
    r.log_kde.push_back(std::max(kde.log_density(endpoints[i]), std::log(kDensityFloor)));
    const bool d = is_dense(data.strata[nearest_index(data.points, endpoints[i])]);
    r.dense.push_back(d);
    (d ? dense_kpe : sparse_kpe).push_back(kpe[i]);
  }
  r.rho_knn = spearman(kpe, r.log_knn);
  r.rho_kde = spearman(kpe, r.log_kde);
  r.n_dense = dense_kpe.size();
  r.n_sparse = sparse_kpe.size();
  if (!dense_kpe.empty()) r.mean_kpe_dense = std::accumulate(dense_kpe.begin(), dense_kpe.end(), 0.0) / r.n_dense;
  if (!sparse_kpe.empty())
    r.mean_kpe_sparse = std::accumulate(sparse_kpe.begin(), sparse_kpe.end(), 0.0) / r.n_sparse;
  if (!dense_kpe.empty() && !sparse_kpe.empty()) {
    r.cliffs_delta = cliffs_delta(dense_kpe, sparse_kpe);
    r.mwu = mann_whitney_u(dense_kpe, sparse_kpe);
  }
  return r;
}

}  // namespace kinflow
