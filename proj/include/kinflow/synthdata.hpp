#pragma once

// Density-stratified 2D training sets, their CSV encoding, and a Gaussian KDE.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "kinflow/error.hpp"
#include "kinflow/rng.hpp"

namespace kinflow {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline double squared_distance(Point2 a, Point2 b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return dx * dx + dy * dy;
}

enum class DatasetKind { dense_sparse, multiscale_clusters, sandwich };

enum class Stratum { dense_core, sparse_ring, sparse_center, dense_cluster, dense_band, sparse_band };

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::dense_sparse: return "dense_sparse";
    case DatasetKind::multiscale_clusters: return "multiscale_clusters";
    case DatasetKind::sandwich: return "sandwich";
  }
  return "?";
}

inline std::string_view to_string(Stratum s) {
  switch (s) {
    case Stratum::dense_core: return "dense_core";
    case Stratum::sparse_ring: return "sparse_ring";
    case Stratum::sparse_center: return "sparse_center";
    case Stratum::dense_cluster: return "dense_cluster";
    case Stratum::dense_band: return "dense_band";
    case Stratum::sparse_band: return "sparse_band";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
  for (auto k : {DatasetKind::dense_sparse, DatasetKind::multiscale_clusters, DatasetKind::sandwich})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown dataset kind '" + std::string(s) + "'");
}

inline Stratum parse_stratum(std::string_view s) {
  for (auto v : {Stratum::dense_core, Stratum::sparse_ring, Stratum::sparse_center,
                 Stratum::dense_cluster, Stratum::dense_band, Stratum::sparse_band})
    if (to_string(v) == s) return v;
  throw InvalidArgument("unknown stratum '" + std::string(s) + "'");
}

inline bool is_dense(Stratum s) {
  return s == Stratum::dense_core || s == Stratum::dense_cluster || s == Stratum::dense_band;
}

inline DatasetKind kind_of(Stratum s) {
  switch (s) {
    case Stratum::dense_core:
    case Stratum::sparse_ring: return DatasetKind::dense_sparse;
    case Stratum::sparse_center:
    case Stratum::dense_cluster: return DatasetKind::multiscale_clusters;
    case Stratum::dense_band:
    case Stratum::sparse_band: return DatasetKind::sandwich;
  }
  return DatasetKind::dense_sparse;
}

struct LabeledDataset {
  std::vector<Point2> points;
  std::vector<Stratum> strata;
  DatasetKind kind = DatasetKind::dense_sparse;
  std::uint64_t seed = 0;

  std::size_t size() const { return points.size(); }
};

namespace detail {

/// Stratum sizes as floor(n * tenths / 10) in listed order; the remainder goes to the
/// first-listed stratum. Integer arithmetic avoids 0.6*n rounding below an integer.
template <std::size_t K>
std::array<std::size_t, K> partition_counts(std::size_t n, const std::array<std::size_t, K>& tenths) {
  std::array<std::size_t, K> counts{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < K; ++i) {
    counts[i] = n * tenths[i] / 10;
    used += counts[i];
  }
  counts[0] += n - used;
  return counts;
}

inline void check_size(std::size_t n) {
  if (n < 10) throw InvalidArgument("dataset size must be at least 10, got " + std::to_string(n));
}

inline void append(LabeledDataset& ds, Point2 p, Stratum s) {
  ds.points.push_back(p);
  ds.strata.push_back(s);
}

}  // namespace detail

/// 60% N(0, 0.15^2 I) core, 40% annulus r in [2.3, 2.7] with N(0, 0.5^2 I) jitter.
inline LabeledDataset gen_dense_sparse(std::size_t n, std::uint64_t seed) {
  detail::check_size(n);
  const auto counts = detail::partition_counts<2>(n, {6, 4});
  LabeledDataset ds;
  ds.kind = DatasetKind::dense_sparse;
  ds.seed = seed;
  ds.points.reserve(n);
  ds.strata.reserve(n);

  Rng core = Rng::stream(seed, 0);
  for (std::size_t i = 0; i < counts[0]; ++i) {
    const double x = core.normal(0.0, 0.15);
    const double y = core.normal(0.0, 0.15);
    detail::append(ds, {x, y}, Stratum::dense_core);
  }
  // Radius uniform on [2.3, 2.7] (not area-uniform), then Gaussian jitter.
  Rng ring = Rng::stream(seed, 1);
  for (std::size_t i = 0; i < counts[1]; ++i) {
    const double r = ring.uniform(2.3, 2.7);
    const double a = ring.uniform(0.0, 2.0 * std::numbers::pi);
    const double jx = ring.normal(0.0, 0.5);
    const double jy = ring.normal(0.0, 0.5);
    detail::append(ds, {r * std::cos(a) + jx, r * std::sin(a) + jy}, Stratum::sparse_ring);
  }
  return ds;
}

inline constexpr std::array<Point2, 4> kClusterCenters{{{2.0, 0.0}, {0.0, 2.0}, {-2.0, 0.0}, {0.0, -2.0}}};

/// 20% N(0, 0.6^2 I) center plus four 20% clusters N(c_i, 0.08^2 I).
inline LabeledDataset gen_multiscale_clusters(std::size_t n, std::uint64_t seed) {
  detail::check_size(n);
  const auto counts = detail::partition_counts<5>(n, {2, 2, 2, 2, 2});
  LabeledDataset ds;
  ds.kind = DatasetKind::multiscale_clusters;
  ds.seed = seed;
  ds.points.reserve(n);
  ds.strata.reserve(n);

  Rng center = Rng::stream(seed, 0);
  for (std::size_t i = 0; i < counts[0]; ++i) {
    const double x = center.normal(0.0, 0.6);
    const double y = center.normal(0.0, 0.6);
    detail::append(ds, {x, y}, Stratum::sparse_center);
  }
  for (std::size_t c = 0; c < 4; ++c) {
    Rng rng = Rng::stream(seed, 1 + c);
    for (std::size_t i = 0; i < counts[1 + c]; ++i) {
      const double x = rng.normal(kClusterCenters[c].x, 0.08);
      const double y = rng.normal(kClusterCenters[c].y, 0.08);
      detail::append(ds, {x, y}, Stratum::dense_cluster);
    }
  }
  return ds;
}

/// 60% dense middle band, 20% each sparse band above and below.
inline LabeledDataset gen_sandwich(std::size_t n, std::uint64_t seed) {
  detail::check_size(n);
  const auto counts = detail::partition_counts<3>(n, {6, 2, 2});
  LabeledDataset ds;
  ds.kind = DatasetKind::sandwich;
  ds.seed = seed;
  ds.points.reserve(n);
  ds.strata.reserve(n);

  Rng mid = Rng::stream(seed, 0);
  for (std::size_t i = 0; i < counts[0]; ++i) {
    const double x = mid.uniform(-3.0, 3.0);
    const double y = mid.uniform(-0.3, 0.3);
    const double jx = mid.normal(0.0, 0.1);
    const double jy = mid.normal(0.0, 0.1);
    detail::append(ds, {x + jx, y + jy}, Stratum::dense_band);
  }
  const std::array<std::pair<double, double>, 2> bands{{{1.5, 2.5}, {-2.5, -1.5}}};
  for (std::size_t b = 0; b < 2; ++b) {
    Rng rng = Rng::stream(seed, 1 + b);
    for (std::size_t i = 0; i < counts[1 + b]; ++i) {
      const double x = rng.uniform(-3.0, 3.0);
      const double y = rng.uniform(bands[b].first, bands[b].second);
      const double jx = rng.normal(0.0, 0.3);
      const double jy = rng.normal(0.0, 0.3);
      detail::append(ds, {x + jx, y + jy}, Stratum::sparse_band);
    }
  }
  return ds;
}

inline LabeledDataset generate(DatasetKind kind, std::size_t n, std::uint64_t seed) {
  switch (kind) {
    case DatasetKind::dense_sparse: return gen_dense_sparse(n, seed);
    case DatasetKind::multiscale_clusters: return gen_multiscale_clusters(n, seed);
    case DatasetKind::sandwich: return gen_sandwich(n, seed);
  }
  throw InvalidArgument("unknown dataset kind");
}

/// Gaussian-kernel density estimate over a fixed reference set.
class KdeEstimator {
 public:
  KdeEstimator(std::vector<Point2> reference, double bandwidth)
      : reference_(std::move(reference)), h_(bandwidth) {
    require(h_ > 0.0 && std::isfinite(h_), "KDE bandwidth must be positive");
    require(!reference_.empty(), "KDE reference set is empty");
  }

  double bandwidth() const { return h_; }
  std::span<const Point2> reference() const { return reference_; }

  /// (1 / (n 2 pi h^2)) sum_i exp(-|q - p_i|^2 / (2 h^2)); floored at the smallest
  /// positive double so the result stays strictly positive.
  double operator()(Point2 q) const {
    const double inv2h2 = 1.0 / (2.0 * h_ * h_);
    double sum = 0.0;
    for (const auto& p : reference_) sum += std::exp(-squared_distance(q, p) * inv2h2);
    const double norm = 1.0 / (static_cast<double>(reference_.size()) * 2.0 * std::numbers::pi * h_ * h_);
    const double d = sum * norm;
    return d > 0.0 ? d : std::numeric_limits<double>::denorm_min();
  }

  /// log-density computed with log-sum-exp so far-away queries stay finite.
  double log_density(Point2 q) const {
    const double inv2h2 = 1.0 / (2.0 * h_ * h_);
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& p : reference_) mx = std::max(mx, -squared_distance(q, p) * inv2h2);
    double sum = 0.0;
    for (const auto& p : reference_) sum += std::exp(-squared_distance(q, p) * inv2h2 - mx);
    return mx + std::log(sum) -
           std::log(static_cast<double>(reference_.size()) * 2.0 * std::numbers::pi * h_ * h_);
  }

 private:
  std::vector<Point2> reference_;
  double h_;
};

inline double kde_density(const KdeEstimator& est, Point2 q) { return est(q); }

// ---------------------------------------------------------------------------
// CSV: header `x,y,stratum`, doubles in shortest round-trip form.

inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw InvalidArgument("malformed number '" + std::string(s) + "'");
  return v;
}

inline void write_dataset_csv(std::ostream& os, const LabeledDataset& ds) {
  os << "x,y,stratum\n";
  for (std::size_t i = 0; i < ds.size(); ++i)
    os << format_double(ds.points[i].x) << ',' << format_double(ds.points[i].y) << ','
       << to_string(ds.strata[i]) << '\n';
}

inline void write_dataset_csv(const std::string& path, const LabeledDataset& ds) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset_csv(os, ds);
}

/// Reads the CSV written by write_dataset_csv. The dataset kind is inferred from the
/// stratum labels; the seed is not stored in the file and reads back as 0.
inline LabeledDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("empty dataset file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y,stratum") throw InvalidArgument("dataset header must be 'x,y,stratum'");
  LabeledDataset ds;
  std::optional<DatasetKind> kind;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos)
      throw InvalidArgument("dataset line " + std::to_string(lineno) + " has fewer than 3 fields");
    const std::string_view sv(line);
    const Point2 p{parse_double(sv.substr(0, c1)), parse_double(sv.substr(c1 + 1, c2 - c1 - 1))};
    const Stratum s = parse_stratum(sv.substr(c2 + 1));
    if (kind && *kind != kind_of(s))
      throw InvalidArgument("dataset mixes strata of different kinds at line " + std::to_string(lineno));
    kind = kind_of(s);
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw InvalidArgument("non-finite coordinate at line " + std::to_string(lineno));
    ds.points.push_back(p);
    ds.strata.push_back(s);
  }
  if (kind) ds.kind = *kind;
  return ds;
}

inline LabeledDataset read_dataset_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open dataset " + path);
  return read_dataset_csv(is);
}

}  // namespace kinflow
