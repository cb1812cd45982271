#include <gtest/gtest.h>

#include <cmath>

#include "kinflow/theory.hpp"

using namespace kinflow;

namespace {

Vec v2(double x, double y) { return (Vec(2) << x, y).finished(); }

Eigen::MatrixXd cols(std::initializer_list<Vec> vs) {
  Eigen::MatrixXd m(vs.begin()->size(), static_cast<Eigen::Index>(vs.size()));
  Eigen::Index j = 0;
  for (const auto& v : vs) m.col(j++) = v;
  return m;
}

// Straight segment from a to b sampled on [t0, 1] with n steps.
std::pair<std::vector<double>, std::vector<Vec>> segment(const Vec& a, const Vec& b, double t0, std::size_t n) {
  std::vector<double> ts;
  std::vector<Vec> xs;
  for (std::size_t k = 0; k <= n; ++k) {
    const double s = static_cast<double>(k) / static_cast<double>(n);
    ts.push_back(k == n ? 1.0 : t0 + (1.0 - t0) * s);
    xs.push_back(k == n ? b : Vec(a + s * (b - a)));
  }
  return {ts, xs};
}

}  // namespace

TEST(BoundConstants, LinearBridgeGivesHalfAndTwelve) {
  const MixtureModel m(cols({v2(0, 0), v2(1, 1)}));
  for (double t : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}) {
    const auto c = bound_constants(m, t, 0.1, 0);
    EXPECT_NEAR(c.c1, 0.5, 1e-14);
    EXPECT_NEAR(c.c2, 12.0, 1e-14);
    EXPECT_NEAR(c.c1, 0.5 * c.m * c.m * c.sigma2, 1e-12);
  }
}

TEST(BoundConstants, CustomScheduleUsesDerivative) {
  const auto sched = GammaSchedule::custom([](double t) { return t * t; }, [](double t) { return 2 * t; });
  const MixtureModel m(cols({v2(0, 0)}), sched);
  const auto c = bound_constants(m, 0.5, 0.1, 0);
  EXPECT_NEAR(c.c1, 0.5, 1e-14);  // gamma' = 1 at t = 0.5
  EXPECT_NEAR(c.c2, 12.0, 1e-14);
  const auto c2 = bound_constants(m, 0.25, 0.1, 0);
  EXPECT_NEAR(c2.c1, 0.125, 1e-14);
}

TEST(EnergyDensityBound, SingleAtomPassesOnAGrid) {
  const MixtureModel m(cols({v2(0.7, -0.3)}));
  std::vector<std::pair<Vec, double>> pts;
  for (double t = 0.05; t < 0.99; t += 0.05)
    for (double x = -3; x <= 3; x += 0.5)
      for (double y = -3; y <= 3; y += 0.5) pts.emplace_back(v2(x, y), t);
  const auto rep = check_energy_density_bounds(m, pts, 0.1);
  EXPECT_EQ(rep.skipped, 0u);
  EXPECT_EQ(rep.checked, pts.size());
  EXPECT_EQ(rep.passed, rep.checked);
}

TEST(EnergyDensityBound, NonDominantPointsAreSkipped) {
  const MixtureModel m(cols({v2(-1, 0), v2(1, 0)}));
  const auto rep = check_energy_density_bounds(m, {{v2(0, 0), 0.5}, {v2(0.5, 0), 0.8}}, 0.1);
  EXPECT_EQ(rep.skipped, 1u);
  EXPECT_EQ(rep.checked, 1u);
  EXPECT_FALSE(rep.records[0].skipped.empty());
}

TEST(LocalGaussianRemainder, SingleAtomIsZero) {
  const MixtureModel m(cols({v2(1, 2)}));
  const auto r = check_local_gaussian_remainder(m, v2(-0.4, 0.9), 0.35, 0.1);
  ASSERT_FALSE(r.skipped);
  EXPECT_NEAR(r.value, 0.0, 1e-13);
  EXPECT_TRUE(r.ok);
}

TEST(LocalGaussianRemainder, StaysWithinLogOneMinusEps) {
  Rng rng(4);
  std::size_t dominant = 0;
  for (int k = 0; k < 2000; ++k) {
    const double t = 0.1 + 0.8 * rng.uniform();
    Eigen::MatrixXd a(2, 5);
    for (Eigen::Index j = 0; j < 5; ++j) a.col(j) = v2(rng.uniform(-3, 3), rng.uniform(-3, 3));
    const MixtureModel m(a);
    const Vec z = m.mean(static_cast<Eigen::Index>(rng.index(5)), t) + (1 - t) * v2(rng.normal(), rng.normal());
    const auto r = check_local_gaussian_remainder(m, z, t, 0.1);
    if (r.skipped) continue;
    ++dominant;
    EXPECT_GE(r.value, std::log(0.9) - 1e-12);
    EXPECT_LE(r.value, 1e-12);
  }
  EXPECT_GT(dominant, 200u);
}

TEST(LocalGaussianRemainder, DuplicateAtomsNeverDominate) {
  const MixtureModel m(cols({v2(1, 1), v2(1, 1)}));
  EXPECT_TRUE(check_local_gaussian_remainder(m, v2(0.5, 0.5), 0.5, 0.3).skipped);
  EXPECT_TRUE(check_energy_density_bound(m, v2(0.5, 0.5), 0.5, 0.3).dominant == std::nullopt);
}

TEST(ScoreRemainder, SingleAtomAndDegenerateSpread) {
  const MixtureModel one(cols({v2(1, 2)}));
  const auto r = check_score_remainder(one, v2(0.3, 0.3), 0.6, 0.05);
  ASSERT_FALSE(r.skipped);
  EXPECT_NEAR(r.value, 0.0, 1e-12);
  EXPECT_EQ(r.hi, 0.0);
  EXPECT_TRUE(r.ok);
}

TEST(ScoreRemainder, HoldsOnRandomDominantInstances) {
  Rng rng(5);
  std::size_t dominant = 0;
  for (int k = 0; k < 2000; ++k) {
    const double t = 0.1 + 0.8 * rng.uniform();
    Eigen::MatrixXd a(3, 8);
    for (Eigen::Index j = 0; j < 8; ++j)
      for (Eigen::Index i = 0; i < 3; ++i) a(i, j) = rng.uniform(-4, 4);
    const MixtureModel m(a);
    Vec z = m.mean(static_cast<Eigen::Index>(rng.index(8)), t);
    for (Eigen::Index i = 0; i < 3; ++i) z(i) += (1 - t) * rng.normal();
    const auto r = check_score_remainder(m, z, t, 0.05);
    if (r.skipped) continue;
    ++dominant;
    EXPECT_TRUE(r.ok) << r.value << " > " << r.hi;
  }
  EXPECT_GT(dominant, 100u);
}

TEST(Concentration, TwoAtomBoundAtTenthRemaining) {
  // Margin 1 at 1 - t = 0.1: bound (n - 1) exp(-1 / (2 * 0.01)) = e^-50.
  const MixtureModel m(cols({v2(0, 0), v2(std::sqrt(1.0 / 0.81), 0)}));
  const double t = 0.9;
  const auto rep = check_concentration(m, {t}, {v2(0, 0)}, 1.0, 0.0);
  ASSERT_EQ(rep.records.size(), 1u);
  const auto& r = rep.records[0];
  EXPECT_TRUE(r.margin_valid);
  EXPECT_NEAR(r.margin, 1.0, 1e-12);
  EXPECT_NEAR(r.bound, std::exp(-50.0), 1e-30);
  EXPECT_NEAR(r.bound, 1.93e-22, 0.01e-22);
  EXPECT_NEAR(r.one_minus_lambda, r.bound / (1 + r.bound), 1e-35);
  EXPECT_TRUE(r.ok);
  EXPECT_EQ(rep.violations, 0u);
}

TEST(Concentration, SingleAtomIsExact) {
  const MixtureModel m(cols({v2(2, 0)}));
  const auto rep = check_concentration(m, {0.2, 0.5, 0.9}, {v2(0, 0), v2(1, 0), v2(3, 3)}, 0.0, 0.0);
  for (const auto& r : rep.records) {
    EXPECT_EQ(r.bound, 0.0);
    EXPECT_EQ(r.one_minus_lambda, 0.0);
    EXPECT_TRUE(r.ok);
  }
}

TEST(Concentration, VacuousAtStart) {
  Rng rng(2);
  Eigen::MatrixXd a(2, 6);
  for (Eigen::Index j = 0; j < 6; ++j) a.col(j) = v2(rng.normal(), rng.normal());
  const MixtureModel m(a);
  const auto rep = check_concentration(m, {0.0}, {v2(0.1, 0.2)}, 0.0, 0.0);
  ASSERT_EQ(rep.records.size(), 1u);
  EXPECT_EQ(rep.records[0].bound, 5.0);
  EXPECT_TRUE(rep.records[0].ok);
}

TEST(Concentration, NeverViolatedOnFrozenProbes) {
  Rng rng(12);
  std::size_t checked = 0;
  for (int k = 0; k < 100; ++k) {
    Eigen::MatrixXd a(2, 10);
    for (Eigen::Index j = 0; j < 10; ++j) a.col(j) = v2(rng.uniform(-2, 2), rng.uniform(-2, 2));
    const MixtureModel m(a);
    const Vec x = v2(rng.uniform(-2, 2), rng.uniform(-2, 2));
    std::vector<double> ts;
    std::vector<Vec> xs;
    for (double u = 0.5; u > 1e-4; u *= 0.8) {
      ts.push_back(1 - u);
      xs.push_back(x);
    }
    // Use the realized margin at the final time as m_gap: the bound then applies wherever the margin holds.
    const auto probe = check_concentration(m, ts, xs, 0.0, 0.5);
    const double gap = probe.records.back().margin;
    const auto rep = check_concentration(m, ts, xs, gap, 0.5);
    checked += rep.checked;
    EXPECT_EQ(rep.violations, 0u);
  }
  EXPECT_GT(checked, 0u);
}

TEST(BlowupProbe, SingleAtomMatchesAnalytic) {
  const EfmField f(cols({v2(0, 0)}));
  const auto rep = blowup_probe(f, v2(1, 0), 1.0, {1e-1, 1e-2, 1e-3, 1e-4});
  EXPECT_DOUBLE_EQ(rep.t_bar, 0.5);
  for (const auto& p : rep.points) {
    const double exact = 1.0 / p.delta - 1.0 / (1.0 - rep.t_bar);
    EXPECT_NEAR(p.energy / exact, 1.0, 1e-6);
    EXPECT_TRUE(p.ok);
  }
}

TEST(BlowupProbe, HalvingDeltaRoughlyDoublesEnergy) {
  const EfmField f(cols({v2(0, 0), v2(2, 1), v2(-1, 2)}));
  const std::vector<double> deltas{1e-2, 5e-3, 2.5e-3, 1.25e-3};
  const auto rep = blowup_probe(f, v2(0.6, -0.8), 0.5, deltas);
  for (std::size_t k = 0; k + 1 < rep.points.size(); ++k) {
    const double ratio = rep.points[k + 1].energy / rep.points[k].energy;
    EXPECT_GE(ratio, 1.8);
    EXPECT_LE(ratio, 2.2);
  }
  for (const auto& p : rep.points) EXPECT_TRUE(p.ok);
}

TEST(BlowupProbe, LowerBoundScalesWithCSquared) {
  const EfmField f(cols({v2(0, 0)}));
  const auto a = blowup_probe(f, v2(1, 0), 1.0, {1e-2, 1e-3});
  const auto b = blowup_probe(f, v2(2, 0), 2.0, {1e-2, 1e-3});
  ASSERT_EQ(a.t_bar, b.t_bar);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_NEAR(b.points[k].lower, 4.0 * a.points[k].lower, 1e-9 * b.points[k].lower);
    EXPECT_NEAR(b.points[k].energy, 4.0 * a.points[k].energy, 1e-9 * b.points[k].energy);
  }
}

TEST(BlowupProbe, FailedHypothesisIsNamed) {
  const EfmField f(cols({v2(0, 0)}));
  try {
    blowup_probe(f, v2(0.1, 0), 1.0, {1e-2});
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("hypothesis failed"), std::string::npos);
  }
}

TEST(UniversalLowerBound, StraightPathAttainsEquality) {
  const Eigen::MatrixXd atoms = cols({v2(1, 0), v2(5, 5)});
  const auto [ts, xs] = segment(v2(0, 0), v2(1, 0), 0.5, 1000);
  const auto r = universal_lower_bound_check(ts, xs, atoms, 0);
  EXPECT_NEAR(r.rhs, 2.0, 1e-12);
  EXPECT_NEAR(r.lhs, 2.0, 1e-6);
  EXPECT_TRUE(r.ok);
}

TEST(UniversalLowerBound, DetourCostsMore) {
  const Eigen::MatrixXd atoms = cols({v2(1, 0)});
  auto [ts, xs] = segment(v2(0, 0), v2(1, 0), 0.5, 1000);
  for (std::size_t k = 1; k + 1 < xs.size(); ++k) xs[k](1) += 0.3 * std::sin(std::numbers::pi * k / 1000.0);
  const auto r = universal_lower_bound_check(ts, xs, atoms, 0);
  EXPECT_GT(r.lhs, 2.0);
  EXPECT_TRUE(r.ok);
}

TEST(UniversalLowerBound, RandomPiecewiseLinearPaths) {
  Rng rng(21);
  for (int k = 0; k < 100; ++k) {
    Eigen::MatrixXd atoms(2, 4);
    for (Eigen::Index j = 0; j < 4; ++j) atoms.col(j) = v2(rng.normal(), rng.normal());
    const Vec target = atoms.col(static_cast<Eigen::Index>(rng.index(4)));
    const double t0 = 0.9 * rng.uniform();
    const std::size_t knots = 1 + rng.index(5);
    std::vector<Vec> corners{v2(2 * rng.normal(), 2 * rng.normal())};
    for (std::size_t q = 0; q < knots; ++q) corners.push_back(v2(2 * rng.normal(), 2 * rng.normal()));
    corners.push_back(target);
    std::vector<double> ts;
    std::vector<Vec> xs;
    const std::size_t per = 50;
    const std::size_t n = per * (corners.size() - 1);
    for (std::size_t s = 0; s <= n; ++s) {
      const std::size_t seg = std::min(s / per, corners.size() - 2);
      const double w = static_cast<double>(s - seg * per) / per;
      ts.push_back(s == n ? 1.0 : t0 + (1 - t0) * static_cast<double>(s) / static_cast<double>(n));
      xs.push_back(s == n ? target : Vec((1 - w) * corners[seg] + w * corners[seg + 1]));
    }
    const auto r = universal_lower_bound_check(ts, xs, atoms, 0);
    EXPECT_GE(r.lhs, r.rhs * (1 - 1e-12));
  }
}

TEST(UniversalLowerBound, RejectsPathsOffAtoms) {
  const Eigen::MatrixXd atoms = cols({v2(1, 0)});
  const auto [ts, xs] = segment(v2(0, 0), v2(1, 0.01), 0.5, 10);
  EXPECT_THROW(universal_lower_bound_check(ts, xs, atoms, 0), InvalidArgument);
  auto [ts2, xs2] = segment(v2(0, 0), v2(1, 0), 0.5, 10);
  ts2.back() = 0.99;
  EXPECT_THROW(universal_lower_bound_check(ts2, xs2, atoms, 0), InvalidArgument);
}

TEST(IntegratedEnergyDensity, ZeroLengthTrajectory) {
  Trajectory tr;
  tr.times = {0.5};
  tr.states = {v2(0, 0)};
  const auto r = integrated_energy_density(tr, MixtureModel(cols({v2(1, 0)})));
  EXPECT_EQ(r.kpe, 0.0);
  EXPECT_EQ(r.neg_log_density, 0.0);
  EXPECT_TRUE(std::isnan(r.ratio));
}

TEST(IntegratedEnergyDensity, EfmTrajectoryAndDuplication) {
  const auto ds = gen_dense_sparse(200, 3);
  const EfmField f = EfmField::from_points(ds.points);
  SolverConfig cfg;
  cfg.method = SolverMethod::midpoint;
  cfg.steps = 100;
  cfg.delta_cut = 1e-3;
  const auto tr = integrate(f, initial_state(0, 0), cfg);
  const auto mix = MixtureModel::from_points(ds.points);
  const auto r = integrated_energy_density(tr, mix);
  EXPECT_TRUE(std::isfinite(r.ratio));
  EXPECT_GT(r.kpe, 0.0);
  auto pts = ds.points;
  pts.insert(pts.end(), ds.points.begin(), ds.points.end());
  const auto r2 = integrated_energy_density(tr, MixtureModel::from_points(pts));
  EXPECT_NEAR(r2.neg_log_density, r.neg_log_density, 1e-9 * std::abs(r.neg_log_density));
}

TEST(TheorySweep, SmallSweepPassesEverywhere) {
  TheorySweepConfig cfg;
  cfg.points_per_cell = 5;
  const auto rep = run_theory_sweep(cfg);
  EXPECT_EQ(rep.cells.size(), 3u * 3u * 9u * 3u);
  EXPECT_GT(rep.dominant, 1000u);
  EXPECT_TRUE(rep.all_passed());
  const auto js = to_json(rep);
  EXPECT_EQ(js["bound_pass_rate"], 1.0);
  EXPECT_EQ(run_theory_sweep(cfg).dominant, rep.dominant);
}
