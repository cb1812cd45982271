#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "kinflow/efm.hpp"
#include "kinflow/rng.hpp"

using namespace kinflow;

namespace {

Vec v2(double x, double y) { return (Vec(2) << x, y).finished(); }

Eigen::MatrixXd cols(std::initializer_list<Vec> vs) {
  Eigen::MatrixXd m(vs.begin()->size(), static_cast<Eigen::Index>(vs.size()));
  Eigen::Index j = 0;
  for (const auto& v : vs) m.col(j++) = v;
  return m;
}

Eigen::MatrixXd random_atoms(Rng& r, Eigen::Index d, Eigen::Index n, double scale) {
  Eigen::MatrixXd a(d, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < d; ++i) a(i, j) = scale * r.normal();
  return a;
}

Vec random_vec(Rng& r, Eigen::Index d, double scale) {
  Vec v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = scale * r.normal();
  return v;
}

// Brute-force weights: direct exponentials without max subtraction (small exponents only).
Vec naive_weights(const Eigen::MatrixXd& atoms, const Vec& x, double t) {
  Vec w(atoms.cols());
  for (Eigen::Index i = 0; i < atoms.cols(); ++i)
    w(i) = std::exp(-(x - t * atoms.col(i)).squaredNorm() / (2 * (1 - t) * (1 - t)));
  return w / w.sum();
}

}  // namespace

TEST(GammaSchedule, LinearCoefficients) {
  const auto g = GammaSchedule::linear();
  for (double t : {0.1, 0.25, 0.5, 0.9}) {
    EXPECT_NEAR(g.alpha(t), (1 - t) / t, 1e-14);
    EXPECT_NEAR(g.beta(t), 1 / t, 1e-14);
    EXPECT_NEAR(g.m(t), -1 / (1 - t), 1e-12);
  }
}

TEST(GammaSchedule, CustomRejectsBadEndpoints) {
  EXPECT_THROW(GammaSchedule::custom([](double t) { return 0.5 * t; }, [](double) { return 0.5; }), InvalidArgument);
  EXPECT_NO_THROW(GammaSchedule::custom([](double t) { return t * t; }, [](double t) { return 2 * t; }));
}

TEST(PosteriorWeights, SingleAtom) {
  const MixtureModel m(cols({v2(1, 2)}));
  const Vec w = posterior_weights(m, v2(-3, 4), 0.3);
  ASSERT_EQ(w.size(), 1);
  EXPECT_EQ(w(0), 1.0);
}

TEST(PosteriorWeights, SymmetricPairSplitsEvenly) {
  const MixtureModel m(cols({v2(-1, 0), v2(1, 0)}));
  const Vec w = posterior_weights(m, v2(0, 0.7), 0.4);
  EXPECT_NEAR(w(0), 0.5, 1e-15);
  EXPECT_NEAR(w(1), 0.5, 1e-15);
}

TEST(PosteriorWeights, FarAtomIsSuppressed) {
  const MixtureModel m(cols({v2(0, 0), v2(10, 0)}));
  const Vec w = posterior_weights(m, v2(0, 0), 0.5);
  // Exponents 0 and 25 / (2 * 0.25) = 50.
  EXPECT_NEAR(w(0), 1.0 / (1.0 + std::exp(-50.0)), 1e-15);
  EXPECT_NEAR(w(1), std::exp(-50.0) / (1.0 + std::exp(-50.0)), 1e-35);
}

TEST(PosteriorWeights, MatchesNaiveSoftmaxAndSumsToOne) {
  Rng r(3);
  for (int k = 0; k < 200; ++k) {
    const auto atoms = random_atoms(r, 2, 7, 1.0);
    const Vec x = random_vec(r, 2, 1.0);
    const double t = 0.05 + 0.5 * r.uniform();
    const Vec w = posterior_weights(MixtureModel(atoms), x, t);
    EXPECT_NEAR(w.sum(), 1.0, 1e-15);
    EXPECT_GE(w.minCoeff(), 0.0);
    EXPECT_LE(w.maxCoeff(), 1.0);
    EXPECT_TRUE(w.isApprox(naive_weights(atoms, x, t), 1e-12));
  }
}

TEST(PosteriorWeights, RejectsClosedEndpoints) {
  const MixtureModel m(cols({v2(0, 0)}));
  EXPECT_THROW(posterior_weights(m, v2(0, 0), 0.0), InvalidArgument);
  EXPECT_THROW(posterior_weights(m, v2(0, 0), 1.0), InvalidArgument);
}

TEST(EfmVelocity, SingleAtom) {
  const EfmField f(cols({v2(1, 0)}));
  const Vec v = efm_velocity(f, v2(0, 0), 0.5);
  EXPECT_NEAR(v(0), 2.0, 1e-15);
  EXPECT_NEAR(v(1), 0.0, 1e-15);
}

TEST(EfmVelocity, ZeroAtIsolatedAtom) {
  const EfmField f(cols({v2(0.3, -0.2), v2(50, 0), v2(0, -50)}));
  const Vec v = efm_velocity(f, v2(0.3, -0.2), 0.9);
  EXPECT_LT(v.norm(), 1e-12);
}

TEST(EfmVelocity, DomainChecks) {
  const EfmField f(cols({v2(1, 0)}));
  EXPECT_THROW(efm_velocity(f, v2(0, 0), 0.0), InvalidArgument);
  EXPECT_THROW(efm_velocity(f, v2(0, 0), 1.0), InvalidArgument);
  // The field itself accepts the t = 0 limit used by samplers starting at zero.
  EXPECT_NO_THROW(f(v2(0, 0), 0.0));
  EXPECT_THROW(f(v2(0, 0), 1.0), InvalidArgument);
}

TEST(EfmVelocity, PermutationAndDuplicationInvariance) {
  Rng r(11);
  for (int k = 0; k < 50; ++k) {
    const auto atoms = random_atoms(r, 2, 9, 2.0);
    const Vec x = random_vec(r, 2, 1.0);
    const double t = 0.02 + 0.95 * r.uniform();
    const Vec base = efm_velocity(EfmField(atoms), x, t);
    Eigen::MatrixXd rev = atoms.rowwise().reverse();
    Eigen::MatrixXd twice(2, 18);
    twice << atoms, atoms;
    EXPECT_TRUE(efm_velocity(EfmField(rev), x, t).isApprox(base, 1e-12));
    EXPECT_TRUE(efm_velocity(EfmField(twice), x, t).isApprox(base, 1e-12));
  }
}

TEST(EfmVelocity, TruncationKeepsNearestByBridgeDistance) {
  // Atoms at distance 1, 2 and 30 from the query after scaling by t.
  const Eigen::MatrixXd atoms = cols({v2(2, 0), v2(0, 4), v2(60, 0)});
  const EfmField f(atoms, 2);
  const auto [idx, w] = f.weights(v2(0, 0), 0.5);
  EXPECT_EQ(idx, (std::vector<Eigen::Index>{0, 1}));
  EXPECT_NEAR(w.sum(), 1.0, 1e-15);
  // Renormalized over the kept pair: same as a field built from just those atoms.
  const EfmField pair(cols({v2(2, 0), v2(0, 4)}));
  EXPECT_TRUE(f(v2(0, 0), 0.5).isApprox(pair(v2(0, 0), 0.5), 1e-14));
  EXPECT_EQ(EfmField(atoms).neighbors(), 3u);
  EXPECT_THROW(EfmField(atoms, 4), InvalidArgument);
}

TEST(EfmVelocity, TruncationTracksQueryAcrossCalls) {
  const Eigen::MatrixXd atoms = cols({v2(-4, 0), v2(-3, 0), v2(3, 0), v2(4, 0)});
  const EfmField f(atoms, 2);
  EXPECT_EQ(f.weights(v2(-2, 0), 0.5).first, (std::vector<Eigen::Index>{0, 1}));
  EXPECT_EQ(f.weights(v2(2, 0), 0.5).first, (std::vector<Eigen::Index>{2, 3}));
}

TEST(MixtureLogDensity, SingleGaussianNormalizer) {
  const MixtureModel m(cols({v2(1, -1)}));
  const double t = 0.5;
  const double lp = mixture_log_density(m, m.mean(0, t), t);
  EXPECT_NEAR(lp, -std::log(2 * std::numbers::pi * 0.25), 1e-14);
  EXPECT_NEAR(lp, -0.4516, 1e-4);
}

TEST(MixtureLogDensity, DuplicationInvariant) {
  Rng r(5);
  const auto atoms = random_atoms(r, 2, 6, 1.0);
  Eigen::MatrixXd twice(2, 12);
  twice << atoms, atoms;
  const Vec z = random_vec(r, 2, 1.0);
  EXPECT_NEAR(mixture_log_density(MixtureModel(atoms), z, 0.37), mixture_log_density(MixtureModel(twice), z, 0.37),
              1e-12);
}

TEST(MixtureLogDensity, StableAtExtremes) {
  Rng r(6);
  const MixtureModel m(random_atoms(r, 2, 20, 1.0));
  for (double t : {1e-9, 0.5, 1.0 - 1e-9}) {
    EXPECT_TRUE(std::isfinite(mixture_log_density(m, v2(1e6, -1e6), t)));
    EXPECT_TRUE(std::isfinite(mixture_log_density(m, v2(0, 0), t)));
  }
}

TEST(MixtureScore, SingleAtomClosedForm) {
  const MixtureModel m(cols({v2(2, 1)}));
  const Vec z = v2(-0.5, 0.3);
  const double t = 0.3;
  const Vec expected = (m.mean(0, t) - z) / ((1 - t) * (1 - t));
  EXPECT_TRUE(mixture_score(m, z, t).isApprox(expected, 1e-14));
}

TEST(MixtureScore, SymmetricMidpointHasNoAxialComponent) {
  const MixtureModel m(cols({v2(-1, 0), v2(1, 0)}));
  EXPECT_NEAR(mixture_score(m, v2(0, 0.4), 0.6)(0), 0.0, 1e-15);
}

TEST(MixtureScore, MatchesFiniteDifferences) {
  Rng r(8);
  double worst = 0.0;
  for (int k = 0; k < 300; ++k) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(r.index(5));
    const MixtureModel m(random_atoms(r, d, 1 + static_cast<Eigen::Index>(r.index(20)), 1.0));
    const double t = 0.1 + 0.8 * r.uniform();
    const Vec z = random_vec(r, d, 1.0);
    const Vec s = mixture_score(m, z, t);
    Vec fd(d);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < d; ++i) {
      Vec zp = z, zm = z;
      zp(i) += h;
      zm(i) -= h;
      fd(i) = (mixture_log_density(m, zp, t) - mixture_log_density(m, zm, t)) / (2 * h);
    }
    worst = std::max(worst, (s - fd).norm() / std::max(1.0, s.norm()));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(GeneralVelocity, AgreesWithEfmForLinearSchedule) {
  Rng r(9);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(r.index(5));
    const auto atoms = random_atoms(r, d, 1 + static_cast<Eigen::Index>(r.index(50)), 1.0);
    const double t = 0.01 + 0.98 * r.uniform();
    const Vec z = random_vec(r, d, 1.0);
    const Vec a = general_velocity(MixtureModel(atoms), z, t);
    const Vec b = efm_velocity(EfmField(atoms), z, t);
    worst = std::max(worst, (a - b).norm() / (1.0 + b.norm()));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(GeneralVelocity, CustomScheduleMatchesPosteriorMeanForm) {
  // For any gamma: v = gamma' (sum lambda_i x_i - z) / (1 - gamma), with lambda under the gamma bridge.
  const auto sched = GammaSchedule::custom([](double t) { return t * t; }, [](double t) { return 2 * t; });
  Rng r(10);
  for (int k = 0; k < 100; ++k) {
    const auto atoms = random_atoms(r, 2, 5, 1.0);
    const MixtureModel m(atoms, sched);
    const double t = 0.1 + 0.8 * r.uniform();
    const Vec z = random_vec(r, 2, 1.0);
    const double g = t * t;
    Vec w(atoms.cols());
    for (Eigen::Index i = 0; i < atoms.cols(); ++i)
      w(i) = std::exp(-(z - g * atoms.col(i)).squaredNorm() / (2 * (1 - g) * (1 - g)));
    w /= w.sum();
    const Vec expected = 2 * t * (atoms * w - z) / (1 - g);
    EXPECT_TRUE(general_velocity(m, z, t).isApprox(expected, 1e-10));
  }
}

TEST(GeneralVelocity, SingularScheduleThrows) {
  // gamma touches 1 before t = 1.
  const auto sched =
      GammaSchedule::custom([](double t) { return std::min(1.0, 2 * t); }, [](double t) { return t < 0.5 ? 2.0 : 0.0; });
  const MixtureModel m(cols({v2(1, 0)}), sched);
  EXPECT_THROW(general_velocity(m, v2(0, 0), 0.75), InvalidArgument);
}

TEST(Dominance, Examples) {
  const MixtureModel one(cols({v2(3, 3)}));
  EXPECT_EQ(dominance(one, v2(-5, 1), 0.2, 0.1), 0);
  const MixtureModel pair(cols({v2(-1, 0), v2(1, 0)}));
  EXPECT_FALSE(dominance(pair, v2(0, 0), 0.5, 0.1).has_value());
  const MixtureModel far(cols({v2(0, 0), v2(10, 0)}));
  EXPECT_EQ(dominance(far, v2(0.05, 0), 0.5, 0.1), 0);
  EXPECT_EQ(dominance(far, v2(5.1, 0), 0.5, 0.1), 1);
  EXPECT_THROW(dominance(far, v2(0, 0), 0.5, 0.5), InvalidArgument);
  EXPECT_THROW(dominance(far, v2(0, 0), 0.5, 0.0), InvalidArgument);
}
