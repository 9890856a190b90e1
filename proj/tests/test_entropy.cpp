#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "forge/bv_builder.hpp"
#include "forge/entropy.hpp"
#include "forge/shadowing.hpp"

using namespace forge;

namespace {

const DeformedMap& cat() {
  static const DeformedMap g = [] {
    IMat c(2, 2);
    c << 2, 1, 1, 1;
    return DeformedMap(ToralAutomorphism(c));
  }();
  return g;
}

const BvBuild& bv() {
  static const BvBuild b = [] {
    ToralAutomorphism A(find_bv_matrix());
    return build_bv_map(A, choose_parameters(A, 2));
  }();
  return b;
}

const DeformedMap& bv_linear() {
  static const DeformedMap g(bv().map.base());
  return g;
}

const double kCatEntropy = std::log((3 + std::sqrt(5.0)) / 2);

std::vector<Vec> random_points(int d, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<Vec> out;
  for (std::size_t i = 0; i < n; ++i) {
    Vec x(d);
    for (int c = 0; c < d; ++c) x[c] = U(rng);
    out.push_back(x);
  }
  return out;
}

// Quadratic greedy cover straight from the definition.
long long brute_force_cover(const MapView& g, const std::vector<Vec>& Y, double eps, int n) {
  std::vector<std::vector<Vec>> orbits;
  for (Vec x : Y) {
    std::vector<Vec> o;
    for (int k = 0; k < n; ++k) {
      o.push_back(wrap(x));
      x = g.step(x);
    }
    orbits.push_back(o);
  }
  auto close = [&](std::size_t i, std::size_t j) {
    for (int k = 0; k < n; ++k)
      if (torus_distance(orbits[i][k], orbits[j][k]) > eps) return false;
    return true;
  };
  std::vector<char> covered(Y.size(), 0);
  long long balls = 0;
  for (std::size_t i = 0; i < Y.size(); ++i) {
    if (covered[i]) continue;
    ++balls;
    for (std::size_t j = i; j < Y.size(); ++j)
      if (!covered[j] && close(i, j)) covered[j] = 1;
  }
  return balls;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Samples, GridIsCellCenteredInsidePatch) {
  const Vec c = Vec::Constant(2, 0.5);
  const auto Y = grid_samples(2, 4, c, 0.4);
  ASSERT_EQ(Y.size(), 16u);
  EXPECT_NEAR(Y[0][0], 0.35, 1e-15);
  EXPECT_NEAR(Y[15][1], 0.65, 1e-15);
  EXPECT_THROW((void)grid_samples(2, 0, c, 1.0), Error);
}

TEST(Samples, QuasiRandomStaysInPatch) {
  const Vec c = Vec::Constant(4, 0.5);
  for (const auto& x : quasi_random_samples(4, 2000, c, 0.1, 3))
    for (int i = 0; i < 4; ++i) EXPECT_LE(std::abs(x[i] - 0.5), 0.05 + 1e-15);
}

TEST(OrbitCache, StoresIteratesAndMaxDistance) {
  const auto Y = random_points(2, 5, 1);
  const OrbitTable t(map_view(cat()), Y, 6);
  Vec x = Y[3];
  for (int k = 0; k <= 6; ++k) {
    EXPECT_LT(torus_distance(t.point(3, k), x), 1e-12);
    x = cat().eval(x);
  }
  double m = 0;
  for (int k = 0; k < 4; ++k) m = std::max(m, torus_distance(t.point(1, k), t.point(2, k)));
  EXPECT_NEAR(t.dynamical_distance(1, 2, 4), m, 1e-15);
}

TEST(SpanningCount, SingleStepIsStaticCover) {
  const auto Y = random_points(2, 400, 5);
  EXPECT_EQ(spanning_count(map_view(cat()), 0.1, 1, Y), brute_force_cover(identity_view(2), Y, 0.1, 1));
}

TEST(SpanningCount, MatchesQuadraticGreedy) {
  for (std::uint64_t seed : {2u, 3u, 4u}) {
    const auto Y = random_points(2, 600, seed);
    EXPECT_EQ(spanning_count(map_view(cat()), 0.05, 5, Y), brute_force_cover(map_view(cat()), Y, 0.05, 5));
  }
  const auto Z = random_points(4, 500, 9);
  EXPECT_EQ(spanning_count(map_view(bv().map), 0.3, 3, Z), brute_force_cover(map_view(bv().map), Z, 0.3, 3));
}

TEST(SpanningCount, IdentityIndependentOfHorizon) {
  const auto Y = random_points(2, 500, 6);
  const OrbitTable t(identity_view(2), Y, 10);
  const long long c1 = spanning_count(t, 0.07, 1);
  for (int n = 2; n <= 11; ++n) EXPECT_EQ(spanning_count(t, 0.07, n), c1);
}

TEST(SpanningCount, EmptySetRejected) {
  try {
    (void)spanning_count(map_view(cat()), 0.1, 2, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptySet);
  }
}

TEST(SpanningCount, MonotoneInScaleAndHorizon) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto Y = random_points(2, 2000, seed);
    const OrbitTable t(map_view(cat()), Y, 7);
    for (int n = 1; n <= 8; ++n) {
      EXPECT_GE(spanning_count(t, 0.05, n), spanning_count(t, 0.1, n));
      if (n > 1) {
        EXPECT_GE(spanning_count(t, 0.05, n), spanning_count(t, 0.05, n - 1));
      }
    }
  }
}

TEST(SeparatedCount, TwoDistantPointsAtFirstStep) {
  std::vector<Vec> Y{Vec::Constant(2, 0.1), Vec::Constant(2, 0.4)};
  EXPECT_EQ(separated_count(map_view(cat()), 0.2, 1, Y), 2);
  EXPECT_EQ(separated_count(map_view(cat()), 0.5, 1, Y), 1);
}

TEST(SeparatedCount, IdentityIndependentOfHorizon) {
  const auto Y = random_points(2, 500, 7);
  const OrbitTable t(identity_view(2), Y, 8);
  for (int n = 2; n <= 9; ++n) EXPECT_EQ(separated_count(t, 0.07, n), separated_count(t, 0.07, 1));
}

TEST(SeparatedCount, SandwichAroundSpanning) {
  for (std::uint64_t seed = 20; seed < 26; ++seed) {
    const int d = seed % 2 ? 4 : 2;
    const auto Y = random_points(d, 1500, seed);
    const MapView g = d == 2 ? map_view(cat()) : map_view(bv().map);
    const OrbitTable t(g, Y, 5);
    for (double eps : {0.3, 0.1, 0.05})
      for (int n : {1, 3, 6}) {
        const long long span = spanning_count(t, eps, n);
        EXPECT_LE(separated_count(t, 2 * eps, n), span);
        EXPECT_LE(span, separated_count(t, eps, n));
      }
  }
}

TEST(LineFit, RecoversExactLineAndRejectsDegenerate) {
  const LineFit f = fit_line({1, 2, 3, 4}, {3, 5, 7, 9});
  EXPECT_NEAR(f.slope, 2.0, 1e-14);
  EXPECT_NEAR(f.intercept, 1.0, 1e-14);
  EXPECT_NEAR(f.r2, 1.0, 1e-14);
  EXPECT_THROW((void)fit_line({1, 1, 1}, {1, 2, 3}), Error);
  EXPECT_THROW((void)fit_line({1}, {1}), Error);
}

// ---------------------------------------------------------------------------

TEST(ExactEntropy, CatMapGoldenRatio) { EXPECT_NEAR(exact_linear_entropy(cat().base()), kCatEntropy, 1e-12); }

TEST(ExactEntropy, IdentityNotHyperbolic) {
  try {
    (void)exact_linear_entropy(IMat(IMat::Identity(2, 2)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotHyperbolic);
  }
}

TEST(ExactEntropy, BvMatrixProductOfExpandingEigenvalues) {
  // The seed matrix is symmetric, so a self-adjoint solver gives an independent route.
  const Eigen::MatrixXd a = bv().map.base().matrix().cast<double>();
  ASSERT_TRUE(a.isApprox(a.transpose()));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const auto ev = es.eigenvalues();
  EXPECT_NEAR(exact_linear_entropy(bv().map.base()), std::log(ev[2] * ev[3]), 1e-10);
}

TEST(TopologicalEntropy, CatMapMatchesEigenvalueOracle) {
  const auto s = estimate_topological_entropy(map_view(cat()), {1.0 / 64}, 8, 24).front();
  EXPECT_NEAR(s.slope, kCatEntropy, 0.15 * kCatEntropy);
  EXPECT_NEAR(s.separatedSlope, s.slope, 0.1);
  EXPECT_TRUE(s.sandwich_holds());
  EXPECT_EQ(s.windowMin, 12);
  EXPECT_EQ(s.windowMax, 24);
  EXPECT_GT(s.r2, 0.99);
  for (std::size_t i = 1; i < s.points.size(); ++i)
    EXPECT_GE(s.points[i].spanningEstimate, s.points[i - 1].spanningEstimate);
}

TEST(TopologicalEntropy, IdentityHasZeroSlope) {
  EntropyOptions o;
  o.perDim = 128;
  for (const auto& s : estimate_topological_entropy(identity_view(2), {0.1, 0.05}, 1, 8, o))
    EXPECT_EQ(s.slope, 0.0);
}

TEST(TopologicalEntropy, InverseMapAgrees) {
  EntropyOptions o;
  o.perDim = 256;
  const double f = estimate_entropy_series(map_view(cat()), 1.0 / 32, 6, 18, o).slope;
  const double b = estimate_entropy_series(map_view(cat(), true), 1.0 / 32, 6, 18, o).slope;
  EXPECT_NEAR(f, b, 0.1);
}

TEST(TopologicalEntropy, NondecreasingAsScaleShrinks) {
  EntropyOptions o;
  o.perDim = 256;
  const auto s = estimate_topological_entropy(map_view(cat()), {1.0 / 8, 1.0 / 16, 1.0 / 32}, 6, 16, o);
  EXPECT_TRUE(entropy_monotone_in_epsilon(s, 0.05));
}

TEST(TopologicalEntropy, ShortHorizonRangeRejected) {
  try {
    (void)estimate_entropy_series(map_view(cat()), 0.1, 3, 9);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::FitFailure);
  }
}

TEST(TopologicalEntropy, BvMapMatchesLinearModel) {
  EntropyOptions o;
  o.cloudSize = 32768;
  const double hg = estimate_entropy_series(map_view(bv().map), 1.0 / 16, 4, 12, o).slope;
  const double hf = estimate_entropy_series(map_view(bv_linear()), 1.0 / 16, 4, 12, o).slope;
  EXPECT_NEAR(hg, hf, 0.15);
  EXPECT_NEAR(hg, exact_linear_entropy(bv().map.base()), 0.15);
}

TEST(EntropyCsv, HeaderRowsAndDeterminism) {
  EntropyOptions o;
  o.perDim = 64;
  const auto s = estimate_topological_entropy(map_view(cat()), {0.1}, 1, 8, o);
  std::ostringstream a, b;
  write_entropy_csv(a, s);
  write_entropy_csv(b, estimate_topological_entropy(map_view(cat()), {0.1}, 1, 8, o));
  EXPECT_EQ(a.str(), b.str());
  std::istringstream in(a.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epsilon,n,spanning,separated");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 8);
}

// ---------------------------------------------------------------------------

TEST(Measures, UniformWeightsNormalized) {
  const auto mu = orbit_measure(map_view(cat()), Vec::Constant(2, 0.123), 100000);
  EXPECT_NO_THROW(mu.validate());
  EXPECT_EQ(mu.size(), 100000u);
}

TEST(Measures, ValidateRejectsBadWeights) {
  EmpiricalMeasure m;
  EXPECT_THROW(m.validate(), Error);
  m.atoms = {Vec::Zero(2), Vec::Constant(2, 0.5)};
  m.weights = {0.5, 0.6};
  EXPECT_THROW(m.validate(), Error);
  m.weights = {1.0, 0.0};
  EXPECT_THROW(m.validate(), Error);
}

TEST(Measures, PushForwardKeepsWeights) {
  const auto mu = orbit_measure(map_view(cat()), Vec::Constant(2, 0.3), 50);
  const auto nu = push_forward(mu, [](const Vec& x) { return cat().eval(x); });
  EXPECT_EQ(nu.weights, mu.weights);
  EXPECT_LT(torus_distance(nu.atoms[0], mu.atoms[1]), 1e-12);
}

TEST(Measures, OrbitMassNearCentersMatchesArea) {
  const auto mu = orbit_measure(map_view(cat()), Vec::Constant(2, 0.1234567), 100000);
  const std::vector<Vec> centers{Vec::Constant(2, 0.2), Vec::Constant(2, 0.7)};
  const double r = 0.1;
  EXPECT_NEAR(mass_near(mu, centers, r), 2 * M_PI * r * r, 0.01);
}

TEST(Katok, PointMassAtFixedPointCountsOne) {
  const auto s = estimate_measure_entropy_katok(map_view(cat()), point_mass(Vec::Zero(2)), 0.1, 1, 8);
  for (const auto& p : s.points) EXPECT_EQ(p.spanning, 1);
  EXPECT_EQ(s.slope, 0.0);
}

TEST(Katok, CatOrbitMeasureMatchesOracle) {
  const auto mu = orbit_measure(map_view(cat()), Vec::Constant(2, 0.1234567), 100000);
  const auto s = estimate_measure_entropy_katok(map_view(cat()), mu, 0.25, 1, 8);
  EXPECT_NEAR(s.slope, kCatEntropy, 0.15);
}

TEST(Katok, BvOrbitMeasureBelowTopologicalEstimate) {
  Vec x0(4);
  x0 << 0.1, 0.2, 0.3, 0.4;
  const auto mu = orbit_measure(map_view(bv().map), x0, 20000);
  const double hk = estimate_measure_entropy_katok(map_view(bv().map), mu, 0.4, 1, 4).slope;
  EntropyOptions o;
  o.cloudSize = 32768;
  const double ht = estimate_entropy_series(map_view(bv().map), 0.4, 2, 10, o).slope;
  EXPECT_GT(hk, 0.0);
  EXPECT_LE(hk, ht + 0.05);
}

TEST(NonConcentration, PointMassIsBelowThreshold) {
  const auto rep = check_non_concentration({point_mass(Vec::Zero(2))}, {0.0}, {Vec::Zero(2)}, 0.1, 0.4, 0.1);
  EXPECT_DOUBLE_EQ(rep.entries[0].mass, 1.0);
  EXPECT_FALSE(rep.entries[0].qualifies);
  EXPECT_TRUE(rep.pass());
}

TEST(NonConcentration, CatOrbitMeasureBelowEta) {
  const auto mu = orbit_measure(map_view(cat()), Vec::Constant(2, 0.1234567), 100000);
  const double h = estimate_measure_entropy_katok(map_view(cat()), mu, 0.25, 1, 8).slope;
  const std::vector<Vec> centers{Vec::Constant(2, 0.25), Vec::Constant(2, 0.75)};
  const double r = 0.1;
  const auto rep = check_non_concentration({mu}, {h}, centers, r, 0.48, 0.1);
  EXPECT_EQ(rep.qualifying, 1);
  EXPECT_NEAR(rep.entries[0].mass, 2 * M_PI * r * r, 0.01);
  EXPECT_TRUE(rep.pass());
}

TEST(NonConcentration, ConcentratedHighEntropyMeasureIsFlagged) {
  const auto rep = check_non_concentration({point_mass(Vec::Zero(2))}, {5.0}, {Vec::Zero(2)}, 0.1, 0.4, 0.1);
  EXPECT_EQ(rep.violations, 1);
  EXPECT_FALSE(rep.pass());
}

TEST(EntropyDecrease, PushedForwardOrbitMeasuresKeepEntropy) {
  const auto& g = bv().map;
  const SemiConjugacy sc = solve_semiconjugacy(g);
  const MapView gv = map_view(g), fv = map_view(bv_linear());
  for (int k = 0; k < 3; ++k) {
    Vec x0(4);
    x0 << 0.11 + 0.2 * k, 0.37, 0.53 - 0.1 * k, 0.71;
    const auto mu = orbit_measure(gv, x0, 10000);
    const auto nu = push_forward(mu, [&](const Vec& x) { return sc.pi(x); });
    const double hg = estimate_measure_entropy_katok(gv, mu, 0.4, 1, 4).slope;
    const double hf = estimate_measure_entropy_katok(fv, nu, 0.4, 1, 4).slope;
    EXPECT_TRUE(check_entropy_decrease(hf, hg, 4, bv().ledger.gamma).pass()) << hf << " vs " << hg;
  }
}

TEST(LocalEntropy, CatMapIsZero) {
  const auto rep = estimate_local_entropy(cat(), 1.0 / 16, {Vec::Constant(2, 0.3), Vec::Constant(2, 0.71)}, 24, 4, 12);
  EXPECT_EQ(rep.value, 0.0);
  EXPECT_GT(rep.ballSizes[0], 1u);
}

TEST(LocalEntropy, BvBelowAlmostExpansiveScaleIsNearZero) {
  const auto& b = bv();
  const double eps = 0.02;
  ASSERT_LT(eps, b.ledger.K0 * b.ledger.eps);
  const auto rep = estimate_local_entropy(b.map, eps, {b.qSide.fixedMinus, b.qSide.fixedPlus}, 16, 4, 12);
  EXPECT_NEAR(rep.value, 0.0, 0.05);
  EXPECT_GT(rep.ballSizes[0], 1u);
}

TEST(LocalEntropy, InnerHorizonMustCoverRange) {
  EXPECT_THROW((void)estimate_local_entropy(cat(), 0.1, {Vec::Zero(2)}, 5, 2, 8), Error);
}

TEST(PeriodicGrowth, LinearCountsEqualDeterminant) {
  const auto rep = periodic_growth(cat(), 12);
  IMat p = IMat::Identity(2, 2);
  for (const auto& r : rep.rows) {
    p = p * cat().base().matrix();
    // det(A^n - I) = 1 - tr(A^n) + det(A^n) for a 2x2 matrix of determinant 1.
    const long long oracle = std::llabs(2 - static_cast<long long>(p.trace()));
    EXPECT_EQ(r.linearCount, oracle);
    EXPECT_TRUE(r.enumerated);
    EXPECT_EQ(r.converged, oracle);
  }
  EXPECT_NEAR(rep.slope, kCatEntropy, 0.05 * kCatEntropy);
}

TEST(PeriodicGrowth, BvSlopeNearLinearEntropy) {
  const auto rep = periodic_growth(bv().map, 8);
  const double h = exact_linear_entropy(bv().map.base());
  EXPECT_NEAR(rep.slope, h, 0.1 * h);
  EXPECT_EQ(rep.rows[0].converged, rep.rows[0].linearCount);
}
