#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "forge/bv_builder.hpp"
#include "forge/cones.hpp"

using namespace forge;

namespace {

IMat cat() {
  IMat a(2, 2);
  a << 2, 1, 1, 1;
  return a;
}

const ToralAutomorphism& cat_map() {
  static const ToralAutomorphism A(cat());
  return A;
}

const ToralAutomorphism& bv_base() {
  static const ToralAutomorphism A(find_bv_matrix());
  return A;
}

const BvBuild& bv() {
  static const BvBuild b = build_bv_map(bv_base(), choose_parameters(bv_base(), 2));
  return b;
}

ConeField axis_cone(double alpha) {
  Mat p(2, 1), c(2, 1);
  p << 1, 0;
  c << 0, 1;
  return ConeField(p, c, alpha);
}

}  // namespace

// ---------------------------------------------------------------------------
// Cone membership
// ---------------------------------------------------------------------------

TEST(ConeField, PrimaryDirectionInside) {
  const auto cones = make_cones(cat_map().spectral(), 0.1);
  const auto& sd = cat_map().spectral();
  EXPECT_TRUE(cone_contains(cones.unstable, sd.unstable_frame().col(0)));
  EXPECT_TRUE(cone_contains(cones.stable, sd.stable_frame().col(0)));
}

TEST(ConeField, ComplementDirectionOutside) {
  const auto& sd = cat_map().spectral();
  const auto cones = make_cones(sd, 1e6);
  EXPECT_FALSE(cone_contains(cones.unstable, sd.stable_frame().col(0)));
}

TEST(ConeField, BoundaryIsInside) {
  const auto c = axis_cone(0.5);
  Vec v(2);
  v << 2.0, 1.0;
  EXPECT_TRUE(c.contains(v));
  EXPECT_DOUBLE_EQ(c.margin(v), 0.0);
  v << 2.0, 1.0000001;
  EXPECT_FALSE(c.contains(v));
}

TEST(ConeField, ZeroVectorRejected) {
  const auto c = axis_cone(0.5);
  try {
    (void)c.contains(Vec::Zero(2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ZeroVector);
  }
}

TEST(ConeField, SamplesLieInCone) {
  const auto cones = make_cones(bv_base().spectral(), 0.05);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) {
    const Vec v = cones.unstable.sample(rng, i % 2 == 0);
    EXPECT_NEAR(v.norm(), 1.0, 1e-14);
    EXPECT_GE(cones.unstable.margin(v), -1e-12);
  }
}

TEST(ConeField, ApertureMustBePositive) {
  Mat p(2, 1), c(2, 1);
  p << 1, 0;
  c << 0, 1;
  EXPECT_THROW(ConeField(p, c, 0.0), Error);
}

// ---------------------------------------------------------------------------
// Cone invariance
// ---------------------------------------------------------------------------

TEST(ConeInvariance, LinearMapExactMargins) {
  for (const ToralAutomorphism* pa : {&cat_map(), &bv_base()}) {
    const ToralAutomorphism& A = *pa;
    const auto& sd = A.spectral();
    const double alpha = 0.05, Lambda = 1.2;
    const auto rep = check_cone_invariance(DeformedMap(A), make_cones(sd, alpha), Lambda);
    EXPECT_TRUE(rep.pass);
    // Orthonormal eigenframe: unit v in the cone has |Av| >= lambda0 / sqrt(1 + alpha^2).
    EXPECT_GE(rep.expansionMargin, sd.lambda0 / std::sqrt(1 + alpha * alpha) - Lambda - 1e-12);
    EXPECT_LE(rep.expansionMargin, sd.lambda0 - Lambda + 1e-12);
    EXPECT_GT(rep.forwardMargin, 0.0);
    EXPECT_GT(rep.backwardMargin, 0.0);
  }
}

TEST(ConeInvariance, LambdaAboveWeakestExpansionFails) {
  const ToralAutomorphism A(cat());
  const auto rep = check_cone_invariance(DeformedMap(A), make_cones(A.spectral(), 0.05), A.spectral().lambda0 + 0.1);
  EXPECT_FALSE(rep.pass);
  EXPECT_LT(rep.expansionMargin, 0.0);
  EXPECT_EQ(rep.witnessKind, "expansion");
}

TEST(ConeInvariance, BvMapPasses) {
  const auto& b = bv();
  const auto rep = check_cone_invariance(b.map, make_cones(bv_base().spectral(), b.ledger.alpha), b.ledger.Lambda);
  EXPECT_TRUE(rep.pass);
  EXPECT_GT(rep.forwardMargin, 0.0);
  EXPECT_GT(rep.expansionMargin, 0.0);
  EXPECT_GT(rep.backwardMargin, 0.0);
  EXPECT_GT(rep.insideSamples, 0);
  // Inside the conjugation patches both cone fields stay invariant as well.
  EXPECT_GE(rep.insideForwardMargin, 0.0);
  EXPECT_GE(rep.insideBackwardMargin, 0.0);
}

TEST(ConeInvariance, MonotoneInAperture) {
  const auto& b = bv();
  const double alpha = b.ledger.alpha;
  const auto wide = check_cone_invariance(b.map, make_cones(bv_base().spectral(), alpha), b.ledger.Lambda);
  const auto thin = check_cone_invariance(b.map, make_cones(bv_base().spectral(), alpha / 2), b.ledger.Lambda);
  ASSERT_TRUE(wide.pass);
  EXPECT_TRUE(thin.pass);
}

TEST(ConeInvariance, ApertureBoundIsSharpOnBlockTriangularCocycle) {
  // Dg = [[e^{gamma/2} I, K], [0, lambda3 I]] in an orthonormal frame: the stable cone survives Dg^{-1}
  // exactly when alpha < (lambda3 - e^{gamma/2}) / |K|.
  const double gamma = 0.1, lambda3 = 3.4, knorm = 2.0, mu = std::exp(gamma / 2);
  Mat J = Mat::Zero(4, 4);
  J(0, 0) = J(1, 1) = mu;
  J(2, 2) = J(3, 3) = lambda3;
  J(0, 2) = knorm;
  const Mat Jinv = J.inverse();
  const double bound = (lambda3 - mu) / knorm;
  Mat cs = Mat::Zero(4, 2), cu = Mat::Zero(4, 2);
  cs(0, 0) = cs(1, 1) = 1;
  cu(2, 0) = cu(3, 1) = 1;
  for (double fac : {0.99, 1.01}) {
    const double alpha = fac * bound;
    const ConeField stable(cs, cu, alpha);
    // Worst case: u just outside C^s with the cs part aligned with K u_t.
    const double delta = 1e-4;
    Vec u(4);
    u << 1.0, 0.0, alpha * (1 + delta), 0.0;
    const Vec v = J * u;
    if (fac > 1) {
      EXPECT_TRUE(stable.contains(v));
      EXPECT_FALSE(stable.contains(Jinv * v));
    }
    std::mt19937_64 rng(5);
    double worst = 1e9;
    for (int i = 0; i < 20000; ++i) worst = std::min(worst, stable.margin(Jinv * stable.sample(rng, true)));
    if (fac < 1) {
      EXPECT_GE(worst, 0.0);
    }
  }
}

TEST(ConeInvariance, OversizedApertureBreaksBackwardInvarianceOnBvMap) {
  const auto& A = bv_base();
  auto L = choose_parameters(A, 2);
  BvStageConfig cfg;
  cfg.mirrored = false;
  cfg.conjugate = false;
  cfg.enforceAlphaBound = false;
  const auto ref = build_bv_map(A, L, cfg);
  L.alpha = 4 * ref.qSide.blocks.alphaBound;
  const auto b = build_bv_map(A, L, cfg);
  const auto& g = side_group(b.map, false);
  const Vec x = A.apply_inverse(wrap(g.center + g.frame * b.qSide.blocks.worstCrossChart));
  ConeCheckOptions opt;
  opt.samples = 0;
  opt.vectorsPerPoint = 4000;
  opt.extraPoints = {x};
  const auto rep = check_cone_invariance(b.map, make_cones(A.spectral(), L.alpha), L.Lambda, opt);
  EXPECT_EQ(rep.insideSamples, 1);
  EXPECT_LT(rep.insideBackwardMargin, 0.0);
}

// ---------------------------------------------------------------------------
// Respecting the domination
// ---------------------------------------------------------------------------

TEST(Domination, LinearRatiosAlongEigenvectors) {
  for (const ToralAutomorphism* pa : {&cat_map(), &bv_base()}) {
    const ToralAutomorphism& A = *pa;
    const auto& sd = A.spectral();
    const DeformedMap g(A);
    const int d = A.dim();
    // Eigenvector of the weakest expansion and of the weakest contraction.
    Vec vu = sd.vectors.col(sd.stableIndex), vs = sd.vectors.col(sd.stableIndex - 1);
    Vec x = Vec::Constant(d, 0.31);
    const auto smp = domination_sample(g, x, 1e-3 * vu, 1e-3 * vs);
    EXPECT_NEAR(smp.ratioUnstable, sd.lambda0, 1e-9);
    EXPECT_NEAR(smp.ratioStable, sd.mu0, 1e-9);
  }
}

TEST(Domination, LinearMapPasses) {
  const ToralAutomorphism A(cat());
  const auto L = choose_parameters(A, 1);
  const auto rep = check_respects_domination(DeformedMap(A), make_cones(A.spectral(), L.alpha), L.rho, L.Lambda);
  EXPECT_TRUE(rep.pass);
  EXPECT_GT(rep.samples, 100);
  EXPECT_GT(rep.minRatioQuotient, L.Lambda);
  EXPECT_LE(rep.minRatioQuotient, A.spectral().lambda0 / A.spectral().mu0 + 1e-9);
}

TEST(Domination, BvMapPassesWithLedgerLambda) {
  const auto& b = bv();
  EXPECT_GT(b.ledger.Lambda, b.ledger.threshold());
  const auto rep =
      check_respects_domination(b.map, make_cones(bv_base().spectral(), b.ledger.alpha), b.ledger.rho, b.ledger.Lambda);
  EXPECT_TRUE(rep.pass);
  EXPECT_GT(rep.minRatioMargin, 0.0);
  // Inside the conjugation patch the quotient still exceeds ((lambda3 - eta)/e^gamma).
  EXPECT_GT(rep.patchSamples, 0);
  const double ledgerRate = (bv_base().spectral().lambda0 - b.ledger.etaSpectral) * std::exp(-b.ledger.gamma);
  EXPECT_GT(rep.patchMinQuotient, ledgerRate);
}

// ---------------------------------------------------------------------------
// Dominated splitting
// ---------------------------------------------------------------------------

TEST(Splitting, LinearMapRecoversEigenspaces) {
  for (const ToralAutomorphism* pa : {&cat_map(), &bv_base()}) {
    const ToralAutomorphism& A = *pa;
    const auto& sd = A.spectral();
    const auto sp = estimate_dominated_splitting(DeformedMap(A), Vec::Constant(A.dim(), 0.123));
    EXPECT_LT(grassmann_distance(sp.centerUnstable, sd.unstable_frame()), 1e-10);
    EXPECT_LT(grassmann_distance(sp.centerStable, sd.stable_frame()), 1e-10);
    const int expected = static_cast<int>(std::ceil(std::log(2.0) / std::log(sd.lambda0 / sd.mu0)));
    EXPECT_EQ(sp.dominationExponent, expected);
  }
}

TEST(Splitting, BvMapFarFromSupportsIsLinear) {
  const auto& b = bv();
  Vec x(4);
  x << 0.61, 0.17, 0.43, 0.89;
  const auto sp = estimate_dominated_splitting(b.map, x);
  const auto& sd = bv_base().spectral();
  EXPECT_LT(grassmann_distance(sp.centerUnstable, sd.unstable_frame()), 1e-6);
  EXPECT_LT(grassmann_distance(sp.centerStable, sd.stable_frame()), 1e-6);
}

TEST(Splitting, BvMapTwoByTwoWithExponent) {
  const auto& b = bv();
  for (const Vec& x : {b.q, b.p, b.qSide.fixedMinus}) {
    const auto sp = estimate_dominated_splitting(b.map, x);
    EXPECT_EQ(sp.centerStable.cols(), 2);
    EXPECT_EQ(sp.centerUnstable.cols(), 2);
    EXPECT_GE(sp.dominationExponent, 1);
    EXPECT_LE(sp.dominationExponent, 64);
    EXPECT_LT(sp.convergence, 1e-8);
  }
}

TEST(Splitting, Equivariance) {
  const auto& b = bv();
  std::mt19937_64 rng(61);
  for (int i = 0; i < 10; ++i) {
    const Vec x = sample_point(b.map, rng, i, true);
    const auto sx = estimate_dominated_splitting(b.map, x);
    const auto sgx = estimate_dominated_splitting(b.map, b.map.eval(x));
    const Mat J = b.map.differential(x);
    EXPECT_LT(grassmann_distance(J * sx.centerUnstable, sgx.centerUnstable), 1e-6);
    EXPECT_LT(grassmann_distance(J * sx.centerStable, sgx.centerStable), 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Near hyperbolicity
// ---------------------------------------------------------------------------

TEST(NearHyperbolic, LinearMapWithZeroGamma) {
  const ToralAutomorphism A(bv_base());
  NearHyperbolicityOptions opt;
  opt.samples = 20;
  const auto rep = check_gamma_near_hyperbolic(DeformedMap(A), 0.0, 1.0, opt);
  EXPECT_TRUE(rep.pass);
  EXPECT_NEAR(rep.maxStableGrowthRate, std::log(A.spectral().mu0), 1e-9);
  EXPECT_NEAR(rep.minUnstableGrowthRate, std::log(A.spectral().lambda0), 1e-9);
}

TEST(NearHyperbolic, BvMapPassesWithLedgerGamma) {
  const auto& b = bv();
  NearHyperbolicityOptions opt;
  opt.extraPoints = {b.q, b.p, b.s, b.qSide.fixedPlus, b.qSide.fixedMinus, b.pSide.fixedPlus, b.pSide.fixedMinus};
  const auto rep = check_gamma_near_hyperbolic(b.map, b.ledger.gamma, 2.0, opt);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.orbits, 7 + opt.samples);
}

TEST(NearHyperbolic, ZeroGammaFailsAtPitchforkPoint) {
  const auto& b = bv();
  NearHyperbolicityOptions opt;
  opt.samples = 0;
  opt.extraPoints = {b.q};
  const auto rep = check_gamma_near_hyperbolic(b.map, 0.0, 1.0, opt);
  EXPECT_FALSE(rep.pass);
  ASSERT_TRUE(rep.witness.has_value());
  EXPECT_LT(torus_distance(*rep.witness, b.q), 1e-12);
  // E^cs at q carries the eigenvalue e^{gamma/4}, so growth is at least gamma/4.
  EXPECT_GE(rep.maxStableGrowthRate, b.ledger.gamma / 4 - 1e-6);
}
