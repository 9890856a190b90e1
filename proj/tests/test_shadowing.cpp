#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "forge/bv_builder.hpp"
#include "forge/shadowing.hpp"

using namespace forge;

namespace {

const ToralAutomorphism& cat_map() {
  static const ToralAutomorphism A([] {
    IMat a(2, 2);
    a << 2, 1, 1, 1;
    return a;
  }());
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

const SemiConjugacy& bv_pi() {
  static const SemiConjugacy sc = solve_semiconjugacy(bv().map);
  return sc;
}

DeformedMap translated(const ToralAutomorphism& A, const Vec& c) {
  DeformedMap g(A);
  g.set_shift(c);
  return g;
}

Vec random_point(std::mt19937_64& rng, int d) {
  std::uniform_real_distribution<double> U(0, 1);
  Vec x(d);
  for (int i = 0; i < d; ++i) x[i] = U(rng);
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// Constants
// ---------------------------------------------------------------------------

TEST(ShadowingConstant, SymmetricBaseSumsGeometricSeries) {
  for (const auto* A : {&cat_map(), &bv_base()}) {
    const auto& sd = A->spectral();
    // Orthonormal eigenvectors: the series is 1/(lambda0 - 1) + 1/(1 - mu0).
    EXPECT_NEAR(shadowing_constant(*A), 1 / (sd.lambda0 - 1) + 1 / (1 - sd.mu0), 1e-12);
  }
}

TEST(ShadowingConstant, LedgerConstantDominatesSeries) {
  const auto L = choose_parameters(bv_base(), 2);
  EXPECT_LE(shadowing_constant(bv_base()), L.K0);
}

TEST(C0Distance, TranslationIsForwardPlusInverseOffset) {
  Vec c(2);
  c << 0.003, -0.002;
  const auto g = translated(cat_map(), c);
  const double expected = c.norm() + (cat_map().inverse_d() * c).norm();
  EXPECT_NEAR(c0_distance(DeformedMap(cat_map()), g), expected, 1e-14);
}

TEST(C0Distance, ZeroForIdenticalMaps) {
  EXPECT_EQ(c0_distance(DeformedMap(bv_base()), DeformedMap(bv_base())), 0.0);
}

// ---------------------------------------------------------------------------
// Semiconjugacy
// ---------------------------------------------------------------------------

TEST(SemiConjugacy, LinearMapGivesExactIdentity) {
  for (const auto* A : {&cat_map(), &bv_base()}) {
    for (int res : {4, 9}) {
      ShadowOptions opt;
      opt.resolution = res;
      const auto sc = solve_semiconjugacy(DeformedMap(*A), opt);
      EXPECT_TRUE(sc.identity());
      EXPECT_EQ(sc.defect(), 0.0);
      EXPECT_EQ(sc.sup_displacement(), 0.0);
      std::mt19937_64 rng(3);
      for (int i = 0; i < 200; ++i) {
        const Vec x = random_point(rng, A->dim());
        EXPECT_EQ(sc.pi(x), x);
        EXPECT_EQ(sc.equivariance_error(x), 0.0);
      }
    }
  }
}

TEST(SemiConjugacy, TranslationMatchesDirectLinearSolve) {
  for (const auto* A : {&cat_map(), &bv_base()}) {
    const int d = A->dim();
    Vec c(d);
    for (int i = 0; i < d; ++i) c[i] = 0.001 * (i + 1) * (i % 2 == 0 ? 1 : -1);
    ShadowOptions opt;
    opt.tol = 1e-12;
    opt.resolution = d == 2 ? 16 : 4;
    const auto sc = solve_semiconjugacy(translated(*A, c), opt);
    // (A - I) u = c
    const Vec exact = (A->matrix_d() - Mat::Identity(d, d)).fullPivLu().solve(c);
    for (std::size_t n = 0; n < sc.field().size() / static_cast<std::size_t>(d); ++n)
      EXPECT_LT((sc.node(n) - exact).norm(), 1e-10);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 100; ++i) EXPECT_LT((sc.displacement(random_point(rng, d)) - exact).norm(), 1e-10);
    EXPECT_LT(sc.defect(), 1e-10);
  }
}

TEST(SemiConjugacy, SupBoundedByConstantTimesC0) {
  Vec c(2);
  c << 0.004, 0.001;
  const auto sc = solve_semiconjugacy(translated(cat_map(), c));
  EXPECT_LE(sc.sup_displacement(), sc.constant() * sc.c0());
  const auto& b = bv_pi();
  EXPECT_GT(b.sup_displacement(), 0.0);
  EXPECT_LE(b.sup_displacement(), b.constant() * b.c0());
}

TEST(SemiConjugacy, BvDefectBelowTolerance) {
  const auto& sc = bv_pi();
  EXPECT_LT(sc.defect(), 1e-3);
  EXPECT_LT(sc.c0(), bv().ledger.eps0);
}

TEST(SemiConjugacy, BvEquivariantAtOffGridPoints) {
  const auto& sc = bv_pi();
  std::mt19937_64 rng(71);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const Vec x = i % 4 == 0 ? sample_point(bv().map, rng, i, true) : random_point(rng, 4);
    worst = std::max(worst, sc.equivariance_error(x));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(SemiConjugacy, WindingAlongEachCycleIsOne) {
  Vec c(2);
  c << 0.002, 0.003;
  EXPECT_EQ(winding_matrix(solve_semiconjugacy(translated(cat_map(), c))), IMat::Identity(2, 2));
  EXPECT_EQ(winding_matrix(bv_pi(), 64, bv().q), IMat::Identity(4, 4));
}

TEST(SemiConjugacy, DefectNonincreasingInTruncationLength) {
  Vec c(2);
  c << 0.004, -0.003;
  const auto g = translated(cat_map(), c);
  double prev = std::numeric_limits<double>::infinity();
  for (int terms : {1, 2, 4, 8, 16, 32}) {
    ShadowOptions opt;
    opt.fixedTerms = terms;
    opt.refineSteps = 0;
    opt.resolution = 8;
    const double defect = solve_semiconjugacy(g, opt).defect();
    EXPECT_LE(defect, prev + 1e-15) << "terms " << terms;
    prev = defect;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(SemiConjugacy, TooFewTermsNotConverged) {
  Vec c(2);
  c << 0.004, -0.003;
  ShadowOptions opt;
  opt.tol = 1e-14;
  opt.maxTerms = 3;
  try {
    (void)solve_semiconjugacy(translated(cat_map(), c), opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotConverged);
  }
}

TEST(SemiConjugacy, LargeDisplacementDiverges) {
  Vec c(2);
  c << 0.4, 0.1;  // u = (A - I)^{-1} c has norm above the injectivity scale
  try {
    (void)solve_semiconjugacy(translated(cat_map(), c));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShadowingDiverged);
  }
}

TEST(SemiConjugacy, ThreadCountDoesNotChangeField) {
  ShadowOptions one, two;
  one.resolution = two.resolution = 6;
  two.threads = 3;
  const auto a = solve_semiconjugacy(bv().map, one);
  const auto b = solve_semiconjugacy(bv().map, two);
  EXPECT_EQ(a.field(), b.field());
  EXPECT_EQ(a.defect(), b.defect());
}

// ---------------------------------------------------------------------------
// Grid file
// ---------------------------------------------------------------------------

TEST(DisplacementGrid, RoundTripAndHeader) {
  const auto& sc = bv_pi();
  const auto path = (std::filesystem::temp_directory_path() / "forge_grid_test.bin").string();
  save_displacement_grid(sc, path);
  const auto n = static_cast<std::uintmax_t>(sc.field().size());
  EXPECT_EQ(std::filesystem::file_size(path), 8 + 4 * 4 + 8 * n);
  std::ifstream is(path, std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "FORGEGRD");
  unsigned char hdr[16];
  is.read(reinterpret_cast<char*>(hdr), 16);
  EXPECT_EQ(hdr[0], 1);   // version
  EXPECT_EQ(hdr[4], 4);   // dim
  EXPECT_EQ(hdr[8], static_cast<unsigned char>(sc.resolution()));
  EXPECT_EQ(hdr[12], 4);  // components
  const auto back = load_displacement_grid(path, bv().map);
  EXPECT_EQ(back.field(), sc.field());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Vec x = random_point(rng, 4);
    EXPECT_EQ(back.pi(x), sc.pi(x));
  }
  std::filesystem::remove(path);
}

TEST(DisplacementGrid, RejectsForeignFiles) {
  const auto path = (std::filesystem::temp_directory_path() / "forge_grid_bad.bin").string();
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTAGRID0000000000000000";
  }
  EXPECT_THROW((void)load_displacement_grid(path, bv().map), Error);
  std::filesystem::remove(path);
  EXPECT_THROW((void)load_displacement_grid(path, bv().map), Error);
}

// ---------------------------------------------------------------------------
// Fibers
// ---------------------------------------------------------------------------

TEST(FiberProbe, LinearMapFiberIsThePoint) {
  const auto sc = solve_semiconjugacy(DeformedMap(bv_base()));
  Vec x(4);
  x << 0.3, 0.6, 0.1, 0.8;
  const auto fp = fiber_probe(sc, x);
  ASSERT_EQ(fp.preimages.size(), 1u);
  EXPECT_EQ(fp.preimages[0], x);
  EXPECT_EQ(fp.diameter, 0.0);
}

TEST(FiberProbe, TranslationFiberIsShiftedPoint) {
  Vec c(2);
  c << 0.003, 0.001;
  ShadowOptions opt;
  opt.tol = 1e-12;
  const auto sc = solve_semiconjugacy(translated(cat_map(), c), opt);
  Vec x(2);
  x << 0.4, 0.7;
  const auto fp = fiber_probe(sc, x);
  const Vec u = (cat_map().matrix_d() - Mat::Identity(2, 2)).inverse() * c;
  ASSERT_FALSE(fp.preimages.empty());
  for (const auto& y : fp.preimages) EXPECT_LT(torus_distance(y, wrap(x - u)), 1e-9);
  EXPECT_LT(fp.diameter, 1e-8);
}

TEST(FiberProbe, FarFromSupportsIsSingleton) {
  Vec x(4);
  x << 0.61, 0.17, 0.43, 0.89;
  ASSERT_GT(bv().map.distance_to_supports(x), 0.1);
  const auto fp = fiber_probe(bv_pi(), x);
  ASSERT_FALSE(fp.preimages.empty());
  EXPECT_LT(fp.diameter, 1e-8);
  for (const auto& y : fp.preimages) EXPECT_LT(min_disp(x, bv_pi().pi(y, 16)).norm(), 1e-9);
}

TEST(FiberProbe, PitchforkFiberIsNontrivialButBounded) {
  const auto& sc = bv_pi();
  const auto& b = bv();
  // pi collapses q and the two fixed points born at the pitchfork.
  EXPECT_LT(torus_distance(sc.pi(b.qSide.fixedPlus, 16), b.q), 1e-9);
  EXPECT_LT(torus_distance(sc.pi(b.qSide.fixedMinus, 16), b.q), 1e-9);
  const auto fp = fiber_probe(sc, b.q);
  EXPECT_GT(fp.preimages.size(), 2u);
  EXPECT_GT(fp.diameter, 1e-6);
  EXPECT_LE(fp.diameter, sc.constant() * sc.c0());
  EXPECT_LT(fp.maxResidual, 1e-9);
}

// ---------------------------------------------------------------------------
// Almost expansivity
// ---------------------------------------------------------------------------

TEST(AlmostExpansivity, LinearRateMatchesWeakestExpansion) {
  const auto& A = cat_map();
  const auto rep = check_almost_expansivity(DeformedMap(A), 0.05, 100, 60);
  const double expected = std::log(A.spectral().lambda1);
  EXPECT_EQ(rep.nonSeparating, 0);
  EXPECT_GE(rep.minRate, expected * 0.9);
  for (const auto& p : rep.pairs) EXPECT_NEAR(p.rate, expected, 0.1 * expected);
}

TEST(AlmostExpansivity, IdenticalPairNeverSeparates) {
  AlmostExpansivityOptions opt;
  Vec x(4);
  x << 0.2, 0.4, 0.6, 0.8;
  opt.extraPairs = {{x, x}};
  const auto rep = check_almost_expansivity(bv().map, 0.03, 0, 40, opt);
  ASSERT_EQ(rep.pairs.size(), 1u);
  EXPECT_EQ(rep.pairs[0].exitTime, -1);
  EXPECT_EQ(rep.nonSeparating, 1);
  EXPECT_EQ(rep.maxNonSeparatingDistance, 0.0);
}

TEST(AlmostExpansivity, BvPairsSeparateAtBirkhoffRate) {
  const auto& L = bv().ledger;
  AlmostExpansivityOptions opt;
  opt.offSupportMargin = L.eps;
  const auto rep = check_almost_expansivity(bv().map, L.K0 * L.eps, 200, 60, opt);
  const double threshold = (1 - L.etaMass) * std::log(L.Lambda) - L.etaMass * L.gamma - 0.05;
  EXPECT_GT(threshold, 0.0);
  EXPECT_GE(rep.fraction_at_least(threshold), 0.95);
  EXPECT_EQ(rep.nonSeparating, 0);
}
