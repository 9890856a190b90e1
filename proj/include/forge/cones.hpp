#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "forge/deformation.hpp"

namespace forge {

/// Constant cone {v1 + v2 : |v2| <= aperture |v1|}, v1 in span(primary), v2 in span(complement).
class ConeField {
 public:
  ConeField() = default;
  ConeField(Mat primary, Mat complement, double aperture)
      : primary_(std::move(primary)), complement_(std::move(complement)), aperture_(aperture) {
    const int d = static_cast<int>(primary_.rows());
    if (complement_.rows() != d || primary_.cols() + complement_.cols() != d)
      throw Error(Errc::DimensionMismatch, "cone bases do not span the space");
    if (!(aperture_ > 0)) throw Error(Errc::InvalidConfig, "cone aperture must be positive");
    Mat basis(d, d);
    basis << primary_, complement_;
    basisInv_ = basis.inverse();
  }

  [[nodiscard]] const Mat& primary() const { return primary_; }
  [[nodiscard]] const Mat& complement() const { return complement_; }
  [[nodiscard]] double aperture() const { return aperture_; }
  [[nodiscard]] int dim() const { return static_cast<int>(primary_.rows()); }

  /// Components (v1, v2) of v in the splitting.
  void split(const Vec& v, Vec& v1, Vec& v2) const {
    const Vec c = basisInv_ * v;
    const int k = static_cast<int>(primary_.cols());
    v1 = primary_ * c.head(k);
    v2 = complement_ * c.tail(dim() - k);
  }

  /// (aperture |v1| - |v2|) / |v|: nonnegative exactly on the cone.
  [[nodiscard]] double margin(const Vec& v) const {
    const double n = v.norm();
    if (n == 0.0) throw Error(Errc::ZeroVector, "cone membership of the zero vector");
    Vec v1, v2;
    split(v, v1, v2);
    return (aperture_ * v1.norm() - v2.norm()) / n;
  }

  [[nodiscard]] bool contains(const Vec& v) const {
    const double n = v.norm();
    if (n == 0.0) throw Error(Errc::ZeroVector, "cone membership of the zero vector");
    Vec v1, v2;
    split(v, v1, v2);
    return v2.norm() <= aperture_ * v1.norm();
  }

  /// Random unit vector in the cone; `boundary` puts it on the edge |v2| = aperture |v1|.
  template <class Rng>
  [[nodiscard]] Vec sample(Rng& rng, bool boundary) const {
    std::normal_distribution<double> N(0, 1);
    std::uniform_real_distribution<double> U(0, 1);
    const int k = static_cast<int>(primary_.cols()), m = dim() - k;
    Vec a(k), b(m);
    for (int i = 0; i < k; ++i) a[i] = N(rng);
    for (int i = 0; i < m; ++i) b[i] = N(rng);
    Vec v1 = primary_ * a, v2 = complement_ * b;
    v1.normalize();
    if (v2.norm() > 0) v2.normalize();
    const double t = boundary ? 1.0 : U(rng);
    Vec v = v1 + aperture_ * t * v2;
    return v / v.norm();
  }

 private:
  Mat primary_, complement_, basisInv_;
  double aperture_ = 1.0;
};

inline bool cone_contains(const ConeField& c, const Vec& v) { return c.contains(v); }

struct ConePair {
  ConeField unstable;  // C^u_alpha around E^u
  ConeField stable;    // C^s_alpha around E^s
};

inline ConePair make_cones(const SpectralData& sd, double alpha) {
  return {ConeField(sd.unstable_frame(), sd.stable_frame(), alpha),
          ConeField(sd.stable_frame(), sd.unstable_frame(), alpha)};
}

// ---------------------------------------------------------------------------
// Sampling helpers
// ---------------------------------------------------------------------------

/// Uniform torus points alternating with points inside the support balls.
template <class Rng>
Vec sample_point(const DeformedMap& g, Rng& rng, int index, bool nearSupports) {
  const int d = g.dim();
  std::uniform_real_distribution<double> U(0, 1);
  std::normal_distribution<double> N(0, 1);
  const auto groups = g.groups();
  Vec x(d);
  if (!nearSupports || groups.empty()) {
    for (int i = 0; i < d; ++i) x[i] = U(rng);
    return x;
  }
  const auto* gr = groups[static_cast<std::size_t>(index) % groups.size()];
  // Uniform in the group's chart polydisk (conjugated), where the map actually differs from A.
  Vec z(d);
  const auto& st = gr->stages[static_cast<std::size_t>(index / 2) % gr->stages.size()];
  for (int i = 0; i < d; ++i) z[i] = N(rng);
  Vec u = z.head(2), w = z.tail(d - 2);
  u *= std::sqrt(U(rng)) * st.plane.outer / u.norm();
  w *= std::pow(U(rng), 1.0 / (d - 2)) * st.transverse.outer / w.norm();
  Vec y(d);
  y << u + st.offset.head(2), w + st.offset.tail(d - 2);
  const Vec chart = y.cwiseProduct(gr->scaling);
  const Vec pt = wrap(gr->center + gr->frame * chart);
  // Post groups act after the base; pull back so the sample hits the support.
  for (const auto& p : g.post())
    if (&p == gr) return g.base().apply_inverse(pt);
  return pt;
}

// ---------------------------------------------------------------------------
// Cone invariance
// ---------------------------------------------------------------------------

struct ConeInvarianceReport {
  int samples = 0;
  int insideSamples = 0;
  double forwardMargin = std::numeric_limits<double>::infinity();   // min cone margin of Dg v
  double expansionMargin = std::numeric_limits<double>::infinity(); // min |Dg v| - Lambda
  double backwardMargin = std::numeric_limits<double>::infinity();  // min cone margin of Dg^{-1} v
  // Same quantities over samples inside the supports (diagnostic).
  double insideForwardMargin = std::numeric_limits<double>::infinity();
  double insideExpansionMargin = std::numeric_limits<double>::infinity();
  double insideBackwardMargin = std::numeric_limits<double>::infinity();
  std::optional<Vec> witnessPoint;
  std::optional<Vec> witnessVector;
  std::string witnessKind;
  std::optional<Vec> insideWitnessPoint;  // worst cone margin inside the supports
  std::string insideWitnessKind;
  bool pass = false;
  bool passInside = false;
};

struct ConeCheckOptions {
  int samples = 4000;
  int vectorsPerPoint = 8;
  bool includeSupports = true;
  unsigned seed = 101;
  std::vector<Vec> extraPoints;  // always checked, classified like the random samples
};

/// For x off the supports: Dg_x C^u in C^u with |Dg v| >= Lambda, and Dg^{-1} C^s in C^s at g(x).
inline ConeInvarianceReport check_cone_invariance(const DeformedMap& g, const ConePair& cones, double Lambda,
                                                  const ConeCheckOptions& opt = {}) {
  ConeInvarianceReport rep;
  std::mt19937_64 rng(opt.seed);
  double worst = std::numeric_limits<double>::infinity(), worstInside = worst;
  auto probe = [&](const Vec& x, bool inside) {
    Mat J;
    const Vec gx = g.eval(x, &J);
    const Mat Jinv = g.differential_inverse(gx);
    auto& fwd = inside ? rep.insideForwardMargin : rep.forwardMargin;
    auto& exp = inside ? rep.insideExpansionMargin : rep.expansionMargin;
    auto& bwd = inside ? rep.insideBackwardMargin : rep.backwardMargin;
    for (int k = 0; k < opt.vectorsPerPoint; ++k) {
      const bool edge = (k % 2 == 0);
      const Vec v = cones.unstable.sample(rng, edge);
      const Vec w = J * v;
      const double m1 = cones.unstable.margin(w), m2 = w.norm() - Lambda;
      const Vec s = cones.stable.sample(rng, edge);
      const double m3 = cones.stable.margin(Jinv * s);
      fwd = std::min(fwd, m1);
      exp = std::min(exp, m2);
      bwd = std::min(bwd, m3);
      if (inside) {
        const double m = std::min(m1, m3);
        if (m < worstInside) {
          worstInside = m;
          rep.insideWitnessPoint = x;
          rep.insideWitnessKind = (m == m1) ? "forward cone" : "backward cone";
        }
      } else {
        const double m = std::min({m1, m2, m3});
        if (m < worst) {
          worst = m;
          rep.witnessPoint = x;
          rep.witnessVector = (m == m3) ? s : v;
          rep.witnessKind = (m == m1) ? "forward cone" : (m == m2) ? "expansion" : "backward cone";
        }
      }
    }
  };
  auto take = [&](const Vec& x) {
    const bool inside = g.distance_to_supports(x) <= 0 || g.distance_to_supports(g.eval(x)) <= 0;
    if (inside && !opt.includeSupports) return;
    probe(x, inside);
    ++(inside ? rep.insideSamples : rep.samples);
  };
  for (const auto& x : opt.extraPoints) take(x);
  for (int s = 0; s < opt.samples; ++s) take(sample_point(g, rng, s / 2, opt.includeSupports && (s % 2 == 1)));
  rep.pass = rep.forwardMargin >= 0 && rep.expansionMargin > 0 && rep.backwardMargin >= 0;
  rep.passInside = rep.insideSamples == 0 ||
                   (rep.insideForwardMargin >= 0 && rep.insideExpansionMargin > 0 && rep.insideBackwardMargin >= 0);
  if (rep.pass) {
    rep.witnessPoint.reset();
    rep.witnessVector.reset();
    rep.witnessKind.clear();
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Respecting the domination (lift-chart differences)
// ---------------------------------------------------------------------------

/// Small displacement p(x) = g(x) - A x in the lift.
inline Vec lift_displacement(const DeformedMap& g, const Vec& x) {
  return min_disp(wrap(g.base().matrix_d() * x + g.shift()), g.eval(x));
}
inline Vec lift_displacement_inverse(const DeformedMap& g, const Vec& x) {
  return min_disp(wrap(g.base().inverse_d() * (x - g.shift())), g.eval_inverse(x));
}

/// G(x + dy) - G(x) for the lift G = A + p.
inline Vec lift_difference(const DeformedMap& g, const Vec& x, const Vec& dy) {
  return g.base().matrix_d() * dy + lift_displacement(g, wrap(x + dy)) - lift_displacement(g, x);
}
inline Vec lift_difference_inverse(const DeformedMap& g, const Vec& y, const Vec& dw) {
  return g.base().inverse_d() * dw + lift_displacement_inverse(g, wrap(y + dw)) - lift_displacement_inverse(g, y);
}

struct DominationSample {
  double ratioUnstable = 0;  // |G y - G x| / |y - x|
  double ratioStable = 0;    // |G z - G x| / |z - x|
  Vec imageUnstable;         // G y - G x
  Vec preimageStable;        // z - x
};

/// One sample: y = x + dy, z = G^{-1}(G x + dw).
inline DominationSample domination_sample(const DeformedMap& g, const Vec& x, const Vec& dy, const Vec& dw) {
  DominationSample s;
  s.imageUnstable = lift_difference(g, x, dy);
  s.preimageStable = lift_difference_inverse(g, g.eval(x), dw);
  s.ratioUnstable = s.imageUnstable.norm() / dy.norm();
  s.ratioStable = dw.norm() / s.preimageStable.norm();
  return s;
}

struct DominationReport {
  int samples = 0;
  double minRatioMargin = std::numeric_limits<double>::infinity();  // min ratio_u / (Lambda ratio_s) - 1
  double minRatioQuotient = std::numeric_limits<double>::infinity();  // min ratio_u / ratio_s
  double unstableConeMargin = std::numeric_limits<double>::infinity();
  double stableConeMargin = std::numeric_limits<double>::infinity();
  int patchSamples = 0;
  double patchMinQuotient = std::numeric_limits<double>::infinity();
  bool pass = false;
};

/// For x, y in B(x, rho) with y - x in C^u and G z - G x in C^s: the expansion ratio along y beats
/// Lambda times the one along z, G y - G x stays in C^u, and z - x lies in C^s.
inline DominationReport check_respects_domination(const DeformedMap& g, const ConePair& cones, double rho,
                                                  double Lambda, int sampleCount = 2000, unsigned seed = 211) {
  DominationReport rep;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0, 1);
  const double lo = std::log(1e-7 * rho), hi = std::log(rho);
  const double contractBound = op_norm(g.base().inverse_d());
  const auto groups = g.groups();
  int s = 0, attempts = 0;
  while (s < sampleCount && attempts < 20 * sampleCount) {
    ++attempts;
    const bool near = (s % 2 == 1);
    const Vec x = sample_point(g, rng, s / 2, near);
    const Vec v = cones.unstable.sample(rng, s % 4 < 2);
    const Vec w = cones.stable.sample(rng, s % 4 < 2);
    const double t = std::exp(lo + (hi - lo) * U(rng));
    // Keep z within B(x, rho): |z - x| is at most about |A^{-1}| |dw|.
    const double tw = std::exp(lo + (std::log(rho / (2 * contractBound)) - lo) * U(rng));
    const Vec dy = t * v, dw = tw * w;
    const auto smp = domination_sample(g, x, dy, dw);
    if (smp.preimageStable.norm() == 0 || smp.preimageStable.norm() >= rho) continue;
    ++s;
    const double q = smp.ratioUnstable / smp.ratioStable;
    rep.minRatioQuotient = std::min(rep.minRatioQuotient, q);
    rep.minRatioMargin = std::min(rep.minRatioMargin, q / Lambda - 1);
    rep.unstableConeMargin = std::min(rep.unstableConeMargin, cones.unstable.margin(smp.imageUnstable));
    rep.stableConeMargin = std::min(rep.stableConeMargin, cones.stable.margin(smp.preimageStable));
    bool inPatch = false;
    for (const auto* gr : groups)
      if (torus_distance(x, gr->center) < gr->support_radius() * 4) inPatch = true;
    if (inPatch) {
      ++rep.patchSamples;
      rep.patchMinQuotient = std::min(rep.patchMinQuotient, q);
    }
  }
  rep.samples = s;
  rep.pass = rep.samples > 0 && rep.minRatioMargin > 0 && rep.unstableConeMargin >= 0 && rep.stableConeMargin >= 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Dominated splitting
// ---------------------------------------------------------------------------

/// Largest principal-angle sine between two subspaces (orthonormalized internally).
inline double grassmann_distance(const Mat& a, const Mat& b) {
  Eigen::HouseholderQR<Mat> qa(a), qb(b);
  const Mat Qa = qa.householderQ() * Mat::Identity(a.rows(), a.cols());
  const Mat Qb = qb.householderQ() * Mat::Identity(b.rows(), b.cols());
  return op_norm(Qa * Qa.transpose() - Qb * Qb.transpose());
}

inline Mat orthonormalize(const Mat& m) {
  Eigen::HouseholderQR<Mat> qr(m);
  return qr.householderQ() * Mat::Identity(m.rows(), m.cols());
}

struct Splitting {
  Mat centerStable;    // orthonormal basis of E^cs(x)
  Mat centerUnstable;  // orthonormal basis of E^cu(x)
  int dominationExponent = 0;
  double convergence = 0;  // Grassmann distance between the last two refinements
};

/// Orbit x_{-back}, ..., x_{fwd} with the Jacobians Dg(x_k).
struct OrbitCocycle {
  std::vector<Vec> points;  // points[k + back] = x_k
  std::vector<Mat> jac;     // jac[k + back] = Dg(x_k)
  int back = 0, fwd = 0;
  [[nodiscard]] const Vec& at(int k) const { return points[static_cast<std::size_t>(k + back)]; }
  [[nodiscard]] const Mat& J(int k) const { return jac[static_cast<std::size_t>(k + back)]; }
};

inline OrbitCocycle orbit_cocycle(const DeformedMap& g, const Vec& x, int back, int fwd) {
  OrbitCocycle oc;
  oc.back = back;
  oc.fwd = fwd;
  std::vector<Vec> bwd{x};
  for (int k = 1; k <= back; ++k) bwd.push_back(g.eval_inverse(bwd.back()));
  for (int k = back; k >= 1; --k) oc.points.push_back(bwd[static_cast<std::size_t>(k)]);
  oc.points.push_back(x);
  Vec y = x;
  for (int k = 1; k <= fwd; ++k) {
    y = g.eval(y);
    oc.points.push_back(y);
  }
  for (const auto& p : oc.points) oc.jac.push_back(g.differential(p));
  return oc;
}

/// E^cu along the orbit from a forward sweep started at x_{-back} with E^u, and E^cs from a
/// backward sweep started at x_{fwd} with E^s. Returns per-index bases for k in [-back, fwd].
inline void sweep_splitting(const OrbitCocycle& oc, const SpectralData& sd, std::vector<Mat>& cu,
                            std::vector<Mat>& cs) {
  const int n = oc.back + oc.fwd + 1;
  cu.assign(static_cast<std::size_t>(n), Mat());
  cs.assign(static_cast<std::size_t>(n), Mat());
  Mat b = orthonormalize(sd.unstable_frame());
  cu[0] = b;
  for (int i = 1; i < n; ++i) {
    b = orthonormalize(oc.jac[static_cast<std::size_t>(i - 1)] * b);
    cu[static_cast<std::size_t>(i)] = b;
  }
  b = orthonormalize(sd.stable_frame());
  cs[static_cast<std::size_t>(n - 1)] = b;
  for (int i = n - 2; i >= 0; --i) {
    b = orthonormalize(oc.jac[static_cast<std::size_t>(i)].fullPivLu().solve(b));
    cs[static_cast<std::size_t>(i)] = b;
  }
}

/// Oblique projection onto span(cs) along span(cu).
inline Mat projector_along(const Mat& onto, const Mat& along) {
  const int d = static_cast<int>(onto.rows());
  Mat basis(d, d);
  basis << onto, along;
  Mat sel = Mat::Zero(d, d);
  for (int i = 0; i < onto.cols(); ++i) sel(i, i) = 1.0;
  return basis * sel * basis.inverse();
}

/// ||Dg^l |E^cs|| / m(Dg^l |E^cu|) for l = 1..maxL along the forward orbit; smallest l with ratio <= 1/2.
inline int domination_exponent(const OrbitCocycle& oc, const Mat& cs, const Mat& cu, int maxL = 64) {
  Mat a = cs, b = cu;
  for (int l = 1; l <= std::min(maxL, oc.fwd); ++l) {
    a = oc.J(l - 1) * a;
    b = oc.J(l - 1) * b;
    Eigen::JacobiSVD<Mat> sa(a), sb(b);
    const double ratio = sa.singularValues()(0) / sb.singularValues()(sb.singularValues().size() - 1);
    if (ratio <= 0.5) return l;
  }
  return 0;
}

inline Splitting estimate_dominated_splitting(const DeformedMap& g, const Vec& x, int n = 40, int maxL = 64) {
  const auto& sd = g.base().spectral();
  const auto oc = orbit_cocycle(g, x, n, std::max(n, maxL));
  std::vector<Mat> cu, cs;
  sweep_splitting(oc, sd, cu, cs);
  Splitting sp;
  sp.centerUnstable = cu[static_cast<std::size_t>(n)];
  sp.centerStable = cs[static_cast<std::size_t>(n)];
  // Convergence: compare with a sweep started 5 steps later.
  OrbitCocycle shorter = oc;
  shorter.points.erase(shorter.points.begin(), shorter.points.begin() + 5);
  shorter.jac.erase(shorter.jac.begin(), shorter.jac.begin() + 5);
  shorter.back -= 5;
  shorter.points.resize(shorter.points.size() - 5);
  shorter.jac.resize(shorter.jac.size() - 5);
  shorter.fwd -= 5;
  std::vector<Mat> cu2, cs2;
  sweep_splitting(shorter, sd, cu2, cs2);
  sp.convergence = std::max(grassmann_distance(cu2[static_cast<std::size_t>(n - 5)], sp.centerUnstable),
                            grassmann_distance(cs2[static_cast<std::size_t>(n - 5)], sp.centerStable));
  sp.dominationExponent = domination_exponent(oc, sp.centerStable, sp.centerUnstable, maxL);
  if (sp.dominationExponent == 0)
    throw Error(Errc::DominationNotDetected, "no l <= " + std::to_string(maxL) + " with ratio <= 1/2");
  return sp;
}

// ---------------------------------------------------------------------------
// Near hyperbolicity
// ---------------------------------------------------------------------------

struct NearHyperbolicityReport {
  int orbits = 0;
  double worstUnstableSlack = std::numeric_limits<double>::infinity();  // min log(C e^{gamma n} m(Dg^n|cu))
  double worstStableSlack = std::numeric_limits<double>::infinity();    // min log(C e^{gamma n} / |Dg^n|cs|)
  double maxStableGrowthRate = -std::numeric_limits<double>::infinity();  // max (1/n) log |Dg^n|cs|
  double minUnstableGrowthRate = std::numeric_limits<double>::infinity();
  std::optional<Vec> witness;
  int witnessTime = 0;
  bool pass = false;
};

struct NearHyperbolicityOptions {
  int samples = 200;
  int horizon = 50;  // N_max
  int warmup = 40;   // sweep length used to estimate the splitting
  unsigned seed = 307;
  std::vector<Vec> extraPoints;
};

/// Finite-horizon certificate: m(Dg^n|E^cu) >= e^{-gamma n}/C and |Dg^n|E^cs| <= C e^{gamma n}.
/// The bundles are re-projected onto the splitting estimated at every orbit point.
inline NearHyperbolicityReport check_gamma_near_hyperbolic(const DeformedMap& g, double gamma, double C,
                                                           const NearHyperbolicityOptions& opt = {}) {
  NearHyperbolicityReport rep;
  std::mt19937_64 rng(opt.seed);
  const auto& sd = g.base().spectral();
  auto run = [&](const Vec& x) {
    const auto oc = orbit_cocycle(g, x, opt.warmup, opt.horizon + opt.warmup);
    std::vector<Mat> cu, cs;
    sweep_splitting(oc, sd, cu, cs);
    // Restricted cocycles in orthonormal bundle coordinates: Ma = Dg^n|cs, Mbinv = (Dg^n|cu)^{-1}.
    // Both are tracked through their largest singular value, which products keep accurately.
    const int kcs = static_cast<int>(cs[0].cols()), kcu = static_cast<int>(cu[0].cols());
    Mat Ma = Mat::Identity(kcs, kcs), Mbinv = Mat::Identity(kcu, kcu);
    double logA = 0, logB = 0;
    for (int n = 1; n <= opt.horizon; ++n) {
      const auto idx = static_cast<std::size_t>(opt.warmup + n), prev = idx - 1;
      const Mat& J = oc.J(n - 1);
      const Mat Ca = cs[idx].transpose() * (projector_along(cs[idx], cu[idx]) * (J * cs[prev]));
      const Mat Cb = cu[idx].transpose() * (projector_along(cu[idx], cs[idx]) * (J * cu[prev]));
      Ma = Ca * Ma;
      Mbinv = Mbinv * Cb.inverse();
      const double na = op_norm(Ma), nbi = op_norm(Mbinv);
      Ma /= na;
      Mbinv /= nbi;
      logA += std::log(na);
      logB += std::log(nbi);
      const double growA = logA;   // log |Dg^n|cs|
      const double growB = -logB;  // log m(Dg^n|cu)
      const double slackS = std::log(C) + gamma * n - growA;
      const double slackU = std::log(C) + gamma * n + growB;
      rep.maxStableGrowthRate = std::max(rep.maxStableGrowthRate, growA / n);
      rep.minUnstableGrowthRate = std::min(rep.minUnstableGrowthRate, growB / n);
      if (std::min(slackS, slackU) < std::min(rep.worstStableSlack, rep.worstUnstableSlack)) {
        rep.witness = x;
        rep.witnessTime = n;
      }
      rep.worstStableSlack = std::min(rep.worstStableSlack, slackS);
      rep.worstUnstableSlack = std::min(rep.worstUnstableSlack, slackU);
    }
    ++rep.orbits;
  };
  for (const auto& x : opt.extraPoints) run(x);
  for (int s = 0; s < opt.samples; ++s) run(sample_point(g, rng, s / 2, s % 2 == 1));
  rep.pass = rep.worstStableSlack >= 0 && rep.worstUnstableSlack >= 0;
  if (rep.pass) rep.witness.reset();
  return rep;
}

}  // namespace forge
