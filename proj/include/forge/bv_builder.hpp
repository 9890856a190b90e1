#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "forge/deformation.hpp"
#include "forge/parameters.hpp"

namespace forge {

struct TangencyConfig {
  double tau = 0.0;          // plateau radius in unconjugated chart units; 0 means eps / 10
  double rate = 1.0;         // saddle rate of the homoclinic field
  double time = 0.0;         // flow time; 0 means gamma / (2 rate)
  double amplitude = 1.0;    // scales both sub-stage times
  double startFraction = 1e-5;  // first point on each branch, relative to the loop scale
  int maxIterates = 20000;
  double angleTolerance = 1e-3;
};

struct BvStageConfig {
  double amplitude = 1.0;  // scales every flow time; 0 reproduces the linear map
  double saddleRate = 1.0;
  double centerRate = 1.0;
  double planeRadiusFraction = 0.2;       // unconjugated plane radius, in units of eps
  double transverseRadiusFraction = 0.9;  // transverse radius, in units of eps
  double innerFraction = 0.2;             // plane cutoff plateau, relative to its radius
  double transverseInnerFraction = 0.0;   // transverse cutoff plateau
  double crossingExponent = 0.25;  // target e2-eigenvalue at a1 is exp(gamma * crossingExponent)
  double centerRadiusFraction = 0.6;  // rotation support radius in units of the pitchfork offset
  double centerOvershoot = 0.25;      // b1 = b0 + overshoot * (quarter turn - b0)
  bool mirrored = true;
  bool conjugate = true;
  bool enforceAlphaBound = true;
  bool tangency = false;
  TangencyConfig tangencyConfig;
  int blockSamples = 600;
};

// ---------------------------------------------------------------------------
// Chart helpers
// ---------------------------------------------------------------------------

/// Eigenframe for a deformation side. The forward side at a fixed point deforms the contracting
/// plane (strong, weak) with the expanding plane transverse; the inverse side swaps the roles.
inline Mat side_frame(const SpectralData& sd, bool inverseSide) {
  const int d = sd.dim();
  if (d != 4) throw Error(Errc::DimensionMismatch, "the construction needs a 4-torus");
  Mat f(d, d);
  if (!inverseSide) {
    f.col(0) = sd.vectors.col(0);
    f.col(1) = sd.vectors.col(1);
    f.col(2) = sd.vectors.col(2);
    f.col(3) = sd.vectors.col(3);
  } else {
    f.col(0) = sd.vectors.col(3);
    f.col(1) = sd.vectors.col(2);
    f.col(2) = sd.vectors.col(0);
    f.col(3) = sd.vectors.col(1);
  }
  return f;
}

inline StageGroup make_group(std::string label, const Vec& center, const Mat& frame) {
  StageGroup g;
  g.label = std::move(label);
  g.center = center;
  g.frame = frame;
  g.frameInv = frame.inverse();
  g.scaling = Vec::Ones(center.size());
  return g;
}

inline ChartStage make_stage(FieldKind kind, int d, const Vec& offset, double Ru, double Rw, double innerFrac,
                             double transverseInnerFrac, double rate, double time) {
  ChartStage s;
  s.field.kind = kind;
  s.field.rate = rate;
  s.offset = offset.size() ? offset : Vec::Zero(d);
  s.plane = {innerFrac * Ru, Ru};
  s.transverse = {transverseInnerFrac * Rw, Rw};
  s.time = time;
  return s;
}

inline StageGroup& side_group(DeformedMap& m, bool inverseSide) {
  auto& list = inverseSide ? m.pre() : m.post();
  if (list.empty()) throw Error(Errc::InvalidConfig, "map has no group on the requested side");
  return list.back();
}

inline const StageGroup& side_group(const DeformedMap& m, bool inverseSide) {
  const auto& list = inverseSide ? m.pre() : m.post();
  if (list.empty()) throw Error(Errc::InvalidConfig, "map has no group on the requested side");
  return list.back();
}

/// Jacobian of the side's map (f on the forward side, f^{-1} on the inverse side) in chart frame.
inline Mat chart_jacobian(const DeformedMap& m, const Vec& x, const StageGroup& g, bool inverseSide) {
  const Mat j = inverseSide ? m.differential_inverse(x) : m.differential(x);
  return g.frameInv * j * g.frame;
}

inline Vec side_eval(const DeformedMap& m, const Vec& x, bool inverseSide) {
  return inverseSide ? m.eval_inverse(x) : m.eval(x);
}

/// Fixed points of m inside the chart ball, found by Newton from a plane grid of seeds.
inline std::vector<Vec> fixed_points_in_chart(const DeformedMap& m, const StageGroup& g, double radius,
                                              int gridN = 13) {
  std::vector<Vec> found;
  const int d = m.dim();
  for (int i = 0; i < gridN; ++i)
    for (int j = 0; j < gridN; ++j) {
      Vec z = Vec::Zero(d);
      z[0] = radius * (-1.0 + 2.0 * (i + 0.5) / gridN);
      z[1] = radius * (-1.0 + 2.0 * (j + 0.5) / gridN);
      if (z.norm() >= radius) continue;
      const Vec seed = wrap(g.center + g.frame * z);
      const auto r = newton_fixed_point(m, seed, 1, 1e-14, 40);
      if (!r) continue;
      if (torus_distance(*r, g.center) >= radius) continue;
      bool dup = false;
      for (const auto& f : found)
        if (torus_distance(f, *r) < 1e-10 * std::max(1.0, radius)) dup = true;
      if (!dup) found.push_back(*r);
    }
  return found;
}

// ---------------------------------------------------------------------------
// Pitchfork stage
// ---------------------------------------------------------------------------

struct PitchforkResult {
  DeformedMap map;  // f_{A,a1}: the base with the pitchfork group only
  double a0 = 0, a1 = 0;
  double eigenAtA0 = 0;
  double offset = 0;  // |chart coordinate| of the new fixed points along e2
  Vec q1, q2;
};

/// e2-direction eigenvalue of the side map at the group center for flow time a.
inline double pitchfork_e2_eigenvalue(DeformedMap& m, bool inverseSide, double a) {
  auto& g = side_group(m, inverseSide);
  g.stages.front().time = a;
  const Mat j = chart_jacobian(m, g.center, g, inverseSide);
  return j(1, 1);
}

inline PitchforkResult build_pitchfork_stage(const ToralAutomorphism& A, const Vec& q, double eps, double gamma,
                                             const BvStageConfig& cfg = {}, bool inverseSide = false) {
  const int d = A.dim();
  const Mat frame = side_frame(A.spectral(), inverseSide);
  if (torus_distance(A.apply(q), q) > 1e-12) throw Error(Errc::InvalidConfig, "pitchfork center is not fixed");
  const double Ru = cfg.planeRadiusFraction * eps, Rw = cfg.transverseRadiusFraction * eps;
  StageGroup g = make_group(inverseSide ? "p" : "q", q, frame);
  g.stages.push_back(make_stage(FieldKind::Saddle, d, Vec::Zero(d), Ru, Rw, cfg.innerFraction,
                                cfg.transverseInnerFraction, cfg.saddleRate, 0.0));
  PitchforkResult res;
  res.map = DeformedMap(A);
  if (inverseSide)
    res.map.add_pre(g);
  else
    res.map.add_post(g);

  auto lam = [&](double a) { return pitchfork_e2_eigenvalue(res.map, inverseSide, a); };
  auto bisect_to = [&](double target, double tol) {
    double lo = 0, hi = 1.0 / cfg.saddleRate;
    int grow = 0;
    while (lam(hi) < target) {
      lo = hi;
      hi *= 2;
      if (++grow > 30) throw Error(Errc::NoEigenvalueCrossing, "e2 eigenvalue never reaches the target");
    }
    if (lam(lo) > target) throw Error(Errc::NoEigenvalueCrossing, "e2 eigenvalue already above the target at a = 0");
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double v = lam(mid);
      if (std::abs(v - target) < tol) return mid;
      (v < target ? lo : hi) = mid;
      if (hi - lo < 1e-16) return mid;
    }
    return 0.5 * (lo + hi);
  };
  res.a0 = bisect_to(1.0, 1e-12);
  res.eigenAtA0 = lam(res.a0);
  res.a1 = bisect_to(std::exp(gamma * cfg.crossingExponent), 1e-12);
  (void)lam(res.a1);

  // New fixed points lie on the e2 axis (the field is symmetric under u1 -> -u1).
  auto axis_defect = [&](double x) {
    Vec z = Vec::Zero(d);
    z[1] = x;
    const Vec pt = wrap(q + frame * z);
    const Vec img = side_eval(res.map, pt, inverseSide);
    return (g.frameInv * min_disp(q, img))[1] - x;
  };
  double xs = 0;
  const int scan = 400;
  double prev = axis_defect(Ru * 1e-3);
  for (int i = 1; i <= scan; ++i) {
    const double x = Ru * (1e-3 + (1.0 - 1e-3) * i / scan);
    const double v = axis_defect(x);
    if (prev > 0 && v <= 0) {
      double lo = Ru * (1e-3 + (1.0 - 1e-3) * (i - 1) / scan), hi = x;
      for (int it = 0; it < 200 && hi - lo > 1e-17; ++it) {
        const double mid = 0.5 * (lo + hi);
        (axis_defect(mid) > 0 ? lo : hi) = mid;
      }
      xs = 0.5 * (lo + hi);
      break;
    }
    prev = v;
  }
  if (xs == 0) throw Error(Errc::FixedPointSearchFailed, "no sign change of the axis defect");
  res.offset = xs;
  for (int sgn : {+1, -1}) {
    Vec z = Vec::Zero(d);
    z[1] = sgn * xs;
    const auto r = newton_fixed_point(res.map, wrap(q + frame * z));
    if (!r) throw Error(Errc::FixedPointSearchFailed, "Newton diverged at a pitchfork fixed point");
    (sgn > 0 ? res.q1 : res.q2) = *r;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Center stage
// ---------------------------------------------------------------------------

struct CenterResult {
  DeformedMap map;  // g_{b1}
  double b0 = 0, b1 = 0;
  double discAtB0 = 0, discAtB1 = 0;
  std::complex<double> eigenAtB1;
  double blockNormBefore = 0, blockNormAfter = 0;
};

inline double block_discriminant(const Mat& j) {
  const double tr = j(0, 0) + j(1, 1);
  const double det = j(0, 0) * j(1, 1) - j(0, 1) * j(1, 0);
  return tr * tr - 4 * det;
}

/// Adds a rotation stage centered at the fixed point q2 and tunes its time until the two
/// contracting chart eigenvalues at q2 collide and become complex.
inline CenterResult build_center_stage(const DeformedMap& g0, const Vec& q2, double gamma, double eps,
                                       const BvStageConfig& cfg = {}, bool inverseSide = false) {
  CenterResult res;
  res.map = g0;
  auto& g = side_group(res.map, inverseSide);
  const int d = res.map.dim();
  const Vec z2 = g.frameInv * min_disp(g.center, q2);
  const double sep = std::hypot(z2[0], z2[1]);
  if (sep == 0) throw Error(Errc::InvalidConfig, "center stage needs a fixed point off the chart center");
  const Mat before = chart_jacobian(res.map, q2, g, inverseSide);
  res.blockNormBefore = op_norm(before.topLeftCorner(2, 2));
  if (block_discriminant(before) < 0) throw Error(Errc::NoCollision, "contracting block is already complex");
  const double Rc = cfg.centerRadiusFraction * sep;
  Vec off = Vec::Zero(d);
  off[0] = z2[0];
  off[1] = z2[1];
  g.stages.push_back(make_stage(FieldKind::Center, d, off, Rc, cfg.transverseRadiusFraction * eps, cfg.innerFraction,
                                cfg.transverseInnerFraction, cfg.centerRate, 0.0));
  const std::size_t si = g.stages.size() - 1;
  auto disc = [&](double b) {
    side_group(res.map, inverseSide).stages[si].time = b;
    return block_discriminant(chart_jacobian(res.map, q2, side_group(res.map, inverseSide), inverseSide));
  };
  const double bmax = (M_PI / 2) / cfg.centerRate;
  double lo = 0, hi = bmax;
  if (!(disc(lo) > 0 && disc(hi) < 0)) throw Error(Errc::NoCollision, "discriminant does not change sign");
  double b0 = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    b0 = 0.5 * (lo + hi);
    const double v = disc(b0);
    if (std::abs(v) < 1e-12) break;
    (v > 0 ? lo : hi) = b0;
    if (hi - lo < 1e-16) break;
  }
  res.b0 = b0;
  res.discAtB0 = disc(b0);
  res.b1 = b0 + cfg.centerOvershoot * (bmax - b0);
  res.discAtB1 = disc(res.b1);
  const Mat after = chart_jacobian(res.map, q2, side_group(res.map, inverseSide), inverseSide);
  res.blockNormAfter = op_norm(after.topLeftCorner(2, 2));
  Eigen::EigenSolver<Eigen::Matrix2d> es(Eigen::Matrix2d(after.topLeftCorner(2, 2)), false);
  res.eigenAtB1 = es.eigenvalues()[0];
  (void)gamma;
  return res;
}

// ---------------------------------------------------------------------------
// Linear conjugation
// ---------------------------------------------------------------------------

struct LinearConjugationPatch {
  Vec center;
  double radius = 0;  // patch ball radius (eps)
  double alpha = 0;   // L = diag(alpha^2, alpha^2, 1, 1) in the group frame
};

/// Conjugates the group centered at the patch center by L. Every stage must sit strictly inside
/// the patch ball, otherwise the conjugated map would not glue to the base outside it.
inline DeformedMap apply_linear_conjugation(const DeformedMap& g, const LinearConjugationPatch& patch) {
  DeformedMap out = g;
  bool hit = false;
  for (auto* list : {&out.post(), &out.pre()})
    for (auto& grp : *list) {
      if (torus_distance(grp.center, patch.center) > 1e-12) continue;
      hit = true;
      const double fn = op_norm(grp.frame);
      for (const auto& s : grp.stages) {
        if (s.time == 0.0) continue;
        const double reach = (std::sqrt(s.offset.squaredNorm()) + s.support_radius()) * fn;
        if (reach >= patch.radius)
          throw Error(Errc::GluingViolation, "stage support reaches " + std::to_string(reach) +
                                                 " >= patch radius " + std::to_string(patch.radius));
      }
      Vec sc = Vec::Ones(grp.dim());
      sc[0] = sc[1] = patch.alpha * patch.alpha;
      grp.scaling = sc;
      if (grp.support_radius() >= patch.radius)
        throw Error(Errc::GluingViolation, "conjugated support leaves the patch");
    }
  if (!hit) throw Error(Errc::InvalidConfig, "no group centered at the patch center");
  return out;
}

// ---------------------------------------------------------------------------
// Block bounds behind the aperture condition
// ---------------------------------------------------------------------------

struct BlockBounds {
  double planeNorm = 0;  // sup ||plane-plane block|| of the unconjugated side map
  double crossNorm = 0;  // sup ||plane-transverse block||
  double transverseMin = 0;  // weakest transverse expansion of the side base map
  double alphaBound = 0;     // (transverseMin - planeNorm) / crossNorm
  Vec worstCrossChart;       // chart point where crossNorm is attained
};

/// Samples the unconjugated group composed with the side base map over its support.
inline BlockBounds block_bounds(const ToralAutomorphism& A, const StageGroup& unconj, bool inverseSide, int samples,
                                unsigned seed = 11) {
  const int d = A.dim();
  const Mat base = unconj.frameInv * (inverseSide ? A.inverse_d() : A.matrix_d()) * unconj.frame;
  BlockBounds bb;
  bb.transverseMin = std::min(std::abs(base(2, 2)), std::abs(base(3, 3)));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int s = 0; s < samples; ++s) {
    const auto& st = unconj.stages[static_cast<std::size_t>(s) % unconj.stages.size()];
    Vec y = st.offset;
    double pu, pw;
    do {
      pu = U(rng);
      pw = U(rng);
    } while (pu * pu + pw * pw > 1);
    const double ang = M_PI * U(rng);
    y[0] += st.plane.outer * std::sqrt(std::abs(pu)) * std::cos(ang);
    y[1] += st.plane.outer * std::sqrt(std::abs(pu)) * std::sin(ang);
    const double ang2 = M_PI * U(rng);
    y[2] += st.transverse.outer * std::sqrt(std::abs(pw)) * std::cos(ang2);
    y[3] += st.transverse.outer * std::sqrt(std::abs(pw)) * std::sin(ang2);
    Mat jphi;
    (void)unconj.chart_map(y, +1, &jphi);
    const Mat j = jphi * base;
    bb.planeNorm = std::max(bb.planeNorm, op_norm(j.topLeftCorner(2, 2)));
    const double cn = op_norm(j.topRightCorner(2, d - 2));
    if (cn > bb.crossNorm) {
      bb.crossNorm = cn;
      bb.worstCrossChart = y;
    }
  }
  bb.alphaBound = bb.crossNorm > 0 ? (bb.transverseMin - bb.planeNorm) / bb.crossNorm
                                   : std::numeric_limits<double>::infinity();
  return bb;
}

// ---------------------------------------------------------------------------
// Full construction
// ---------------------------------------------------------------------------

struct SideReport {
  std::string label;
  Vec center;
  double a0 = 0, a1 = 0, eigenAtA0 = 0;
  double b0 = 0, b1 = 0, discAtB0 = 0, discAtB1 = 0;
  std::complex<double> eigenAtB1;
  double offset = 0;
  Vec fixedPlus, fixedMinus;  // after conjugation
  int fixedInChartAtA1 = 0;
  int indexCenter = 0, indexPlus = 0, indexMinus = 0;
  BlockBounds blocks;
  PitchforkResult pitchfork;
  CenterResult rotation;
};

// ---------------------------------------------------------------------------
// Tangency stage
// ---------------------------------------------------------------------------


struct TangencyResult {
  DeformedMap map;           // input map with the conjugated tangency group added
  Vec r;
  double tau = 0;            // chart plateau radius
  double loopScale = 0;      // loop reaches 1.5 * loopScale along e1
  double blockResidual = 0;  // |plane block at r - I| after the linear sub-stage
  Vec crossingUnstable, crossingStable;  // branch crossings of the e2 = 0 axis (chart)
  double angle = 0;          // radians between branch tangents at the crossing
  double gap = 0;            // |crossingUnstable - crossingStable|
  int iterates = 0;
  bool found = false;
};

namespace detail {

struct LeafMap {
  StageGroup group;  // unconjugated
  double l1, l2;     // base eigenvalues on the plane

  [[nodiscard]] Eigen::Vector2d step(const Eigen::Vector2d& u, int dir, Eigen::Matrix2d* jac = nullptr) const {
    const int d = group.dim();
    Vec z = Vec::Zero(d);
    if (dir > 0) {
      z[0] = l1 * u[0];
      z[1] = l2 * u[1];
      Mat j;
      const Vec out = group.chart_map(z, +1, jac ? &j : nullptr);
      if (jac) *jac = j.topLeftCorner(2, 2) * Eigen::Vector2d(l1, l2).asDiagonal();
      return {out[0], out[1]};
    }
    z[0] = u[0];
    z[1] = u[1];
    Mat j;
    const Vec out = group.chart_map(z, -1, jac ? &j : nullptr);
    if (jac) *jac = Eigen::Vector2d(1 / l1, 1 / l2).asDiagonal() * Eigen::Matrix2d(j.topLeftCorner(2, 2));
    return {out[0] / l1, out[1] / l2};
  }
};

struct BranchCrossing {
  Eigen::Vector2d point, tangent;
  int iterates = 0;
  bool ok = false;
};

/// Follows the branch leaving the saddle along `dir0` (forward for dir = +1, backward for -1)
/// until it crosses the axis u2 = 0 on the far side of the loop; refines the crossing by bisection
/// over a fundamental domain.
inline BranchCrossing follow_branch(const LeafMap& F, const Eigen::Vector2d& dir0, double mult, double s0, int dir,
                                    int maxIt, double loopScale) {
  const double sgn0 = dir0[1] > 0 ? 1.0 : -1.0;
  auto start = [&](double th) -> Eigen::Vector2d { return s0 * std::pow(mult, th) * dir0; };
  // Index of the last iterate still on the starting side of the axis.
  auto count = [&](double th) {
    Eigen::Vector2d u = start(th);
    for (int n = 0; n < maxIt; ++n) {
      const Eigen::Vector2d v = F.step(u, dir);
      if (v[1] * sgn0 <= 0 && v[0] > 0.5 * loopScale) return n;
      if (!v.allFinite() || v.norm() > 10 * loopScale) return -1;
      u = v;
    }
    return -1;
  };
  BranchCrossing bc;
  const int n0 = count(0.0);
  if (n0 < 0) return bc;
  // F^{n0} of the fundamental-domain start is still before the axis at th = 0 and (about) one
  // iterate further, hence past it, at th = 1.
  auto side = [&](double th) {
    Eigen::Vector2d u = start(th);
    for (int n = 0; n < n0; ++n) u = F.step(u, dir);
    return u[1] * sgn0;
  };
  double lo = 0.0, hi = 1.0;
  if (!(side(lo) > 0) || !(side(hi) <= 0)) return bc;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (side(mid) > 0 ? lo : hi) = mid;
  }
  Eigen::Vector2d u = start(0.5 * (lo + hi));
  Eigen::Vector2d t = dir0;
  for (int n = 0; n < n0; ++n) {
    Eigen::Matrix2d j;
    u = F.step(u, dir, &j);
    t = j * t;
    t.normalize();
  }
  bc.point = u;
  bc.tangent = t;
  bc.iterates = n0;
  bc.ok = true;
  return bc;
}

}  // namespace detail

/// Tangency stage at the fixed point r: a linear sub-stage that cancels the base on the contracting
/// leaf (so the leaf map is the identity on the plateau), followed by a homoclinic saddle flow whose
/// separatrix loop makes the stable and unstable branches of r coincide. Conjugated by L like the
/// other groups.
inline TangencyResult build_tangency_stage(const DeformedMap& f, const Vec& r, double eps, double gamma, double alpha,
                                           const TangencyConfig& cfg = {}) {
  const auto& A = f.base();
  const int d = A.dim();
  if (torus_distance(f.eval(r), r) > 1e-12) throw Error(Errc::InvalidConfig, "tangency center is not fixed");
  if (f.distance_to_supports(r) <= eps) throw Error(Errc::InvalidConfig, "tangency ball meets another support");
  const auto& sd = A.spectral();
  TangencyResult res;
  res.r = r;
  res.tau = cfg.tau > 0 ? cfg.tau : eps / 10;
  res.loopScale = res.tau / 3;  // loop radius 1.5 * scale = tau / 2 sits inside the plateau
  const double l1 = sd.eigenvalues[0], l2 = sd.eigenvalues[1];
  StageGroup grp = make_group("r", r, side_frame(sd, false));
  ChartStage lin = make_stage(FieldKind::Linear, d, Vec::Zero(d), 2 * res.tau, 0.9 * eps, 0.5, 0.0, 1.0, cfg.amplitude);
  lin.field.k1 = -std::log(l1);
  lin.field.k2 = -std::log(l2);
  grp.stages.push_back(lin);
  {
    DeformedMap inter = f;
    inter.add_post(grp);
    const Mat j = chart_jacobian(inter, r, inter.post().back(), false);
    res.blockResidual = (j.topLeftCorner(2, 2) - Eigen::Matrix2d::Identity()).norm();
  }
  const double time = (cfg.time > 0 ? cfg.time : gamma / (2 * cfg.rate)) * cfg.amplitude;
  ChartStage hom = make_stage(FieldKind::Homoclinic, d, Vec::Zero(d), 2 * res.tau, 0.9 * eps, 0.5, 0.0, cfg.rate, time);
  hom.field.scale = res.loopScale;
  grp.stages.push_back(hom);

  DeformedMap g = f;
  g.add_post(grp);
  res.map = apply_linear_conjugation(g, {r, eps, alpha});
  if (cfg.amplitude == 0.0) return res;

  const detail::LeafMap F{grp, l1, l2};
  const double mult = std::exp(cfg.rate * time);
  const double s0 = cfg.startFraction * res.loopScale;
  const auto bu = detail::follow_branch(F, Eigen::Vector2d(1, 1).normalized(), mult, s0, +1, cfg.maxIterates,
                                        res.loopScale);
  const auto bs = detail::follow_branch(F, Eigen::Vector2d(1, -1).normalized(), mult, s0, -1, cfg.maxIterates,
                                        res.loopScale);
  if (!bu.ok || !bs.ok) throw Error(Errc::TangencyNotFound, "a branch never returned to the symmetry axis");
  res.crossingUnstable = Vec(bu.point);
  res.crossingStable = Vec(bs.point);
  res.iterates = bu.iterates + bs.iterates;
  res.gap = (bu.point - bs.point).norm();
  const double cr = std::abs(bu.tangent[0] * bs.tangent[1] - bu.tangent[1] * bs.tangent[0]);
  res.angle = std::atan2(cr, std::abs(bu.tangent.dot(bs.tangent)));
  res.found = res.angle < cfg.angleTolerance && res.gap < 1e-6 * res.loopScale;
  if (!res.found)
    throw Error(Errc::TangencyNotFound, "branch angle " + std::to_string(res.angle) + " rad, gap " +
                                            std::to_string(res.gap));
  return res;
}

struct BvBuild {
  DeformedMap map;
  ParameterLedger ledger;
  BvStageConfig config;
  Vec p, q, r, s;
  SideReport qSide, pSide;
  int indexS = 0;
  std::optional<TangencyResult> tangency;
};

/// Choose four fixed points with pairwise distances as large as possible (greedy, origin first).
inline std::vector<Vec> choose_fixed_points(const ToralAutomorphism& A, int count = 4) {
  const auto fix = periodic_points(A, 1);
  if (fix.count < count) throw Error(Errc::InvalidConfig, "not enough fixed points");
  std::vector<Vec> all;
  for (const auto& p : fix.points) all.push_back(p.coords());
  std::vector<Vec> chosen{all.front()};
  while (static_cast<int>(chosen.size()) < count) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
      double m = std::numeric_limits<double>::infinity();
      for (const auto& c : chosen) m = std::min(m, torus_distance(all[i], c));
      if (m > best + 1e-12) {
        best = m;
        arg = i;
      }
    }
    chosen.push_back(all[arg]);
  }
  return chosen;
}

namespace detail {

inline SideReport build_side(const ToralAutomorphism& A, const Vec& center, const ParameterLedger& L,
                             const BvStageConfig& cfg, bool inverseSide) {
  SideReport sr;
  sr.label = inverseSide ? "p" : "q";
  sr.center = center;
  const std::string step = inverseSide ? "mirrored pitchfork stage at p" : "pitchfork stage at q";
  try {
    sr.pitchfork = build_pitchfork_stage(A, center, L.eps, L.gamma, cfg, inverseSide);
  } catch (const Error& e) {
    throw Error(e.code(), step + ": " + e.detail());
  }
  sr.a0 = sr.pitchfork.a0;
  sr.a1 = sr.pitchfork.a1;
  sr.eigenAtA0 = sr.pitchfork.eigenAtA0;
  sr.offset = sr.pitchfork.offset;
  {
    const auto& g = side_group(sr.pitchfork.map, inverseSide);
    sr.fixedInChartAtA1 =
        static_cast<int>(fixed_points_in_chart(sr.pitchfork.map, g, cfg.planeRadiusFraction * L.eps).size());
  }
  try {
    sr.rotation = build_center_stage(sr.pitchfork.map, sr.pitchfork.q2, L.gamma, L.eps, cfg, inverseSide);
  } catch (const Error& e) {
    throw Error(e.code(), std::string(inverseSide ? "mirrored center stage at p2: " : "center stage at q2: ") + e.detail());
  }
  sr.b0 = sr.rotation.b0;
  sr.b1 = sr.rotation.b1;
  sr.discAtB0 = sr.rotation.discAtB0;
  sr.discAtB1 = sr.rotation.discAtB1;
  sr.eigenAtB1 = sr.rotation.eigenAtB1;
  sr.blocks = block_bounds(A, side_group(sr.rotation.map, inverseSide), inverseSide, cfg.blockSamples);
  return sr;
}

}  // namespace detail

/// The full sparse deformation: pitchfork + rotation at q conjugated by L, and the mirrored
/// stages at p acting on the inverse. With amplitude 0 every flow time is 0 and f = f_A.
inline BvBuild build_bv_map(const ToralAutomorphism& A, const ParameterLedger& L, const BvStageConfig& cfg = {}) {
  BvBuild out;
  out.ledger = L;
  out.config = cfg;
  const auto pts = choose_fixed_points(A, 4);
  out.q = pts[0];
  out.p = pts[1];
  out.s = pts[2];
  out.r = pts[3];
  const int d = A.dim();
  DeformedMap f(A);

  auto finish_side = [&](SideReport& sr, bool inverseSide) {
    StageGroup grp = side_group(sr.rotation.map, inverseSide);
    grp.stages[0].time = sr.a1 * cfg.amplitude;
    grp.stages[1].time = sr.b1 * cfg.amplitude;
    if (cfg.enforceAlphaBound && cfg.conjugate && cfg.amplitude > 0 && !(L.alpha < sr.blocks.alphaBound))
      throw Error(Errc::InfeasibleParameters,
                  "alpha = " + std::to_string(L.alpha) + " violates the aperture bound " +
                      std::to_string(sr.blocks.alphaBound) + " at " + sr.label);
    DeformedMap single(A);
    if (inverseSide)
      single.add_pre(grp);
    else
      single.add_post(grp);
    if (cfg.conjugate) single = apply_linear_conjugation(single, {grp.center, L.eps, L.alpha});
    const StageGroup& conj = inverseSide ? single.pre().back() : single.post().back();
    if (inverseSide)
      f.add_pre(conj);
    else
      f.add_post(conj);
  };

  out.qSide = detail::build_side(A, out.q, L, cfg, false);
  finish_side(out.qSide, false);
  if (cfg.mirrored) {
    out.pSide = detail::build_side(A, out.p, L, cfg, true);
    finish_side(out.pSide, true);
  }
  out.map = f;

  // Fixed-point bookkeeping on the final map.
  auto locate = [&](SideReport& sr, bool inverseSide) {
    const auto& grp = side_group(out.map, inverseSide);
    sr.indexCenter = stable_index(out.map.differential(sr.center));
    for (int sgn : {+1, -1}) {
      Vec z = Vec::Zero(d);
      z[1] = sgn * sr.offset;
      const Vec seed = wrap(grp.center + grp.frame * z.cwiseProduct(grp.scaling));
      const auto r = newton_fixed_point(out.map, seed);
      Vec x = r ? *r : seed;
      (sgn > 0 ? sr.fixedPlus : sr.fixedMinus) = x;
      (sgn > 0 ? sr.indexPlus : sr.indexMinus) = stable_index(out.map.differential(x));
    }
  };
  if (cfg.amplitude > 0) {
    locate(out.qSide, false);
    if (cfg.mirrored) locate(out.pSide, true);
  }
  if (cfg.tangency) {
    try {
      out.tangency = build_tangency_stage(out.map, out.r, L.eps, L.gamma, L.alpha, cfg.tangencyConfig);
    } catch (const Error& e) {
      throw Error(e.code(), std::string("tangency stage at r: ") + e.detail());
    }
    out.map = out.tangency->map;
  }
  out.indexS = stable_index(out.map.differential(out.s));
  return out;
}

}  // namespace forge
