#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "forge/error.hpp"
#include "forge/fields.hpp"
#include "forge/torus.hpp"

namespace forge {

/// A single flow stage embedded in the torus through an affine chart at `center`.
struct LocalDeformation {
  Vec center;       // torus point
  Mat frame;        // columns: plane e1, e2, then transverse directions
  Mat frameInv;
  ChartStage stage;

  [[nodiscard]] Vec to_chart(const Vec& x) const { return frameInv * min_disp(center, x); }
  [[nodiscard]] Vec from_chart(const Vec& z) const { return wrap(center + frame * z); }
};

inline TorusPoint flow(const LocalDeformation& def, const TorusPoint& x, int direction) {
  const Vec z = def.to_chart(x.coords());
  if (!def.stage.in_support(z)) return x;
  return TorusPoint(def.center + def.frame * def.stage.flow(z, direction));
}

inline Mat flow_derivative(const LocalDeformation& def, const TorusPoint& x, int direction = 1) {
  const Vec z = def.to_chart(x.coords());
  Mat j;
  (void)def.stage.flow(z, direction, &j);
  return def.frame * j * def.frameInv;
}

/// Stages sharing one chart, optionally conjugated by a diagonal scaling `scaling` (in chart
/// coordinates): z -> S * Phi_n(...Phi_1(S^{-1} z)).
struct StageGroup {
  std::string label;
  Vec center;
  Mat frame;
  Mat frameInv;
  Vec scaling;  // diagonal of the linear conjugation; all ones means none
  std::vector<ChartStage> stages;

  [[nodiscard]] int dim() const { return static_cast<int>(center.size()); }

  /// Radius of a ball around `center` (torus metric) containing every conjugated support.
  [[nodiscard]] double support_radius() const {
    const double fn = frame.size() > 0 ? op_norm(frame) : 1.0;
    double r = 0;
    for (const auto& s : stages) {
      if (s.time == 0.0) continue;
      double acc = 0;
      const int d = dim();
      // Extent of the stage polydisk along each chart axis, scaled by the conjugation.
      double pe = 0, te = 0;
      for (int i = 0; i < std::min(2, d); ++i) pe = std::max(pe, scaling[i]);
      for (int i = 2; i < d; ++i) te = std::max(te, scaling[i]);
      double po = 0, to = 0;
      for (int i = 0; i < std::min(2, d); ++i) po += s.offset[i] * s.offset[i];
      for (int i = 2; i < d; ++i) to += s.offset[i] * s.offset[i];
      const double a = pe * (std::sqrt(po) + s.plane.outer);
      const double b = d > 2 ? te * (std::sqrt(to) + s.transverse.outer) : 0.0;
      acc = std::hypot(a, b);
      r = std::max(r, acc * fn);
    }
    return r;
  }

  [[nodiscard]] bool trivial() const {
    return std::all_of(stages.begin(), stages.end(), [](const ChartStage& s) { return s.time == 0.0; });
  }

  [[nodiscard]] bool touches(const Vec& z) const {
    Vec y = z.cwiseQuotient(scaling);
    for (const auto& s : stages)
      if (s.time != 0.0 && s.in_support(y)) return true;
    return false;
  }

  /// Chart-coordinate map and its derivative.
  [[nodiscard]] Vec chart_map(const Vec& z, int direction, Mat* jac) const {
    const int d = dim();
    Vec y = z.cwiseQuotient(scaling);
    Mat acc = Mat::Identity(d, d);
    auto run = [&](const ChartStage& s) {
      if (jac) {
        Mat j;
        y = s.flow(y, direction, &j);
        acc = j * acc;
      } else {
        y = s.flow(y, direction);
      }
    };
    if (direction > 0)
      for (const auto& s : stages) run(s);
    else
      for (auto it = stages.rbegin(); it != stages.rend(); ++it) run(*it);
    if (jac) *jac = scaling.asDiagonal() * acc * scaling.cwiseInverse().asDiagonal();
    return y.cwiseProduct(scaling);
  }

  /// Torus-level map; identity (and identity derivative) away from the supports.
  [[nodiscard]] Vec apply(const Vec& x, int direction, Mat* jac) const {
    const Vec z = frameInv * min_disp(center, x);
    if (!touches(z)) {
      if (jac) *jac = Mat::Identity(dim(), dim());
      return x;
    }
    Mat jz;
    const Vec zz = chart_map(z, direction, jac ? &jz : nullptr);
    if (jac) *jac = frame * jz * frameInv;
    return wrap(center + frame * zz);
  }
};

/// f = Post_m o ... o Post_1 o (A + shift) o Pre_1^{-1} o ... o Pre_n^{-1}.
/// Pre-side groups are deformations of the inverse map, applied inverted.
class DeformedMap {
 public:
  DeformedMap() = default;
  explicit DeformedMap(ToralAutomorphism base) : base_(std::move(base)) { shift_ = Vec::Zero(base_.dim()); }

  [[nodiscard]] const ToralAutomorphism& base() const { return base_; }
  [[nodiscard]] int dim() const { return base_.dim(); }
  [[nodiscard]] const std::vector<StageGroup>& post() const { return post_; }
  [[nodiscard]] const std::vector<StageGroup>& pre() const { return pre_; }
  std::vector<StageGroup>& post() { return post_; }
  std::vector<StageGroup>& pre() { return pre_; }
  [[nodiscard]] const Vec& shift() const { return shift_; }
  void set_shift(const Vec& s) { shift_ = s; }

  void add_post(StageGroup g) { post_.push_back(std::move(g)); }
  void add_pre(StageGroup g) { pre_.push_back(std::move(g)); }

  /// True when the map is literally the base automorphism.
  [[nodiscard]] bool is_linear() const {
    if (shift_.norm() != 0.0) return false;
    for (const auto& g : post_)
      if (!g.trivial()) return false;
    for (const auto& g : pre_)
      if (!g.trivial()) return false;
    return true;
  }

  [[nodiscard]] Vec operator()(const Vec& x) const { return eval(x); }

  [[nodiscard]] Vec eval(const Vec& x, Mat* jac = nullptr) const {
    require_same_dim(x, shift_);
    Vec y = x;
    Mat j, acc;
    if (jac) acc = Mat::Identity(dim(), dim());
    for (auto it = pre_.rbegin(); it != pre_.rend(); ++it) {
      y = it->apply(y, -1, jac ? &j : nullptr);
      if (jac) acc = j * acc;
    }
    y = wrap(base_.matrix_d() * y + shift_);
    if (jac) acc = base_.matrix_d() * acc;
    for (const auto& g : post_) {
      y = g.apply(y, +1, jac ? &j : nullptr);
      if (jac) acc = j * acc;
    }
    if (jac) *jac = acc;
    return y;
  }

  [[nodiscard]] Vec eval_inverse(const Vec& x, Mat* jac = nullptr) const {
    require_same_dim(x, shift_);
    Vec y = x;
    Mat j, acc;
    if (jac) acc = Mat::Identity(dim(), dim());
    for (auto it = post_.rbegin(); it != post_.rend(); ++it) {
      y = it->apply(y, -1, jac ? &j : nullptr);
      if (jac) acc = j * acc;
    }
    y = wrap(base_.inverse_d() * (y - shift_));
    if (jac) acc = base_.inverse_d() * acc;
    for (const auto& g : pre_) {
      y = g.apply(y, +1, jac ? &j : nullptr);
      if (jac) acc = j * acc;
    }
    if (jac) *jac = acc;
    return y;
  }

  [[nodiscard]] Mat differential(const Vec& x) const {
    Mat j;
    (void)eval(x, &j);
    return j;
  }
  [[nodiscard]] Mat differential_inverse(const Vec& x) const {
    Mat j;
    (void)eval_inverse(x, &j);
    return j;
  }

  /// n-fold iterate (negative n iterates the inverse).
  [[nodiscard]] Vec iterate(Vec x, int n) const {
    for (int i = 0; i < n; ++i) x = eval(x);
    for (int i = 0; i < -n; ++i) x = eval_inverse(x);
    return x;
  }

  /// All support groups (post and pre) with their centers and radii.
  [[nodiscard]] std::vector<const StageGroup*> groups() const {
    std::vector<const StageGroup*> r;
    for (const auto& g : post_)
      if (!g.trivial()) r.push_back(&g);
    for (const auto& g : pre_)
      if (!g.trivial()) r.push_back(&g);
    return r;
  }

  /// Distance from x to the nearest deformation support ball (infinity when none).
  [[nodiscard]] double distance_to_supports(const Vec& x) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto* g : groups()) best = std::min(best, torus_distance(x, g->center) - g->support_radius());
    return best;
  }

 private:
  ToralAutomorphism base_;
  std::vector<StageGroup> post_, pre_;
  Vec shift_;
};

// ---------------------------------------------------------------------------
// Fixed points
// ---------------------------------------------------------------------------

/// Newton on g(x) - x (lift difference). Returns nullopt when it does not converge.
inline std::optional<Vec> newton_fixed_point(const DeformedMap& g, Vec x, int period = 1,
                                             double tol = 1e-13, int maxIter = 60) {
  const int d = g.dim();
  for (int it = 0; it < maxIter; ++it) {
    Vec y = x;
    Mat acc = Mat::Identity(d, d), j;
    for (int k = 0; k < period; ++k) {
      y = g.eval(y, &j);
      acc = j * acc;
    }
    const Vec r = min_disp(x, y);
    if (!r.allFinite()) return std::nullopt;
    if (r.norm() < tol) return x;
    const Mat m = acc - Mat::Identity(d, d);
    const Vec step = m.fullPivLu().solve(-r);
    if (!step.allFinite()) return std::nullopt;
    x = wrap(x + step);
  }
  Vec y = x;
  for (int k = 0; k < period; ++k) y = g.eval(y);
  if (torus_distance(x, y) < 1e3 * tol) return x;
  return std::nullopt;
}

/// Number of eigenvalues of the Jacobian at x with modulus < 1.
inline int stable_index(const Mat& jac) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(jac), false);
  int n = 0;
  for (int i = 0; i < jac.rows(); ++i)
    if (std::abs(es.eigenvalues()[i]) < 1.0) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Sparseness (strong support) check
// ---------------------------------------------------------------------------

struct SparsenessReport {
  std::vector<TorusPoint> centers;
  double radius = 0;
  double c1DistanceOutside = 0;
  double minPairwiseCenterDistance = std::numeric_limits<double>::infinity();
  int samples = 0;
  bool pass = false;
};

/// C^1 distance between f and g (maps and inverses) sampled outside the union of support balls.
inline SparsenessReport check_sparse_deformation(const DeformedMap& f, const DeformedMap& g, double eps, int N,
                                                 int sampleCount = 4000, unsigned seed = 7) {
  if (f.dim() != g.dim()) throw Error(Errc::DimensionMismatch, "maps act on different tori");
  const int d = g.dim();
  SparsenessReport rep;
  const auto groups = g.groups();
  for (const auto* gr : groups) {
    rep.centers.emplace_back(gr->center);
    rep.radius = std::max(rep.radius, gr->support_radius());
  }
  if (static_cast<int>(groups.size()) > N)
    throw Error(Errc::TooManyComponents, std::to_string(groups.size()) + " supports exceed N = " + std::to_string(N));
  for (std::size_t i = 0; i < groups.size(); ++i)
    for (std::size_t j = i + 1; j < groups.size(); ++j)
      rep.minPairwiseCenterDistance =
          std::min(rep.minPairwiseCenterDistance, torus_distance(groups[i]->center, groups[j]->center));
  // Supports of f (if any) are excluded as well.
  std::vector<std::pair<Vec, double>> balls;
  for (const auto* gr : groups) balls.emplace_back(gr->center, gr->support_radius());
  for (const auto* gr : f.groups()) balls.emplace_back(gr->center, gr->support_radius());
  auto outside = [&](const Vec& x) {
    for (const auto& b : balls)
      if (torus_distance(x, b.first) < b.second) return false;
    return true;
  };
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> Nrm(0.0, 1.0);
  double worst = 0;
  int taken = 0;
  for (int s = 0; s < sampleCount; ++s) {
    Vec x(d);
    if (s % 2 == 0 || balls.empty()) {
      for (int i = 0; i < d; ++i) x[i] = U(rng);
    } else {
      // Shell just outside a support ball, where a leak would show first.
      const auto& b = balls[static_cast<std::size_t>(s / 2) % balls.size()];
      Vec dir(d);
      for (int i = 0; i < d; ++i) dir[i] = Nrm(rng);
      dir.normalize();
      x = wrap(b.first + dir * (b.second * (1.0 + 0.5 * U(rng)) + 1e-12));
    }
    if (!outside(x)) continue;
    ++taken;
    Mat jf, jg, jfi, jgi;
    const Vec fx = f.eval(x, &jf), gx = g.eval(x, &jg);
    const Vec fix = f.eval_inverse(x, &jfi), gix = g.eval_inverse(x, &jgi);
    const double dist = torus_distance(fx, gx) + op_norm(jf - jg) + torus_distance(fix, gix) +
                        op_norm(jfi - jgi);
    worst = std::max(worst, dist);
  }
  rep.samples = taken;
  rep.c1DistanceOutside = worst;
  rep.pass = rep.c1DistanceOutside < eps && rep.radius < eps &&
             (groups.size() < 2 || rep.minPairwiseCenterDistance > std::sqrt(eps));
  return rep;
}

}  // namespace forge
