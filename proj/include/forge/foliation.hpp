#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "forge/deformation.hpp"
#include "forge/parallel.hpp"

namespace forge {

enum class LeafKind { CenterUnstable, CenterStable };

inline const char* leaf_kind_name(LeafKind k) { return k == LeafKind::CenterUnstable ? "cu" : "cs"; }

/// Fixed splitting of the base used to write leaves as graphs: points are base + plane a + complement h(a),
/// and coordinates of a displacement v are (coordPlane v, coordComp v).
struct LeafFrame {
  Mat plane, complement, coordPlane, coordComp;
};

inline LeafFrame leaf_frame(const SpectralData& sd, LeafKind kind) {
  const int d = sd.dim(), k = sd.stableIndex;
  LeafFrame f;
  if (kind == LeafKind::CenterUnstable) {
    f.plane = sd.unstable_frame();
    f.complement = sd.stable_frame();
    f.coordPlane = sd.dual.bottomRows(d - k);
    f.coordComp = sd.dual.topRows(k);
  } else {
    f.plane = sd.stable_frame();
    f.complement = sd.unstable_frame();
    f.coordPlane = sd.dual.topRows(k);
    f.coordComp = sd.dual.bottomRows(d - k);
  }
  return f;
}

namespace detail {

// Cubic convolution kernel (Catmull-Rom) on nodes i-1, i, i+1, i+2 for t in [0, 1].
inline void cubic_weights(double t, double w[4], double dw[4]) {
  const double t2 = t * t, t3 = t2 * t;
  w[0] = 0.5 * (-t3 + 2 * t2 - t);
  w[1] = 0.5 * (3 * t3 - 5 * t2 + 2);
  w[2] = 0.5 * (-3 * t3 + 4 * t2 + t);
  w[3] = 0.5 * (t3 - t2);
  dw[0] = 0.5 * (-3 * t2 + 4 * t - 1);
  dw[1] = 0.5 * (9 * t2 - 10 * t);
  dw[2] = 0.5 * (-9 * t2 + 8 * t + 1);
  dw[3] = 0.5 * (3 * t2 - 2 * t);
}

}  // namespace detail

/// Local leaf written as a graph over a square patch [-R, R]^k of the plane, sampled on res^k nodes.
class LeafDisk {
 public:
  LeafDisk() = default;
  LeafDisk(Vec base, LeafKind kind, LeafFrame frame, double halfWidth, int res)
      : base_(std::move(base)), kind_(kind), frame_(std::move(frame)), R_(halfWidth), res_(res) {
    d_ = static_cast<int>(base_.size());
    k_ = static_cast<int>(frame_.plane.cols());
    if (res_ < 4) throw Error(Errc::InvalidConfig, "leaf grid needs at least 4 nodes per axis");
    std::size_t n = 1;
    for (int i = 0; i < k_; ++i) n *= static_cast<std::size_t>(res_);
    heights_.assign(n * static_cast<std::size_t>(d_ - k_), 0.0);
  }

  [[nodiscard]] const Vec& base() const { return base_; }
  [[nodiscard]] LeafKind kind() const { return kind_; }
  [[nodiscard]] const LeafFrame& frame() const { return frame_; }
  [[nodiscard]] double half_width() const { return R_; }
  [[nodiscard]] int resolution() const { return res_; }
  [[nodiscard]] int plane_dim() const { return k_; }
  [[nodiscard]] int dim() const { return d_; }
  [[nodiscard]] std::size_t node_count() const { return heights_.size() / static_cast<std::size_t>(d_ - k_); }
  [[nodiscard]] double spacing() const { return 2 * R_ / (res_ - 1); }

  [[nodiscard]] Vec node_coords(std::size_t flat) const {
    Vec a(k_);
    for (int i = 0; i < k_; ++i) {
      a[i] = -R_ + spacing() * static_cast<double>(flat % static_cast<std::size_t>(res_));
      flat /= static_cast<std::size_t>(res_);
    }
    return a;
  }
  [[nodiscard]] bool on_boundary(std::size_t flat) const {
    for (int i = 0; i < k_; ++i) {
      const auto j = flat % static_cast<std::size_t>(res_);
      if (j == 0 || j + 1 == static_cast<std::size_t>(res_)) return true;
      flat /= static_cast<std::size_t>(res_);
    }
    return false;
  }
  [[nodiscard]] Vec node_height(std::size_t flat) const {
    const int m = d_ - k_;
    Vec h(m);
    for (int c = 0; c < m; ++c) h[c] = heights_[flat * static_cast<std::size_t>(m) + static_cast<std::size_t>(c)];
    return h;
  }
  void set_node_height(std::size_t flat, const Vec& h) {
    const int m = d_ - k_;
    for (int c = 0; c < m; ++c) heights_[flat * static_cast<std::size_t>(m) + static_cast<std::size_t>(c)] = h[c];
  }
  [[nodiscard]] const std::vector<double>& heights() const { return heights_; }

  [[nodiscard]] bool in_domain(const Vec& a, double slack = 1e-12) const {
    return a.cwiseAbs().maxCoeff() <= R_ * (1 + slack);
  }

  /// Cubic interpolation of the height with its derivative (m x k). Linear extrapolation supplies ghost nodes.
  [[nodiscard]] Vec height(const Vec& a, Mat* jac = nullptr) const {
    const int m = d_ - k_;
    int i0[kMaxDim];
    double w[kMaxDim][4], dw[kMaxDim][4];
    const double hs = spacing();
    for (int i = 0; i < k_; ++i) {
      const double s = (a[i] + R_) / hs;
      int c = static_cast<int>(std::floor(s));
      c = std::clamp(c, 0, res_ - 2);
      i0[i] = c;
      detail::cubic_weights(s - c, w[i], dw[i]);
    }
    Vec h = Vec::Zero(m);
    Mat J = Mat::Zero(m, k_);
    int total = 1;
    for (int i = 0; i < k_; ++i) total *= 4;
    int idx[kMaxDim];
    for (int corner = 0; corner < total; ++corner) {
      int r = corner;
      double weight = 1;
      for (int i = 0; i < k_; ++i) {
        const int o = r % 4;
        r /= 4;
        idx[i] = i0[i] - 1 + o;
        weight *= w[i][o];
      }
      const Vec v = ghost_value(idx);
      h += weight * v;
      if (jac) {
        int rr = corner;
        int off[kMaxDim];
        for (int i = 0; i < k_; ++i) {
          off[i] = rr % 4;
          rr /= 4;
        }
        for (int j = 0; j < k_; ++j) {
          double dj = dw[j][off[j]] / hs;
          for (int i = 0; i < k_; ++i)
            if (i != j) dj *= w[i][off[i]];
          J.col(j) += dj * v;
        }
      }
    }
    if (jac) *jac = J;
    return h;
  }

  /// Ambient point (wrapped) and its lift displacement from the base.
  [[nodiscard]] Vec offset(const Vec& a) const { return frame_.plane * a + frame_.complement * height(a); }
  [[nodiscard]] Vec point(const Vec& a) const { return wrap(base_ + offset(a)); }

  /// Largest |complement Dh v| / |plane v|, from centered differences of the node heights.
  [[nodiscard]] double max_slope() const {
    const int m = d_ - k_;
    const Mat Ppinv = (frame_.plane.transpose() * frame_.plane).inverse() * frame_.plane.transpose();
    double worst = 0;
    for (std::size_t flat = 0; flat < node_count(); ++flat) {
      Mat Dh(m, k_);
      std::size_t stride = 1, r = flat;
      for (int i = 0; i < k_; ++i) {
        const auto j = r % static_cast<std::size_t>(res_);
        r /= static_cast<std::size_t>(res_);
        const std::size_t lo = j == 0 ? flat : flat - stride;
        const std::size_t hi = j + 1 == static_cast<std::size_t>(res_) ? flat : flat + stride;
        const double span = spacing() * static_cast<double>((hi - lo) / stride);
        Dh.col(i) = (node_height(hi) - node_height(lo)) / span;
        stride *= static_cast<std::size_t>(res_);
      }
      worst = std::max(worst, op_norm(frame_.complement * Dh * Ppinv));
    }
    return worst;
  }

  /// Distance from the base to the disk boundary, over the boundary nodes.
  [[nodiscard]] double inner_radius() const {
    double r = std::numeric_limits<double>::infinity();
    for (std::size_t flat = 0; flat < node_count(); ++flat)
      if (on_boundary(flat)) r = std::min(r, offset(node_coords(flat)).norm());
    return r;
  }

  /// Largest node height.
  [[nodiscard]] double max_height() const {
    double r = 0;
    for (std::size_t flat = 0; flat < node_count(); ++flat) r = std::max(r, node_height(flat).norm());
    return r;
  }

 private:
  [[nodiscard]] Vec ghost_value(int* idx) const {
    for (int i = 0; i < k_; ++i) {
      if (idx[i] < 0 || idx[i] >= res_) {
        const int saved = idx[i];
        const int edge = saved < 0 ? 0 : res_ - 1, inner = saved < 0 ? 1 : res_ - 2;
        idx[i] = edge;
        const Vec e = ghost_value(idx);
        idx[i] = inner;
        const Vec in = ghost_value(idx);
        idx[i] = saved;
        return 2 * e - in;
      }
    }
    std::size_t flat = 0, stride = 1;
    for (int i = 0; i < k_; ++i) {
      flat += static_cast<std::size_t>(idx[i]) * stride;
      stride *= static_cast<std::size_t>(res_);
    }
    return node_height(flat);
  }

  Vec base_;
  LeafKind kind_ = LeafKind::CenterUnstable;
  LeafFrame frame_;
  double R_ = 0;
  int res_ = 0, d_ = 0, k_ = 0;
  std::vector<double> heights_;
};

struct LeafOptions {
  int resolution = 33;
  double rho = 0;            // 0: sqrt(eps) - 2 eps with eps = 0.01
  Mat seedSlope;             // m x k linear seed heights h(a) = S a; empty for the flat seed
  double newtonTol = 1e-12;
  int newtonMaxIter = 30;
  int threads = 1;
};

inline double default_rho() { return std::sqrt(0.01) - 2 * 0.01; }

/// Half-width of the plane patch whose graph has inner radius at least rho.
inline double patch_half_width(const LeafFrame& f, double rho) {
  Mat B(f.plane.rows(), f.plane.rows());
  B << f.plane, f.complement;
  return rho / min_singular(B);
}

inline LeafDisk seed_disk(const Vec& x, const SpectralData& sd, LeafKind kind, const LeafOptions& opt) {
  const double rho = opt.rho > 0 ? opt.rho : default_rho();
  LeafFrame f = leaf_frame(sd, kind);
  const double R = patch_half_width(f, rho);
  LeafDisk D(x, kind, std::move(f), R, opt.resolution);
  if (opt.seedSlope.size() > 0)
    for (std::size_t n = 0; n < D.node_count(); ++n) D.set_node_height(n, opt.seedSlope * D.node_coords(n));
  return D;
}

struct GraphStepReport {
  double maxSlope = 0;
  double innerRadius = 0;       // of the re-parameterized disk at the target
  double imageInnerRadius = 0;  // distance from the image of the base to the image of the boundary
  double newtonResidual = 0;
  double baseHeight = 0;        // |h(0)| at the target
};

/// Image of D under G (g for cu, g^{-1} for cs) written as a graph over the plane at `target`,
/// clipped to the same patch. Every target node is solved by Newton for its preimage in D.
inline LeafDisk graph_transform_step(const DeformedMap& g, const LeafDisk& D, const Vec& target,
                                     const LeafOptions& opt = {}, GraphStepReport* rep = nullptr) {
  const bool forward = D.kind() == LeafKind::CenterUnstable;
  const int k = D.plane_dim();
  const auto& F = D.frame();
  auto G = [&](const Vec& y, Mat* jac) { return forward ? g.eval(y, jac) : g.eval_inverse(y, jac); };
  LeafDisk out(target, D.kind(), F, D.half_width(), D.resolution());
  Mat J0;
  const Vec gx = G(D.base(), &J0);
  Mat Dh0;
  (void)D.height(Vec::Zero(k), &Dh0);
  const Mat lin = F.coordPlane * J0 * (F.plane + F.complement * Dh0);
  const Eigen::FullPivLU<Mat> linLu(lin);
  if (!linLu.isInvertible()) throw Error(Errc::GraphFoldDetected, "image plane is not a graph over the base plane");
  // Target coordinates are taken relative to the target center; shift = target - G(base) in plane coords.
  const Vec shift = min_disp(gx, target);
  // Newton starts from the unperturbed linear map: the differential at the base can be strongly
  // sheared inside a support that is far smaller than the grid spacing.
  const Mat Al = forward ? g.base().matrix_d() : g.base().inverse_d();
  const Eigen::FullPivLU<Mat> startLu(F.coordPlane * Al * (F.plane + F.complement * Dh0));
  std::vector<double> residuals(out.node_count(), 0.0);
  parallel_for(out.node_count(), opt.threads, [&](std::size_t n) {
    const Vec ap = out.node_coords(n);
    const Vec want = ap + F.coordPlane * shift;  // plane coordinate relative to G(base)
    Vec a = startLu.solve(want);
    double res = std::numeric_limits<double>::infinity();
    Vec disp;
    for (int it = 0; it < opt.newtonMaxIter; ++it) {
      Mat Dh, Jg;
      const Vec off = F.plane * a + F.complement * D.height(a, &Dh);
      disp = min_disp(gx, G(wrap(D.base() + off), &Jg));
      const Vec r = F.coordPlane * disp - want;
      res = r.norm();
      if (res < opt.newtonTol) break;
      const Mat Jn = F.coordPlane * Jg * (F.plane + F.complement * Dh);
      const Eigen::FullPivLU<Mat> lu(Jn);
      if (!lu.isInvertible()) break;
      a -= lu.solve(r);
    }
    if (!(res < opt.newtonTol))
      throw Error(Errc::GraphFoldDetected, "graph re-solve did not converge (residual " + std::to_string(res) + ")");
    if (!D.in_domain(a, 1e-9))
      throw Error(Errc::GraphFoldDetected, "image disk does not cover the target patch");
    out.set_node_height(n, F.coordComp * (disp - shift));
    residuals[n] = res;
  });
  if (rep) {
    rep->newtonResidual = *std::max_element(residuals.begin(), residuals.end());
    rep->maxSlope = out.max_slope();
    rep->innerRadius = out.inner_radius();
    rep->baseHeight = out.height(Vec::Zero(k)).norm();
    double ir = std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < D.node_count(); ++n)
      if (D.on_boundary(n)) ir = std::min(ir, torus_distance(gx, G(D.point(D.node_coords(n)), nullptr)));
    rep->imageInnerRadius = ir;
  }
  return out;
}

struct LeafResult {
  LeafDisk disk;
  std::vector<GraphStepReport> steps;
};

/// Seeds a disk at G^{-n}(x) and applies n graph-transform steps along the exact orbit back to x.
inline LeafResult compute_leaf_disk(const DeformedMap& g, const Vec& x, int n, LeafKind kind,
                                    const LeafOptions& opt = {}) {
  const bool forward = kind == LeafKind::CenterUnstable;
  std::vector<Vec> orbit(static_cast<std::size_t>(n) + 1);
  orbit[static_cast<std::size_t>(n)] = wrap(x);
  for (int i = n - 1; i >= 0; --i) {
    const auto& next = orbit[static_cast<std::size_t>(i) + 1];
    orbit[static_cast<std::size_t>(i)] = forward ? g.eval_inverse(next) : g.eval(next);
  }
  LeafResult out;
  out.disk = seed_disk(orbit[0], g.base().spectral(), kind, opt);
  for (int i = 0; i < n; ++i) {
    GraphStepReport rep;
    out.disk = graph_transform_step(g, out.disk, orbit[static_cast<std::size_t>(i) + 1], opt, &rep);
    out.steps.push_back(rep);
  }
  return out;
}

inline LeafResult compute_cu_disk(const DeformedMap& g, const Vec& x, int n, const LeafOptions& opt = {}) {
  return compute_leaf_disk(g, x, n, LeafKind::CenterUnstable, opt);
}
inline LeafResult compute_cs_disk(const DeformedMap& g, const Vec& x, int n, const LeafOptions& opt = {}) {
  return compute_leaf_disk(g, x, n, LeafKind::CenterStable, opt);
}

/// Sup distance between two disks over the shared patch (same base, frame and grid).
inline double disk_distance(const LeafDisk& a, const LeafDisk& b) {
  if (a.node_count() != b.node_count() || a.kind() != b.kind())
    throw Error(Errc::DimensionMismatch, "disks use different grids");
  double r = 0;
  for (std::size_t n = 0; n < a.node_count(); ++n) r = std::max(r, (a.node_height(n) - b.node_height(n)).norm());
  return r + torus_distance(a.base(), b.base());
}

// ---------------------------------------------------------------------------
// Convergence of the disk sequence
// ---------------------------------------------------------------------------

struct CauchyReport {
  std::vector<int> n;
  std::vector<double> delta;  // sup |D_{n+1} - D_n|
  double ratio = 0;           // fitted geometric rate
  double constant = 0;        // fitted c in delta_n <= c ratio^n
  int fitPoints = 0;
};

/// delta_n for n in [nMin, nMax]. The geometric fit uses the terms above `floor`, where rounding does
/// not dominate; throws ConvergenceFailure when the fitted rate is not below 1.
inline CauchyReport check_cauchy(const DeformedMap& g, const Vec& x, LeafKind kind, int nMin, int nMax,
                                 const LeafOptions& opt = {}, double floor = 1e-13) {
  CauchyReport rep;
  LeafDisk prev = compute_leaf_disk(g, x, nMin, kind, opt).disk;
  int below = 0;
  for (int n = nMin; n < nMax; ++n) {
    LeafDisk next = compute_leaf_disk(g, x, n + 1, kind, opt).disk;
    rep.n.push_back(n);
    rep.delta.push_back(disk_distance(prev, next));
    prev = std::move(next);
    below = rep.delta.back() < floor ? below + 1 : 0;
    if (below >= 3) break;  // converged to rounding
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (std::size_t i = 0; i < rep.n.size(); ++i) {
    if (!(rep.delta[i] > floor)) continue;
    const double xi = rep.n[i], yi = std::log(rep.delta[i]);
    sx += xi;
    sy += yi;
    sxx += xi * xi;
    sxy += xi * yi;
    ++m;
  }
  rep.fitPoints = m;
  if (m >= 2) {
    const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    rep.ratio = std::exp(slope);
    rep.constant = std::exp((sy - slope * sx) / m);
    if (!(rep.ratio < 1)) throw Error(Errc::ConvergenceFailure, "disk sequence is not Cauchy (rate " + std::to_string(rep.ratio) + ")");
  } else if (m == 1) {
    // A single term above rounding: the sequence is already at the floor.
    rep.ratio = 0;
    rep.constant = rep.delta.front();
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Compatibility checks
// ---------------------------------------------------------------------------

struct LeafMatchReport {
  int compared = 0;
  double mismatch = 0;  // sup over compared points of the height mismatch
  double closest = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Height mismatch of ambient point y against disk B, or nullopt when y projects outside B's patch.
inline std::optional<double> height_mismatch(const LeafDisk& B, const Vec& y) {
  const Vec v = min_disp(B.base(), y);
  const Vec a = B.frame().coordPlane * v;
  if (!B.in_domain(a)) return std::nullopt;
  return (B.frame().complement * (B.frame().coordComp * v - B.height(a))).norm();
}

}  // namespace detail

/// Overlap of two disks of the same kind: points of A over B's patch and within rho of a shared point
/// must lie on B. Throws NotApplicable when the disks do not meet.
inline LeafMatchReport check_leaf_uniqueness(const LeafDisk& A, const LeafDisk& B, double rho,
                                             double touchTol = 1e-8) {
  if (A.kind() != B.kind()) throw Error(Errc::NotApplicable, "disks belong to different foliations");
  LeafMatchReport rep;
  std::vector<std::pair<Vec, double>> pts;
  Vec z;
  for (std::size_t n = 0; n < A.node_count(); ++n) {
    const Vec y = A.point(A.node_coords(n));
    const auto m = detail::height_mismatch(B, y);
    if (!m) continue;
    pts.emplace_back(y, *m);
    if (*m < rep.closest) {
      rep.closest = *m;
      z = y;
    }
  }
  if (pts.empty() || !(rep.closest < touchTol)) throw Error(Errc::NotApplicable, "disks do not share a point");
  for (const auto& [y, m] : pts) {
    if (torus_distance(y, z) > rho) continue;
    ++rep.compared;
    rep.mismatch = std::max(rep.mismatch, m);
  }
  return rep;
}

/// G(D_from) restricted to B(G(base), rho) against D_to (G = g for cu, g^{-1} for cs).
inline LeafMatchReport check_equivariance(const DeformedMap& g, const LeafDisk& from, const LeafDisk& to, double rho) {
  const bool forward = from.kind() == LeafKind::CenterUnstable;
  LeafMatchReport rep;
  const Vec gx = forward ? g.eval(from.base()) : g.eval_inverse(from.base());
  rep.closest = torus_distance(gx, to.base());
  // Nodes shrunk toward the base as well, so that expanding images still land in the ball.
  for (double scale : {1.0, 0.25, 1.0 / 16, 1.0 / 64})
    for (std::size_t n = 0; n < from.node_count(); ++n) {
      const Vec y = from.point(scale * from.node_coords(n));
      const Vec gy = forward ? g.eval(y) : g.eval_inverse(y);
      if (torus_distance(gy, gx) > rho) continue;
      const auto m = detail::height_mismatch(to, gy);
      if (!m) continue;
      ++rep.compared;
      rep.mismatch = std::max(rep.mismatch, *m);
    }
  return rep;
}

}  // namespace forge
