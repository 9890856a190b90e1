#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "forge/cones.hpp"
#include "forge/deformation.hpp"
#include "forge/foliation.hpp"
#include "forge/parallel.hpp"

namespace forge {

// ---------------------------------------------------------------------------
// C^0 distance and the linear shadowing constant
// ---------------------------------------------------------------------------

/// Full lift displacement g(x) - A x, translation included.
inline Vec total_displacement(const DeformedMap& g, const Vec& x) {
  return min_disp(g.base().apply(x), g.eval(x));
}

/// sup_x d(f x, g x) + d(f^{-1} x, g^{-1} x), sampled uniformly and inside every support.
inline double c0_distance(const DeformedMap& f, const DeformedMap& g, int samples = 4000, unsigned seed = 17) {
  if (f.dim() != g.dim()) throw Error(Errc::DimensionMismatch, "maps act on different tori");
  if (f.is_linear() && g.is_linear() && f.shift() == g.shift() && f.base().matrix() == g.base().matrix()) return 0.0;
  std::mt19937_64 rng(seed);
  double worst = 0;
  auto probe = [&](const Vec& x) {
    worst = std::max(worst, torus_distance(f.eval(x), g.eval(x)) + torus_distance(f.eval_inverse(x), g.eval_inverse(x)));
  };
  for (int s = 0; s < samples; ++s) {
    probe(sample_point(g, rng, s / 2, s % 2 == 1));
    // Points whose preimage lies in a pre support.
    if (s % 4 == 3) probe(g.eval(sample_point(g, rng, s / 4, true)));
  }
  return worst;
}

/// sum_{n>=0} |A_u^{-(n+1)} P_u| + sum_{n>=1} |A_s^{n-1} P_s|: the sharpest constant with
/// sup|u| <= K sup|p| for the series solution.
inline double shadowing_constant(const ToralAutomorphism& A, double tol = 1e-14) {
  const auto& sd = A.spectral();
  const int d = sd.dim(), k = sd.stableIndex;
  const Mat Vu = sd.vectors.rightCols(d - k), Du = sd.dual.bottomRows(d - k);
  const Mat Vs = sd.vectors.leftCols(k), Ds = sd.dual.topRows(k);
  double total = 0;
  for (int n = 0; n < 10000; ++n) {
    Vec lu(d - k), ls(k);
    for (int i = 0; i < d - k; ++i) lu[i] = std::pow(sd.eigenvalues[static_cast<std::size_t>(k + i)], -(n + 1));
    for (int i = 0; i < k; ++i) ls[i] = std::pow(sd.eigenvalues[static_cast<std::size_t>(i)], n);
    const double t = op_norm(Vu * lu.asDiagonal() * Du) + op_norm(Vs * ls.asDiagonal() * Ds);
    total += t;
    if (t < tol) break;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Semiconjugacy pi = id + u with pi o g = A o pi
// ---------------------------------------------------------------------------

struct ShadowOptions {
  int resolution = 0;     // grid points per axis; 0 picks 64 (d = 2) or 12 (d = 4)
  double tol = 1e-3;      // required equivariance defect
  int maxTerms = 400;     // series cap per direction
  int fixedTerms = 0;     // > 0: use exactly this many terms, no truncation test
  int refineSteps = 4;    // exact orbit steps taken before interpolating
  int testResolution = 8; // half-offset test grid per axis
  int supportTests = 2000;
  int threads = 1;
  unsigned seed = 29;
};

class SemiConjugacy {
 public:
  SemiConjugacy() = default;

  [[nodiscard]] int dim() const { return dim_; }
  [[nodiscard]] int resolution() const { return res_; }
  [[nodiscard]] const std::vector<double>& field() const { return field_; }
  [[nodiscard]] const DeformedMap& map() const { return g_; }
  [[nodiscard]] double defect() const { return defect_; }
  [[nodiscard]] double sup_displacement() const { return supU_; }
  [[nodiscard]] double c0() const { return c0_; }
  [[nodiscard]] double constant() const { return K_; }
  [[nodiscard]] int max_terms_used() const { return termsUsed_; }
  [[nodiscard]] int refine_steps() const { return refine_; }
  [[nodiscard]] bool identity() const { return identity_; }

  /// Grid value at node multi-index (first axis fastest).
  [[nodiscard]] Vec node(std::size_t flat) const {
    Vec v(dim_);
    for (int c = 0; c < dim_; ++c) v[c] = field_[flat * static_cast<std::size_t>(dim_) + static_cast<std::size_t>(c)];
    return v;
  }

  /// Periodic multilinear interpolation of the stored field.
  [[nodiscard]] Vec interpolate(const Vec& x) const {
    Vec out = Vec::Zero(dim_);
    if (identity_) return out;
    std::vector<std::size_t> lo(static_cast<std::size_t>(dim_)), hi(static_cast<std::size_t>(dim_));
    std::vector<double> frac(static_cast<std::size_t>(dim_));
    const Vec w = wrap(x);
    for (int i = 0; i < dim_; ++i) {
      const double s = w[i] * res_;
      const double fl = std::floor(s);
      const auto i0 = static_cast<std::size_t>(static_cast<long long>(fl) % res_);
      lo[static_cast<std::size_t>(i)] = i0;
      hi[static_cast<std::size_t>(i)] = (i0 + 1) % static_cast<std::size_t>(res_);
      frac[static_cast<std::size_t>(i)] = s - fl;
    }
    for (int corner = 0; corner < (1 << dim_); ++corner) {
      double weight = 1;
      std::size_t flat = 0, stride = 1;
      for (int i = 0; i < dim_; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const bool up = (corner >> i) & 1;
        weight *= up ? frac[ui] : 1 - frac[ui];
        flat += (up ? hi[ui] : lo[ui]) * stride;
        stride *= static_cast<std::size_t>(res_);
      }
      if (weight != 0) out += weight * node(flat);
    }
    return out;
  }

  /// u(x): refineSteps exact orbit terms, then the interpolated tail pushed through A_u^{-k} and A_s^k.
  [[nodiscard]] Vec displacement(const Vec& x) const { return displacement(x, refine_); }
  [[nodiscard]] Vec displacement(const Vec& x, int steps) const {
    if (identity_) return Vec::Zero(dim_);
    const auto& sd = g_.base().spectral();
    const int k = sd.stableIndex;
    Vec cu = Vec::Zero(dim_);  // eigen coordinates
    Vec y = x, scale = Vec::Ones(dim_);
    for (int n = 0; n < steps; ++n) {
      const Vec c = sd.dual * total_displacement(g_, y);
      for (int i = k; i < dim_; ++i) {
        scale[i] /= sd.eigenvalues[static_cast<std::size_t>(i)];
        cu[i] += scale[i] * c[i];
      }
      y = g_.eval(y);
    }
    const Vec tailU = sd.dual * interpolate(y);
    for (int i = k; i < dim_; ++i) cu[i] += scale[i] * tailU[i];
    y = x;
    for (int i = 0; i < k; ++i) scale[i] = 1;
    for (int n = 1; n <= steps; ++n) {
      y = g_.eval_inverse(y);
      const Vec c = sd.dual * total_displacement(g_, y);
      for (int i = 0; i < k; ++i) {
        cu[i] -= scale[i] * c[i];
        scale[i] *= sd.eigenvalues[static_cast<std::size_t>(i)];
      }
    }
    const Vec tailS = sd.dual * interpolate(y);
    for (int i = 0; i < k; ++i) cu[i] += scale[i] * tailS[i];
    return sd.vectors * cu;
  }

  [[nodiscard]] Vec pi(const Vec& x) const { return pi(x, refine_); }
  [[nodiscard]] Vec pi(const Vec& x, int steps) const {
    if (identity_) return x;
    return wrap(x + displacement(x, steps));
  }

  /// |pi(g x) - A pi(x)| on the torus.
  [[nodiscard]] double equivariance_error(const Vec& x) const {
    return torus_distance(pi(g_.eval(x)), g_.base().apply(pi(x)));
  }

 private:
  friend SemiConjugacy solve_semiconjugacy(const DeformedMap&, const ShadowOptions&);
  friend SemiConjugacy load_displacement_grid(const std::string&, const DeformedMap&, int);
  friend void measure_defect(SemiConjugacy&, const ShadowOptions&);
  friend SemiConjugacy resume_semiconjugacy(const std::string&, const DeformedMap&, const ShadowOptions&);
  int dim_ = 0, res_ = 0, refine_ = 0, termsUsed_ = 0;
  bool identity_ = false;
  std::vector<double> field_;
  DeformedMap g_;
  double defect_ = 0, supU_ = 0, c0_ = 0, K_ = 0;
};

namespace detail {

/// Truncated orbit series for u(x). Stops once the majorant P |A_u^{-(n+1)} P_u| (resp. the stable
/// one) falls below tol / 10, so orbits that hit a support late are still summed.
inline Vec series_displacement(const DeformedMap& g, const Vec& x, double P, double tol, int maxTerms, int fixedTerms,
                               const std::vector<double>& majU, const std::vector<double>& majS, int& used) {
  const auto& sd = g.base().spectral();
  const int d = g.dim(), k = sd.stableIndex;
  Vec cu = Vec::Zero(d), scale = Vec::Ones(d);
  auto done = [&](int n, const std::vector<double>& maj) {
    if (fixedTerms > 0) return n + 1 >= fixedTerms;
    return P * maj[static_cast<std::size_t>(n)] < tol / 10;
  };
  Vec y = x;
  int n = 0;
  for (;; ++n) {
    if (n >= maxTerms) throw Error(Errc::NotConverged, "unstable series exceeded maxTerms = " + std::to_string(maxTerms));
    const Vec c = sd.dual * total_displacement(g, y);
    for (int i = k; i < d; ++i) {
      scale[i] /= sd.eigenvalues[static_cast<std::size_t>(i)];
      cu[i] += scale[i] * c[i];
    }
    if (done(n, majU)) break;
    y = g.eval(y);
  }
  used = n + 1;
  y = x;
  for (n = 0;; ++n) {
    if (n >= maxTerms) throw Error(Errc::NotConverged, "stable series exceeded maxTerms = " + std::to_string(maxTerms));
    y = g.eval_inverse(y);
    const Vec c = sd.dual * total_displacement(g, y);
    for (int i = 0; i < k; ++i) {
      cu[i] -= scale[i] * c[i];
      scale[i] *= sd.eigenvalues[static_cast<std::size_t>(i)];
    }
    if (done(n, majS)) break;
  }
  used = std::max(used, n + 1);
  const Vec u = sd.vectors * cu;
  if (!(u.norm() < 0.25)) throw Error(Errc::ShadowingDiverged, "displacement left the injectivity scale");
  return u;
}

}  // namespace detail

/// Solve A u(x) - u(g x) = p(x) on a periodic grid and certify the equivariance defect.
/// Equivariance defect on the half-offset grid and inside the supports; also raises sup |u| to the
/// largest value seen at the test points.
inline void measure_defect(SemiConjugacy& sc, const ShadowOptions& opt) {
  const int d = sc.dim_;
  const DeformedMap& g = sc.g_;
  std::vector<Vec> tests;
  const int tr = std::max(2, opt.testResolution);
  std::size_t tn = 1;
  for (int i = 0; i < d; ++i) tn *= static_cast<std::size_t>(tr);
  for (std::size_t flat = 0; flat < tn; ++flat) {
    Vec x(d);
    std::size_t r = flat;
    for (int i = 0; i < d; ++i) {
      x[i] = (static_cast<double>(r % static_cast<std::size_t>(tr)) + 0.5) / tr;
      r /= static_cast<std::size_t>(tr);
    }
    tests.push_back(x);
  }
  std::mt19937_64 rng(opt.seed);
  for (int s = 0; s < opt.supportTests; ++s) tests.push_back(sample_point(g, rng, s, true));
  std::vector<double> err(tests.size(), 0.0), sup(tests.size(), 0.0);
  parallel_for(tests.size(), opt.threads, [&](std::size_t i) {
    err[i] = sc.equivariance_error(tests[i]);
    sup[i] = sc.displacement(tests[i]).norm();
  });
  sc.defect_ = *std::max_element(err.begin(), err.end());
  sc.supU_ = std::max(sc.supU_, *std::max_element(sup.begin(), sup.end()));
}

inline SemiConjugacy solve_semiconjugacy(const DeformedMap& g, const ShadowOptions& opt = {}) {
  const int d = g.dim();
  const auto& sd = g.base().spectral();
  SemiConjugacy sc;
  sc.dim_ = d;
  sc.g_ = g;
  sc.refine_ = std::max(0, opt.refineSteps);
  sc.res_ = opt.resolution > 0 ? opt.resolution : (d <= 2 ? 64 : 12);
  sc.K_ = shadowing_constant(g.base());
  sc.c0_ = c0_distance(DeformedMap(g.base()), g);
  sc.identity_ = g.is_linear();
  if (sc.identity_) return sc;  // u = 0, defect 0

  // Majorants |A_u^{-(n+1)} P_u| and |A_s^n P_s| used for truncation.
  const int k = sd.stableIndex;
  std::vector<double> majU, majS;
  {
    const Mat Vu = sd.vectors.rightCols(d - k), Du = sd.dual.bottomRows(d - k);
    const Mat Vs = sd.vectors.leftCols(k), Ds = sd.dual.topRows(k);
    for (int n = 0; n < opt.maxTerms + 1; ++n) {
      Vec lu(d - k), ls(k);
      for (int i = 0; i < d - k; ++i) lu[i] = std::pow(sd.eigenvalues[static_cast<std::size_t>(k + i)], -(n + 1));
      for (int i = 0; i < k; ++i) ls[i] = std::pow(sd.eigenvalues[static_cast<std::size_t>(i)], n + 1);
      majU.push_back(op_norm(Vu * lu.asDiagonal() * Du));
      majS.push_back(op_norm(Vs * ls.asDiagonal() * Ds));
    }
    if (majU.size() > 1 && !(majU[1] < majU[0] && majS[1] < majS[0]))
      throw Error(Errc::ShadowingDiverged, "series terms do not contract");
  }
  // sup |p| <= d_C0; the margin absorbs sampling error of the estimate.
  const double P = 1.5 * sc.c0_ + 1e-300;

  std::size_t nodes = 1;
  for (int i = 0; i < d; ++i) nodes *= static_cast<std::size_t>(sc.res_);
  sc.field_.assign(nodes * static_cast<std::size_t>(d), 0.0);
  std::vector<int> used(nodes, 0);
  parallel_for(nodes, opt.threads, [&](std::size_t flat) {
    Vec x(d);
    std::size_t r = flat;
    for (int i = 0; i < d; ++i) {
      x[i] = static_cast<double>(r % static_cast<std::size_t>(sc.res_)) / sc.res_;
      r /= static_cast<std::size_t>(sc.res_);
    }
    const Vec u = detail::series_displacement(g, x, P, opt.tol, opt.maxTerms, opt.fixedTerms, majU, majS, used[flat]);
    for (int c = 0; c < d; ++c) sc.field_[flat * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] = u[c];
  });
  sc.termsUsed_ = *std::max_element(used.begin(), used.end());
  for (std::size_t i = 0; i < nodes; ++i) sc.supU_ = std::max(sc.supU_, sc.node(i).norm());

  measure_defect(sc, opt);
  if (opt.fixedTerms == 0 && !(sc.defect_ < opt.tol))
    throw Error(Errc::NotConverged, "equivariance defect " + std::to_string(sc.defect_) + " above tol " +
                                        std::to_string(opt.tol));
  return sc;
}

/// Winding of pi along each coordinate cycle: row i is the total lift displacement of t -> pi(t e_i).
inline IMat winding_matrix(const SemiConjugacy& sc, int steps = 256, const Vec& base = Vec()) {
  const int d = sc.dim();
  const Vec x0 = base.size() == d ? base : Vec::Constant(d, 0.1234);
  IMat w(d, d);
  for (int i = 0; i < d; ++i) {
    Vec total = Vec::Zero(d);
    Vec prev = sc.pi(x0);
    for (int s = 1; s <= steps; ++s) {
      Vec x = x0;
      x[i] += static_cast<double>(s) / steps;
      const Vec cur = sc.pi(wrap(x));
      total += min_disp(prev, cur);
      prev = cur;
    }
    for (int j = 0; j < d; ++j) w(i, j) = std::llround(total[j]);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Fibers
// ---------------------------------------------------------------------------

struct FiberProbe {
  Vec target;
  std::vector<Vec> preimages;
  double diameter = 0;
  double maxResidual = 0;
};

struct FiberProbeOptions {
  double searchRadius = 0;  // 0 picks 2 K c0
  double tol = 1e-9;        // residual |pi(y) - target|
  int samples = 64;
  int iterations = 40;
  int refineSteps = 16;     // exact orbit steps per pi evaluation
  double mergeDistance = 1e-9;
  unsigned seed = 43;
};

/// Preimages of x under pi. Starts are spread log-uniformly in radius around one known preimage and
/// driven onto the fiber by Levenberg-Marquardt on |pi(y) - x|^2, which lands near the closest fiber
/// point since pi collapses the fiber directions.
inline FiberProbe fiber_probe(const SemiConjugacy& sc, const Vec& x, const FiberProbeOptions& opt = {}) {
  FiberProbe fp;
  fp.target = wrap(x);
  const int d = sc.dim();
  auto residual = [&](const Vec& y) { return Vec(min_disp(fp.target, sc.pi(y, opt.refineSteps))); };
  auto relax = [&](Vec y, double& res) {
    Vec r = residual(y);
    res = r.norm();
    double mu = 1e-3;
    for (int it = 0; it < opt.iterations && !(res < opt.tol); ++it) {
      const double h = std::max(1e-10, 1e-3 * res);
      Mat J(d, d);
      for (int i = 0; i < d; ++i) {
        Vec e = Vec::Zero(d);
        e[i] = h;
        J.col(i) = (min_disp(fp.target, sc.pi(wrap(y + e), opt.refineSteps)) -
                    min_disp(fp.target, sc.pi(wrap(y - e), opt.refineSteps))) / (2 * h);
      }
      bool improved = false;
      for (int tries = 0; tries < 12 && !improved; ++tries) {
        const Mat H = J.transpose() * J + mu * Mat::Identity(d, d);
        const Vec step = -H.ldlt().solve(J.transpose() * r);
        const Vec yn = wrap(y + step);
        const Vec rn = residual(yn);
        if (rn.norm() < res) {
          y = yn;
          r = rn;
          res = rn.norm();
          mu = std::max(mu / 4, 1e-12);
          improved = true;
        } else {
          mu *= 8;
        }
      }
      if (!improved) break;
    }
    return y;
  };
  auto add = [&](const Vec& y, double res) {
    if (!(res < opt.tol)) return;
    for (const auto& q : fp.preimages)
      if (torus_distance(q, y) < opt.mergeDistance) return;
    fp.preimages.push_back(y);
    fp.maxResidual = std::max(fp.maxResidual, res);
  };
  double res = 0;
  const Vec y0 = relax(fp.target, res);
  add(y0, res);
  const double R = opt.searchRadius > 0 ? opt.searchRadius : std::max(2 * sc.constant() * sc.c0(), 1e-6);
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> U(0, 1);
  std::normal_distribution<double> N(0, 1);
  const double lo = std::log(std::max(10 * opt.mergeDistance, 1e-12)), hi = std::log(R);
  for (int s = 0; s < opt.samples; ++s) {
    Vec dir(d);
    for (int i = 0; i < d; ++i) dir[i] = N(rng);
    dir.normalize();
    const double r = std::exp(lo + (hi - lo) * U(rng));
    const Vec y = relax(wrap(y0 + r * dir), res);
    add(y, res);
  }
  for (std::size_t i = 0; i < fp.preimages.size(); ++i)
    for (std::size_t j = i + 1; j < fp.preimages.size(); ++j)
      fp.diameter = std::max(fp.diameter, torus_distance(fp.preimages[i], fp.preimages[j]));
  return fp;
}

// ---------------------------------------------------------------------------
// Almost expansivity
// ---------------------------------------------------------------------------

struct ExpansivityPair {
  Vec x, y;
  double initialDistance = 0;
  double rate = 0;       // (1/n) log(d_n / d_0) at the first exit from the eps0 ball
  int exitTime = -1;     // -1: stayed eps0-close for |n| <= horizon
};

struct AlmostExpansivityReport {
  std::vector<ExpansivityPair> pairs;
  int nonSeparating = 0;
  double maxNonSeparatingDistance = 0;
  double minRate = std::numeric_limits<double>::infinity();
  double medianRate = 0;

  [[nodiscard]] double fraction_at_least(double threshold) const {
    int n = 0, ok = 0;
    for (const auto& p : pairs) {
      if (p.initialDistance == 0) continue;
      ++n;
      if (p.exitTime >= 0 && p.rate >= threshold) ++ok;
    }
    return n == 0 ? 0.0 : static_cast<double>(ok) / n;
  }
};

struct AlmostExpansivityOptions {
  double initialSeparation = 1e-9;
  double offSupportMargin = 0;  // seeds keep this distance from every support
  unsigned seed = 53;
  std::vector<std::pair<Vec, Vec>> extraPairs;
};

namespace detail {

inline ExpansivityPair track_pair(const DeformedMap& g, const Vec& x, const Vec& y, double eps0, int horizon) {
  ExpansivityPair p;
  p.x = x;
  p.y = y;
  p.initialDistance = torus_distance(x, y);
  if (p.initialDistance == 0) return p;
  Vec a = x, b = y;
  for (int n = 1; n <= horizon; ++n) {
    a = g.eval(a);
    b = g.eval(b);
    const double dn = torus_distance(a, b);
    if (dn >= eps0) {
      p.exitTime = n;
      p.rate = std::log(dn / p.initialDistance) / n;
      return p;
    }
  }
  a = x;
  b = y;
  for (int n = 1; n <= horizon; ++n) {
    a = g.eval_inverse(a);
    b = g.eval_inverse(b);
    const double dn = torus_distance(a, b);
    if (dn >= eps0) {
      p.exitTime = n;
      p.rate = std::log(dn / p.initialDistance) / n;
      return p;
    }
  }
  return p;
}

}  // namespace detail

/// Pairs seeded along the unstable bundle of the base; the separation rate is measured at the first
/// time the pair leaves the eps0 ball.
inline AlmostExpansivityReport check_almost_expansivity(const DeformedMap& g, double eps0, int pairCount, int horizon,
                                                        const AlmostExpansivityOptions& opt = {}) {
  AlmostExpansivityReport rep;
  const int d = g.dim();
  const Mat Eu = g.base().spectral().unstable_frame();
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> U(0, 1);
  std::normal_distribution<double> N(0, 1);
  for (const auto& pr : opt.extraPairs) rep.pairs.push_back(detail::track_pair(g, pr.first, pr.second, eps0, horizon));
  int attempts = 0;
  for (int s = 0; s < pairCount && attempts < 100 * pairCount; ++attempts) {
    Vec x(d);
    for (int i = 0; i < d; ++i) x[i] = U(rng);
    if (g.distance_to_supports(x) < opt.offSupportMargin) continue;
    Vec c(Eu.cols());
    for (int i = 0; i < Eu.cols(); ++i) c[i] = N(rng);
    const Vec v = (Eu * c).normalized();
    rep.pairs.push_back(detail::track_pair(g, x, wrap(x + opt.initialSeparation * v), eps0, horizon));
    ++s;
  }
  std::vector<double> rates;
  for (const auto& p : rep.pairs) {
    if (p.exitTime < 0) {
      ++rep.nonSeparating;
      rep.maxNonSeparatingDistance = std::max(rep.maxNonSeparatingDistance, p.initialDistance);
      continue;
    }
    rates.push_back(p.rate);
    rep.minRate = std::min(rep.minRate, p.rate);
  }
  if (!rates.empty()) {
    std::sort(rates.begin(), rates.end());
    rep.medianRate = rates[rates.size() / 2];
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Local product structure
// ---------------------------------------------------------------------------

struct ProductIntersection {
  Vec z;
  double residual = 0;
  double distXZ = 0, distXY = 0;
  double ratio = 0;  // d(x, z) / d(x, y)
  int solutions = 0;
};

/// The point z where the cs-disk through x meets the cu-disk through y. Newton runs on the two graph
/// parameterizations from the flat-leaf intersection and from perturbed starts; distinct limits mean
/// the patches fold over each other.
inline ProductIntersection product_intersection(const LeafDisk& cs, const LeafDisk& cu, double tau2,
                                                double tol = 1e-10, int starts = 8, unsigned seed = 91) {
  if (cs.kind() != LeafKind::CenterStable || cu.kind() != LeafKind::CenterUnstable)
    throw Error(Errc::InvalidConfig, "expects a cs-disk and a cu-disk");
  const int d = cs.dim(), ks = cs.plane_dim(), ku = cu.plane_dim();
  if (ks + ku != d) throw Error(Errc::DimensionMismatch, "disk dimensions do not add up");
  const Vec xy = min_disp(cu.base(), cs.base());  // x - y in the lift
  auto residual = [&](const Vec& as, const Vec& au, Mat* J) {
    Mat Dhs, Dhu;
    const Vec r = xy + cs.frame().plane * as + cs.frame().complement * cs.height(as, J ? &Dhs : nullptr) -
                  cu.frame().plane * au - cu.frame().complement * cu.height(au, J ? &Dhu : nullptr);
    if (J) {
      J->resize(d, d);
      J->leftCols(ks) = cs.frame().plane + cs.frame().complement * Dhs;
      J->rightCols(ku) = -(cu.frame().plane + cu.frame().complement * Dhu);
    }
    return r;
  };
  Mat B(d, d);
  B << cs.frame().plane, -cu.frame().plane;
  const Vec lin = B.fullPivLu().solve(-xy);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0, 1);
  std::vector<Vec> found;
  double bestRes = std::numeric_limits<double>::infinity();
  for (int s = 0; s < starts; ++s) {
    Vec p = lin;
    if (s > 0)
      for (int i = 0; i < d; ++i) p[i] += 0.25 * tau2 * N(rng) / std::sqrt(static_cast<double>(d));
    double res = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 40; ++it) {
      Mat J;
      const Vec r = residual(p.head(ks), p.tail(ku), &J);
      res = r.norm();
      if (res < tol) break;
      const Eigen::FullPivLU<Mat> lu(J);
      if (!lu.isInvertible()) break;
      p -= lu.solve(r);
    }
    if (!(res < tol) || !cs.in_domain(p.head(ks)) || !cu.in_domain(p.tail(ku))) continue;
    const Vec z = cs.point(p.head(ks));
    if (torus_distance(z, cs.base()) > tau2 || torus_distance(z, cu.base()) > tau2) continue;
    bool fresh = true;
    for (const auto& f : found)
      if (torus_distance(f, z) < 1e-8) fresh = false;
    if (fresh) found.push_back(z);
    bestRes = std::min(bestRes, res);
  }
  if (found.empty()) throw Error(Errc::NoIntersection, "leaves do not meet within tau2");
  if (found.size() > 1)
    throw Error(Errc::AmbiguousIntersection, std::to_string(found.size()) + " intersection points; tau2 too large");
  ProductIntersection out;
  out.z = found.front();
  out.solutions = 1;
  out.residual = bestRes;
  out.distXZ = torus_distance(cs.base(), out.z);
  out.distXY = torus_distance(cs.base(), cu.base());
  out.ratio = out.distXY > 0 ? out.distXZ / out.distXY : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Binary displacement grid
// ---------------------------------------------------------------------------
// Layout: 8-byte magic "FORGEGRD", then uint32 version, dim, resolution, components, all little
// endian, followed by resolution^dim * components float64 values (little endian). Node index has
// the first axis varying fastest; node (i_1..i_d) sits at (i_1/res, ..., i_d/res).

inline constexpr char kGridMagic[8] = {'F', 'O', 'R', 'G', 'E', 'G', 'R', 'D'};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw Error(Errc::IoError, "truncated grid file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

inline void save_displacement_grid(const SemiConjugacy& sc, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot open " + path);
  os.write(kGridMagic, 8);
  const int res = sc.identity() ? 1 : sc.resolution();
  detail::put_le<std::uint32_t>(os, 1);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(sc.dim()));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(res));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(sc.dim()));
  if (sc.identity()) {
    for (int c = 0; c < sc.dim(); ++c) detail::put_le<double>(os, 0.0);
  } else {
    for (double v : sc.field()) detail::put_le<double>(os, v);
  }
  if (!os) throw Error(Errc::IoError, "write failed for " + path);
}

/// Rebuilds a SemiConjugacy over g from a saved grid (defect and constants are recomputed lazily
/// by the caller; only the field is restored).
inline SemiConjugacy load_displacement_grid(const std::string& path, const DeformedMap& g, int refineSteps = 4) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kGridMagic)) throw Error(Errc::IoError, "bad grid magic");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != 1) throw Error(Errc::IoError, "unsupported grid version " + std::to_string(version));
  const auto d = detail::get_le<std::uint32_t>(is);
  const auto res = detail::get_le<std::uint32_t>(is);
  const auto comps = detail::get_le<std::uint32_t>(is);
  if (static_cast<int>(d) != g.dim() || comps != d) throw Error(Errc::DimensionMismatch, "grid does not match the map");
  std::size_t nodes = 1;
  for (std::uint32_t i = 0; i < d; ++i) nodes *= res;
  SemiConjugacy sc;
  sc.dim_ = static_cast<int>(d);
  sc.res_ = static_cast<int>(res);
  sc.g_ = g;
  sc.refine_ = refineSteps;
  sc.K_ = shadowing_constant(g.base());
  sc.field_.resize(nodes * comps);
  for (auto& v : sc.field_) v = detail::get_le<double>(is);
  sc.identity_ = g.is_linear() && std::all_of(sc.field_.begin(), sc.field_.end(), [](double v) { return v == 0.0; });
  for (std::size_t i = 0; i < nodes; ++i) sc.supU_ = std::max(sc.supU_, sc.node(i).norm());
  return sc;
}

/// Reloads a checkpointed grid for g and recomputes the diagnostics the grid file does not store.
inline SemiConjugacy resume_semiconjugacy(const std::string& path, const DeformedMap& g, const ShadowOptions& opt = {}) {
  SemiConjugacy sc = load_displacement_grid(path, g, std::max(0, opt.refineSteps));
  const int expected = opt.resolution > 0 ? opt.resolution : (g.dim() <= 2 ? 64 : 12);
  if (!sc.identity_ && sc.res_ != expected) throw Error(Errc::IoError, "checkpoint resolution does not match");
  sc.c0_ = c0_distance(DeformedMap(g.base()), g);
  if (sc.identity_) return sc;
  measure_defect(sc, opt);
  if (opt.fixedTerms == 0 && !(sc.defect_ < opt.tol))
    throw Error(Errc::NotConverged, "checkpoint defect " + std::to_string(sc.defect_) + " above tol");
  return sc;
}

}  // namespace forge
