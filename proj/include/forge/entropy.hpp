#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "forge/deformation.hpp"
#include "forge/error.hpp"
#include "forge/parallel.hpp"
#include "forge/torus.hpp"

namespace forge {

// ---------------------------------------------------------------------------
// Maps and sample sets
// ---------------------------------------------------------------------------

using StepFn = std::function<Vec(const Vec&)>;

/// A torus map together with the number of expanding directions it is expected to have; the
/// latter sets how a sample patch must shrink to keep dynamical covers resolved.
struct MapView {
  int dim = 0;
  int unstableDim = 0;
  StepFn step;
};

inline MapView map_view(const DeformedMap& g, bool inverse = false) {
  const auto& sd = g.base().spectral();
  MapView v;
  v.dim = g.dim();
  v.unstableDim = inverse ? sd.stableIndex : sd.unstable_dim();
  if (inverse)
    v.step = [&g](const Vec& x) { return g.eval_inverse(x); };
  else
    v.step = [&g](const Vec& x) { return g.eval(x); };
  return v;
}

inline MapView identity_view(int d) { return {d, 0, [](const Vec& x) { return x; }}; }

/// Regular cell-centered grid with `perDim` points per axis on the cube of side `side` centered
/// at `center` (side 1 covers the whole torus).
inline std::vector<Vec> grid_samples(int d, int perDim, const Vec& center, double side) {
  if (perDim < 1) throw Error(Errc::EmptySet, "grid needs at least one point per axis");
  std::size_t total = 1;
  for (int i = 0; i < d; ++i) total *= static_cast<std::size_t>(perDim);
  std::vector<Vec> out;
  out.reserve(total);
  const double h = side / perDim;
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t r = idx;
    Vec x(d);
    for (int i = 0; i < d; ++i) {
      const auto k = static_cast<double>(r % static_cast<std::size_t>(perDim));
      r /= static_cast<std::size_t>(perDim);
      x[i] = center[i] - 0.5 * side + (k + 0.5) * h;
    }
    out.push_back(wrap(x));
  }
  return out;
}

/// Additive-recurrence low-discrepancy cloud (generalized golden ratio) on the same kind of cube.
inline std::vector<Vec> quasi_random_samples(int d, std::size_t count, const Vec& center, double side,
                                             std::uint64_t seed = 1) {
  double phi = 2.0;
  for (int it = 0; it < 64; ++it) phi = std::pow(1.0 + phi, 1.0 / (d + 1));
  Vec step(d), start(d);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int i = 0; i < d; ++i) {
    step[i] = std::fmod(1.0 / std::pow(phi, i + 1), 1.0);
    start[i] = U(rng);
  }
  std::vector<Vec> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Vec x(d);
    for (int i = 0; i < d; ++i) {
      const double u = std::fmod(start[i] + static_cast<double>(k + 1) * step[i], 1.0);
      x[i] = center[i] + side * (u - 0.5);
    }
    out.push_back(wrap(x));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orbit cache and dynamical distance
// ---------------------------------------------------------------------------

/// Orbits x, g x, ..., g^H x of every sample, stored contiguously.
class OrbitTable {
 public:
  OrbitTable(const MapView& g, const std::vector<Vec>& samples, int horizon, int threads = 1)
      : d_(g.dim), h_(horizon), n_(samples.size()), data_(samples.size() * static_cast<std::size_t>(horizon + 1) * g.dim) {
    if (samples.empty()) throw Error(Errc::EmptySet, "sample set is empty");
    if (horizon < 0) throw Error(Errc::DimensionMismatch, "negative horizon");
    parallel_for(n_, threads, [&](std::size_t i) {
      Vec x = wrap(samples[i]);
      for (int k = 0;; ++k) {
        double* p = slot(i, k);
        for (int c = 0; c < d_; ++c) p[c] = x[c];
        if (k == h_) break;
        x = wrap(g.step(x));
      }
    });
  }

  [[nodiscard]] int dim() const { return d_; }
  [[nodiscard]] int horizon() const { return h_; }
  [[nodiscard]] std::size_t size() const { return n_; }
  [[nodiscard]] const double* at(std::size_t i, int k) const {
    return data_.data() + (i * static_cast<std::size_t>(h_ + 1) + static_cast<std::size_t>(k)) * d_;
  }
  [[nodiscard]] Vec point(std::size_t i, int k) const {
    Vec x(d_);
    for (int c = 0; c < d_; ++c) x[c] = at(i, k)[c];
    return x;
  }

  [[nodiscard]] double squared_distance(std::size_t i, std::size_t j, int k) const {
    const double* a = at(i, k);
    const double* b = at(j, k);
    double s = 0;
    for (int c = 0; c < d_; ++c) {
      double t = b[c] - a[c];
      t -= std::round(t);
      s += t * t;
    }
    return s;
  }

  /// True when max_{0<=k<n} d(g^k x_i, g^k x_j) <= eps. Latest times are checked first since
  /// they separate most.
  [[nodiscard]] bool within(std::size_t i, std::size_t j, int n, double eps) const {
    const double e2 = eps * eps;
    for (int k = n - 1; k >= 0; --k)
      if (squared_distance(i, j, k) > e2) return false;
    return true;
  }

  [[nodiscard]] double dynamical_distance(std::size_t i, std::size_t j, int n) const {
    double s = 0;
    for (int k = 0; k < n; ++k) s = std::max(s, squared_distance(i, j, k));
    return std::sqrt(s);
  }

 private:
  double* slot(std::size_t i, int k) {
    return data_.data() + (i * static_cast<std::size_t>(h_ + 1) + static_cast<std::size_t>(k)) * d_;
  }

  int d_, h_;
  std::size_t n_;
  std::vector<double> data_;
};

namespace detail {

/// Uniform cell grid of side >= eps at one time slice; neighbors of a cell are its 3^d block.
class CellIndex {
 public:
  CellIndex(int d, double eps) : d_(d), m_(std::max<long long>(1, static_cast<long long>(std::floor(1.0 / eps)))) {
    std::vector<long long> offs{0};
    for (int c = 0; c < d_; ++c) {
      std::vector<long long> next;
      for (long long o : offs)
        for (long long s = -1; s <= 1; ++s) next.push_back(o * 3 + (s + 1));
      offs.swap(next);
    }
    offsets_ = static_cast<int>(offs.size());
  }

  [[nodiscard]] long long key(const double* x, long long* coords = nullptr) const {
    long long k = 0;
    for (int c = d_ - 1; c >= 0; --c) {
      long long v = static_cast<long long>(std::floor(x[c] * static_cast<double>(m_)));
      v = ((v % m_) + m_) % m_;
      if (coords) coords[c] = v;
      k = k * m_ + v;
    }
    return k;
  }

  /// Distinct neighbor keys (wrap-around may fold offsets together when m < 3).
  void neighbors(const double* x, std::vector<long long>& out) const {
    long long base[8];
    (void)key(x, base);
    out.clear();
    for (int o = 0; o < offsets_; ++o) {
      int r = o;
      long long k = 0;
      long long shift[8];
      for (int c = 0; c < d_; ++c) {
        shift[c] = r % 3 - 1;
        r /= 3;
      }
      for (int c = d_ - 1; c >= 0; --c) {
        const long long v = (((base[c] + shift[c]) % m_) + m_) % m_;
        k = k * m_ + v;
      }
      out.push_back(k);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  }

 private:
  int d_;
  long long m_;
  int offsets_ = 1;
};

inline void require_cover_args(const OrbitTable& t, double eps, int n) {
  if (!(eps > 0)) throw Error(Errc::DimensionMismatch, "epsilon must be positive");
  if (n < 1 || n - 1 > t.horizon()) throw Error(Errc::DimensionMismatch, "horizon outside the cached orbit length");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Spanning and separated counts
// ---------------------------------------------------------------------------

/// Greedy cover by dynamical (eps, n)-balls in sample-index order; returns the number of balls.
inline long long spanning_count(const OrbitTable& t, double eps, int n) {
  detail::require_cover_args(t, eps, n);
  const std::size_t N = t.size();
  detail::CellIndex cells(t.dim(), eps);
  std::vector<std::pair<long long, std::uint32_t>> keyed(N);
  for (std::size_t i = 0; i < N; ++i) keyed[i] = {cells.key(t.at(i, n - 1)), static_cast<std::uint32_t>(i)};
  std::sort(keyed.begin(), keyed.end());
  std::vector<char> covered(N, 0);
  std::vector<long long> nb;
  long long balls = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (covered[i]) continue;
    ++balls;
    covered[i] = 1;
    cells.neighbors(t.at(i, n - 1), nb);
    for (long long k : nb) {
      auto it = std::lower_bound(keyed.begin(), keyed.end(), std::make_pair(k, std::uint32_t{0}));
      for (; it != keyed.end() && it->first == k; ++it) {
        const std::size_t j = it->second;
        if (!covered[j] && t.within(i, j, n, eps)) covered[j] = 1;
      }
    }
  }
  return balls;
}

/// Greedy maximal (eps, n)-separated subset in sample-index order; returns its size.
inline long long separated_count(const OrbitTable& t, double eps, int n) {
  detail::require_cover_args(t, eps, n);
  detail::CellIndex cells(t.dim(), eps);
  std::unordered_map<long long, std::vector<std::uint32_t>> accepted;
  std::vector<long long> nb;
  long long count = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    cells.neighbors(t.at(i, n - 1), nb);
    bool isolated = true;
    for (long long k : nb) {
      const auto it = accepted.find(k);
      if (it == accepted.end()) continue;
      for (std::uint32_t j : it->second)
        if (t.within(i, j, n, eps)) {
          isolated = false;
          break;
        }
      if (!isolated) break;
    }
    if (isolated) {
      accepted[cells.key(t.at(i, n - 1))].push_back(static_cast<std::uint32_t>(i));
      ++count;
    }
  }
  return count;
}

inline long long spanning_count(const MapView& g, double eps, int n, const std::vector<Vec>& Y, int threads = 1) {
  return spanning_count(OrbitTable(g, Y, std::max(n - 1, 0), threads), eps, n);
}
inline long long separated_count(const MapView& g, double eps, int n, const std::vector<Vec>& Y, int threads = 1) {
  return separated_count(OrbitTable(g, Y, std::max(n - 1, 0), threads), eps, n);
}

// ---------------------------------------------------------------------------
// Slope fitting
// ---------------------------------------------------------------------------

struct LineFit {
  double slope = 0, intercept = 0, r2 = 0;
};

/// Least squares y = slope x + intercept. R^2 is 1 for an exact (including constant) fit.
inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(Errc::FitFailure, "need at least two points to fit a slope");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0) || !std::isfinite(sxy) || !std::isfinite(syy)) throw Error(Errc::FitFailure, "degenerate slope fit");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - f.slope * x[i] - f.intercept;
    sse += r * r;
  }
  f.r2 = syy > 0 ? 1.0 - sse / syy : 1.0;
  return f;
}

/// Index of the first value kept after dropping the leading `discard` fraction of a window.
inline std::size_t fit_start(std::size_t count, double discard) {
  return static_cast<std::size_t>(std::floor(discard * static_cast<double>(count)));
}

// ---------------------------------------------------------------------------
// Topological entropy from patch-rescaled covers
// ---------------------------------------------------------------------------

/// A fixed finite sample set saturates once the number of dynamical balls reaches its size, so
/// each horizon n gets its own sample patch, shrunk until the raw count sits inside
/// [lowFraction, highFraction] * |Y|. The count is then rescaled to the whole torus by
/// (eps / side)^u, u the number of expanding directions.
struct EntropyOptions {
  int perDim = 0;                   // grid points per axis; 0 picks 512 for d = 2
  std::size_t cloudSize = 65536;    // quasi-random cloud size when no grid is used (d >= 3)
  double side = 0;                  // fixed patch side; 0 adapts per horizon
  std::optional<Vec> center;        // patch center; default is a seeded generic point
  double lowFraction = 1.0 / 64;
  double highFraction = 1.0 / 16;
  double fitDiscard = 0.25;
  int maxSearch = 40;
  int threads = 1;
  std::uint64_t seed = 7;
};

struct EntropyPoint {
  int n = 0;
  double side = 1;
  long long spanning = 0, separated = 0, separatedCoarse = 0;  // raw counts; coarse uses 2 eps
  double spanningEstimate = 0, separatedEstimate = 0;         // rescaled to the torus
  [[nodiscard]] bool sandwich() const { return separatedCoarse <= spanning && spanning <= separated; }
};

struct EntropySeries {
  double epsilon = 0;
  int unstableDim = 0;
  std::size_t sampleCount = 0;
  std::vector<EntropyPoint> points;
  int windowMin = 0, windowMax = 0;  // horizons used by the fit
  double slope = 0, intercept = 0, r2 = 0;
  double separatedSlope = 0;
  [[nodiscard]] bool sandwich_holds() const {
    return std::all_of(points.begin(), points.end(), [](const EntropyPoint& p) { return p.sandwich(); });
  }
};

namespace detail {

inline std::vector<Vec> patch_samples(int d, const EntropyOptions& opt, const Vec& center, double side) {
  const int perDim = opt.perDim > 0 ? opt.perDim : (d <= 2 ? 512 : 0);
  if (perDim > 0) return grid_samples(d, perDim, center, side);
  return quasi_random_samples(d, opt.cloudSize, center, side, opt.seed);
}

inline Vec default_center(int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Vec c(d);
  for (int i = 0; i < d; ++i) c[i] = U(rng);
  return c;
}

inline void fit_series(EntropySeries& s, double discard) {
  const std::size_t start = fit_start(s.points.size(), discard);
  std::vector<double> x, y, ys;
  for (std::size_t i = start; i < s.points.size(); ++i) {
    x.push_back(s.points[i].n);
    y.push_back(std::log(s.points[i].spanningEstimate));
    ys.push_back(std::log(s.points[i].separatedEstimate));
  }
  if (x.size() < 2) throw Error(Errc::FitFailure, "fit window holds fewer than two horizons");
  const LineFit f = fit_line(x, y);
  s.slope = f.slope;
  s.intercept = f.intercept;
  s.r2 = f.r2;
  s.separatedSlope = fit_line(x, ys).slope;
  s.windowMin = static_cast<int>(x.front());
  s.windowMax = static_cast<int>(x.back());
}

}  // namespace detail

inline EntropySeries estimate_entropy_series(const MapView& g, double eps, int nMin, int nMax,
                                             const EntropyOptions& opt = {}) {
  if (nMax - nMin + 1 < 8) throw Error(Errc::FitFailure, "horizon range needs at least 8 values");
  if (nMin < 1) throw Error(Errc::FitFailure, "horizons start at 1");
  const int d = g.dim;
  const int u = g.unstableDim;
  const Vec center = opt.center ? *opt.center : detail::default_center(d, opt.seed);
  const bool adaptive = opt.side <= 0 && u > 0;
  EntropySeries s;
  s.epsilon = eps;
  s.unstableDim = u;
  double side = opt.side > 0 ? opt.side : (u == 0 ? 1.0 : eps);
  double prevLog = std::numeric_limits<double>::quiet_NaN();
  for (int n = nMin; n <= nMax; ++n) {
    EntropyPoint p;
    p.n = n;
    std::optional<OrbitTable> table;
    for (int it = 0;; ++it) {
      const auto Y = detail::patch_samples(d, opt, center, side);
      table.emplace(g, Y, n - 1, opt.threads);
      const double N = static_cast<double>(Y.size());
      const long long c = spanning_count(*table, eps, n);
      const double lo = opt.lowFraction * N, hi = opt.highFraction * N;
      const bool inWindow = c >= lo && c <= hi;
      if (!adaptive || inWindow || (side >= 1.0 && c < lo)) {
        p.spanning = c;
        break;
      }
      if (it + 1 >= opt.maxSearch)
        throw Error(Errc::NotConverged, "patch search did not reach the count window at n = " + std::to_string(n));
      double factor = std::pow(std::sqrt(lo * hi) / std::max<double>(c, 1.0), 1.0 / u);
      if (c <= 1) factor = 16;
      if (c >= 0.5 * N) factor = 1.0 / 16;
      side = std::min(1.0, side * std::clamp(factor, 1.0 / 16, 16.0));
    }
    p.side = side;
    p.separated = separated_count(*table, eps, n);
    p.separatedCoarse = separated_count(*table, 2 * eps, n);
    const double scale = std::pow(eps / side, u);
    p.spanningEstimate = static_cast<double>(p.spanning) * scale;
    p.separatedEstimate = static_cast<double>(p.separated) * scale;
    s.sampleCount = table->size();
    // Next horizon: shrink the patch by the growth just observed.
    const double logEst = std::log(p.spanningEstimate);
    if (adaptive && std::isfinite(prevLog)) side = std::min(1.0, side * std::exp(-(logEst - prevLog) / u));
    prevLog = logEst;
    s.points.push_back(p);
  }
  detail::fit_series(s, opt.fitDiscard);
  return s;
}

inline std::vector<EntropySeries> estimate_topological_entropy(const MapView& g, const std::vector<double>& epsList,
                                                               int nMin, int nMax, const EntropyOptions& opt = {}) {
  std::vector<EntropySeries> out;
  for (double e : epsList) out.push_back(estimate_entropy_series(g, e, nMin, nMax, opt));
  return out;
}

/// Slopes must not drop (beyond `noise`) as epsilon decreases.
inline bool entropy_monotone_in_epsilon(std::vector<EntropySeries> s, double noise = 0.05) {
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.epsilon > b.epsilon; });
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i].slope < s[i - 1].slope - noise) return false;
  return true;
}

/// Sum of log|lambda| over the expanding eigenvalues.
inline double exact_linear_entropy(const IMat& a) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(a.cast<double>()), false);
  double h = 0;
  for (int i = 0; i < a.rows(); ++i) {
    const double m = std::abs(es.eigenvalues()[i]);
    if (std::abs(m - 1.0) < 1e-12) throw Error(Errc::NotHyperbolic, "eigenvalue on the unit circle");
    if (m > 1) h += std::log(m);
  }
  return h;
}
inline double exact_linear_entropy(const ToralAutomorphism& a) { return exact_linear_entropy(a.matrix()); }

/// CSV with columns epsilon,n,spanning,separated (torus-rescaled counts).
inline void write_entropy_csv(std::ostream& os, const std::vector<EntropySeries>& series) {
  os << "epsilon,n,spanning,separated\n";
  char buf[160];
  for (const auto& s : series)
    for (const auto& p : s.points) {
      std::snprintf(buf, sizeof buf, "%.17g,%d,%.17g,%.17g\n", s.epsilon, p.n, p.spanningEstimate, p.separatedEstimate);
      os << buf;
    }
}

// ---------------------------------------------------------------------------
// Empirical measures and Katok entropy
// ---------------------------------------------------------------------------

struct EmpiricalMeasure {
  std::vector<Vec> atoms;
  std::vector<double> weights;

  [[nodiscard]] std::size_t size() const { return atoms.size(); }
  void validate() const {
    if (atoms.empty()) throw Error(Errc::EmptySet, "measure has no atoms");
    if (atoms.size() != weights.size()) throw Error(Errc::DimensionMismatch, "atom and weight counts differ");
    double s = 0, carry = 0;  // compensated sum
    for (double w : weights) {
      if (!(w > 0)) throw Error(Errc::InvalidConfig, "weights must be positive");
      const double y = w - carry;
      const double t = s + y;
      carry = (t - s) - y;
      s = t;
    }
    if (std::abs(s - 1.0) > 1e-12) throw Error(Errc::InvalidConfig, "weights must sum to 1");
  }
};

inline EmpiricalMeasure uniform_measure(std::vector<Vec> atoms) {
  EmpiricalMeasure m;
  m.weights.assign(atoms.size(), atoms.empty() ? 0.0 : 1.0 / static_cast<double>(atoms.size()));
  m.atoms = std::move(atoms);
  return m;
}

inline EmpiricalMeasure point_mass(const Vec& x) { return uniform_measure({wrap(x)}); }

/// Uniform weights on x_b, ..., x_{b+length-1} with x_{k+1} = g(x_k) and b = burnIn.
inline EmpiricalMeasure orbit_measure(const MapView& g, Vec x, std::size_t length, std::size_t burnIn = 100) {
  for (std::size_t k = 0; k < burnIn; ++k) x = wrap(g.step(x));
  std::vector<Vec> atoms;
  atoms.reserve(length);
  for (std::size_t k = 0; k < length; ++k) {
    atoms.push_back(x);
    x = wrap(g.step(x));
  }
  return uniform_measure(std::move(atoms));
}

inline EmpiricalMeasure push_forward(const EmpiricalMeasure& mu, const StepFn& f) {
  EmpiricalMeasure out;
  out.weights = mu.weights;
  out.atoms.reserve(mu.size());
  for (const auto& a : mu.atoms) out.atoms.push_back(wrap(f(a)));
  return out;
}

/// Weight of the atoms within r of any of the centers.
inline double mass_near(const EmpiricalMeasure& mu, const std::vector<Vec>& centers, double r) {
  double m = 0;
  for (std::size_t i = 0; i < mu.size(); ++i)
    for (const auto& c : centers)
      if (torus_distance(mu.atoms[i], c) < r) {
        m += mu.weights[i];
        break;
      }
  return m;
}

/// Greedy (index order) number of dynamical (eps, n)-balls until the covered weight reaches
/// `fraction`.
inline long long katok_count(const OrbitTable& t, const std::vector<double>& weights, double eps, int n,
                             double fraction = 0.5) {
  detail::require_cover_args(t, eps, n);
  const std::size_t N = t.size();
  detail::CellIndex cells(t.dim(), eps);
  std::vector<std::pair<long long, std::uint32_t>> keyed(N);
  for (std::size_t i = 0; i < N; ++i) keyed[i] = {cells.key(t.at(i, n - 1)), static_cast<std::uint32_t>(i)};
  std::sort(keyed.begin(), keyed.end());
  std::vector<char> covered(N, 0);
  std::vector<long long> nb;
  long long balls = 0;
  double mass = 0;
  for (std::size_t i = 0; i < N && mass < fraction; ++i) {
    if (covered[i]) continue;
    ++balls;
    covered[i] = 1;
    mass += weights[i];
    cells.neighbors(t.at(i, n - 1), nb);
    for (long long k : nb) {
      auto it = std::lower_bound(keyed.begin(), keyed.end(), std::make_pair(k, std::uint32_t{0}));
      for (; it != keyed.end() && it->first == k; ++it) {
        const std::size_t j = it->second;
        if (!covered[j] && t.within(i, j, n, eps)) {
          covered[j] = 1;
          mass += weights[j];
        }
      }
    }
  }
  return balls;
}

struct KatokOptions {
  double fraction = 0.5;
  double fitDiscard = 0.25;
  int threads = 1;
};

/// Katok counts for n in [nMin, nMax]; raw counts are stored in both spanning fields.
inline EntropySeries estimate_measure_entropy_katok(const MapView& g, const EmpiricalMeasure& mu, double eps, int nMin,
                                                    int nMax, const KatokOptions& opt = {}) {
  mu.validate();
  if (nMin < 1 || nMax < nMin) throw Error(Errc::FitFailure, "empty horizon range");
  const OrbitTable t(g, mu.atoms, nMax - 1, opt.threads);
  EntropySeries s;
  s.epsilon = eps;
  s.unstableDim = g.unstableDim;
  s.sampleCount = mu.size();
  for (int n = nMin; n <= nMax; ++n) {
    EntropyPoint p;
    p.n = n;
    p.spanning = p.separated = katok_count(t, mu.weights, eps, n, opt.fraction);
    p.separatedCoarse = p.spanning;
    p.spanningEstimate = p.separatedEstimate = static_cast<double>(p.spanning);
    s.points.push_back(p);
  }
  detail::fit_series(s, opt.fitDiscard);
  return s;
}

// ---------------------------------------------------------------------------
// Non-concentration and entropy decrease
// ---------------------------------------------------------------------------

struct NonConcentrationEntry {
  double entropy = 0;
  double mass = 0;  // weight within r of the centers
  bool qualifies = false;
  bool violates = false;
};

struct NonConcentrationReport {
  double h0 = 0, eta = 0, radius = 0;
  std::vector<NonConcentrationEntry> entries;
  int qualifying = 0, violations = 0;
  double maxQualifyingMass = 0;
  [[nodiscard]] bool pass() const { return violations == 0; }
};

/// Measures whose entropy estimate exceeds h0 must put less than eta near the centers.
inline NonConcentrationReport check_non_concentration(const std::vector<EmpiricalMeasure>& measures,
                                                      const std::vector<double>& entropies,
                                                      const std::vector<Vec>& centers, double r, double h0,
                                                      double eta) {
  if (measures.size() != entropies.size())
    throw Error(Errc::DimensionMismatch, "every measure needs an entropy estimate");
  NonConcentrationReport rep;
  rep.h0 = h0;
  rep.eta = eta;
  rep.radius = r;
  for (std::size_t i = 0; i < measures.size(); ++i) {
    NonConcentrationEntry e;
    e.entropy = entropies[i];
    e.mass = mass_near(measures[i], centers, r);
    e.qualifies = e.entropy > h0;
    e.violates = e.qualifies && !(e.mass < eta);
    if (e.qualifies) {
      ++rep.qualifying;
      rep.maxQualifyingMass = std::max(rep.maxQualifyingMass, e.mass);
    }
    if (e.violates) ++rep.violations;
    rep.entries.push_back(e);
  }
  return rep;
}

struct EntropyDecrease {
  double hModel = 0, hPerturbed = 0, bound = 0;
  [[nodiscard]] bool pass() const { return hModel >= bound; }
};

/// h(model, pushed measure) >= h(perturbed, measure) - d gamma - slack.
inline EntropyDecrease check_entropy_decrease(double hModel, double hPerturbed, int d, double gamma,
                                              double slack = 0.1) {
  return {hModel, hPerturbed, hPerturbed - d * gamma - slack};
}

// ---------------------------------------------------------------------------
// Local (tail) entropy
// ---------------------------------------------------------------------------

struct LocalEntropyOptions {
  int perDim = 0;  // samples per eigen-axis around each base point; 0 picks 64 (d = 2) or 10
  double fitDiscard = 0.25;
  int threads = 1;
};

struct LocalEntropyReport {
  double value = 0;
  std::vector<double> slopes;           // per base point (0 when the ball is a singleton sample)
  std::vector<std::size_t> ballSizes;   // samples retained in each horizon-m ball
};

/// Samples an eigen-aligned box around each base point sized to the horizon-m dynamical ball,
/// keeps the samples that stay eps-close for m steps, and fits the growth of (eps/8, n) covers
/// of that set.
inline LocalEntropyReport estimate_local_entropy(const DeformedMap& g, double eps, const std::vector<Vec>& bases, int m,
                                                 int nMin, int nMax, const LocalEntropyOptions& opt = {}) {
  if (m < nMax) throw Error(Errc::FitFailure, "inner horizon must be at least the largest n");
  const int d = g.dim();
  const auto& sd = g.base().spectral();
  const int per = opt.perDim > 0 ? opt.perDim : (d <= 2 ? 64 : 10);
  const MapView view = map_view(g);
  Vec extent(d);
  for (int i = 0; i < d; ++i) {
    const double lam = std::abs(sd.eigenvalues[i]);
    extent[i] = lam > 1 ? eps * std::pow(lam, -(m - 1)) : eps;
  }
  LocalEntropyReport rep;
  for (const auto& x : bases) {
    std::vector<Vec> cloud{wrap(x)};
    const auto unit = grid_samples(d, per, Vec::Constant(d, 0.5), 1.0);
    for (const auto& u : unit) {
      const Vec c = (u - Vec::Constant(d, 0.5)) * 2.0;
      cloud.push_back(wrap(x + sd.vectors * extent.cwiseProduct(c)));
    }
    const OrbitTable t(view, cloud, m - 1, opt.threads);
    std::vector<Vec> ball;
    for (std::size_t j = 0; j < t.size(); ++j)
      if (t.within(0, j, m, eps)) ball.push_back(t.point(j, 0));
    rep.ballSizes.push_back(ball.size());
    if (ball.size() < 2) {
      rep.slopes.push_back(0.0);
      continue;
    }
    const OrbitTable tb(view, ball, nMax - 1, opt.threads);
    std::vector<double> xs, ys;
    for (int n = nMin; n <= nMax; ++n) {
      xs.push_back(n);
      ys.push_back(std::log(static_cast<double>(spanning_count(tb, eps / 8, n))));
    }
    const std::size_t start = fit_start(xs.size(), opt.fitDiscard);
    const LineFit f = fit_line({xs.begin() + static_cast<long>(start), xs.end()},
                               {ys.begin() + static_cast<long>(start), ys.end()});
    rep.slopes.push_back(f.slope);
  }
  rep.value = 0;
  for (double s : rep.slopes) rep.value = std::max(rep.value, s);
  return rep;
}

// ---------------------------------------------------------------------------
// Periodic orbit growth
// ---------------------------------------------------------------------------

struct PeriodicRow {
  int n = 0;
  long long linearCount = 0;        // |det(A^n - I)|
  long long attempted = 0, converged = 0;
  bool enumerated = false;          // every linear periodic point was continued
  double estimatedCount = 0;        // converged, or scaled sample fraction
};

struct PeriodicGrowthReport {
  std::vector<PeriodicRow> rows;
  double slope = 0, r2 = 0;
  double linearEntropy = 0;
};

struct PeriodicOptions {
  std::size_t enumerateLimit = 200000;
  std::size_t sampleSize = 2000;
  double captureRadius = 1e-3;  // continued point must stay this close to its linear seed
  double tol = 1e-12;
  double fitDiscard = 0.25;
  int threads = 1;
  std::uint64_t seed = 61;
};

/// Continues every period-n point of the base automorphism (or a uniform sample of them) to a
/// period-n point of g by Newton on the n-fold composition.
inline PeriodicGrowthReport periodic_growth(const DeformedMap& g, int nMax, const PeriodicOptions& opt = {}) {
  if (nMax < 2) throw Error(Errc::FitFailure, "need at least two periods");
  PeriodicGrowthReport rep;
  rep.linearEntropy = g.base().spectral().entropy();
  std::mt19937_64 rng(opt.seed);
  for (int n = 1; n <= nMax; ++n) {
    PeriodicRow row;
    row.n = n;
    const IMat m = int_pow(g.base().matrix(), n) - int_identity(g.dim());
    const PeriodicLattice lat(m);
    row.linearCount = static_cast<long long>(lat.count());
    row.enumerated = static_cast<std::size_t>(row.linearCount) <= opt.enumerateLimit;
    std::vector<i128> idx;
    if (row.enumerated) {
      for (long long i = 0; i < row.linearCount; ++i) idx.push_back(i);
    } else {
      std::uniform_int_distribution<long long> pick(0, row.linearCount - 1);
      for (std::size_t i = 0; i < opt.sampleSize; ++i) idx.push_back(pick(rng));
    }
    std::vector<char> ok(idx.size(), 0);
    parallel_for(idx.size(), opt.threads, [&](std::size_t i) {
      const Vec seed = lat.point(idx[i]);
      const auto z = newton_fixed_point(g, seed, n, opt.tol);
      ok[i] = z && torus_distance(*z, seed) <= opt.captureRadius;
    });
    row.attempted = static_cast<long long>(idx.size());
    row.converged = std::count(ok.begin(), ok.end(), 1);
    row.estimatedCount = row.enumerated ? static_cast<double>(row.converged)
                                        : static_cast<double>(row.linearCount) * static_cast<double>(row.converged) /
                                              static_cast<double>(row.attempted);
    rep.rows.push_back(row);
  }
  std::vector<double> xs, ys;
  for (std::size_t i = fit_start(rep.rows.size(), opt.fitDiscard); i < rep.rows.size(); ++i)
    if (const auto& r = rep.rows[i]; r.estimatedCount > 0) {
      xs.push_back(r.n);
      ys.push_back(std::log(r.estimatedCount));
    }
  const LineFit f = fit_line(xs, ys);
  rep.slope = f.slope;
  rep.r2 = f.r2;
  return rep;
}

}  // namespace forge
