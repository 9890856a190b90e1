#pragma once

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "forge/bv_builder.hpp"
#include "forge/cones.hpp"
#include "forge/deformation.hpp"
#include "forge/experiment_config.hpp"
#include "forge/serialize.hpp"
#include "forge/shadowing.hpp"

namespace forge {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run plumbing
// ---------------------------------------------------------------------------

/// Independent stream seeds from the run seed (splitmix64 finalizer).
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct RunContext {
  ExperimentConfig config;
  fs::path out;
  std::string configHash;
  std::string configText;
};

/// Creates the output directory and writes the resolved config to config.json. Each command also
/// keeps its own <command>_config.json copy; report hashes are taken over exactly those bytes.
inline RunContext open_run(const ExperimentConfig& cfg, const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(Errc::IoError, "cannot create " + out.string() + ": " + ec.message());
  RunContext ctx{cfg, out, {}, dump_json(config_to_json(cfg))};
  write_file((out / "config.json").string(), ctx.configText);
  ctx.configHash = sha256_hex(ctx.configText);
  return ctx;
}

inline RunReport start_report(const RunContext& ctx, std::string command) {
  RunReport r;
  r.command = std::move(command);
  r.seed = ctx.config.seed;
  r.threads = ctx.config.threads;
  r.configHash = ctx.configHash;
  const std::string copy = r.command + "_config.json";
  write_file((ctx.out / copy).string(), ctx.configText);
  r.artifacts.push_back(copy);
  return r;
}

inline void finish_report(const RunContext& ctx, RunReport& r) {
  const auto path = ctx.out / (r.command + "_report.json");
  r.artifacts.push_back(path.filename().string());
  write_file(path.string(), dump_json(report_to_json(r)));
}

inline ToralAutomorphism resolve_base(const ExperimentConfig& cfg) {
  if (cfg.matrix.inlineMatrix) return ToralAutomorphism(*cfg.matrix.inlineMatrix);
  return find_bv_matrix(cfg.matrix.searchBudget, cfg.matrix.family);
}

inline ParameterLedger resolve_ledger(const ToralAutomorphism& A, const ExperimentConfig& cfg) {
  try {
    return choose_parameters(A, cfg.supports, cfg.ledger);
  } catch (const Error& e) {
    throw Error(e.code(), "parameter ledger: " + e.detail());
  }
}

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

/// Fixed-width human summary of a report.
inline std::string format_table(const RunReport& r) {
  std::ostringstream os;
  os << r.command << "  (seed " << r.seed << ", config " << r.configHash.substr(0, 12);
  if (!r.mapHash.empty()) os << ", map " << r.mapHash.substr(0, 12);
  os << ")\n";
  std::size_t w = 5;
  for (const auto& c : r.checks) w = std::max(w, c.name.size());
  os << std::left << std::setw(static_cast<int>(w)) << "check" << "  result  margin\n";
  for (const auto& c : r.checks)
    os << std::left << std::setw(static_cast<int>(w)) << c.name << "  " << (c.pass ? "PASS  " : "FAIL  ") << "  "
       << fmt(c.margin) << "\n";
  os << (r.pass() ? "all checks passed\n" : "some checks failed\n");
  return os.str();
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

inline Json side_summary(const SideReport& s) {
  return Json{{"label", s.label},
              {"center", to_json(s.center)},
              {"a0", s.a0},
              {"a1", s.a1},
              {"eigenAtA0", s.eigenAtA0},
              {"b0", s.b0},
              {"b1", s.b1},
              {"discriminantAtB0", s.discAtB0},
              {"discriminantAtB1", s.discAtB1},
              {"eigenAtB1", {s.eigenAtB1.real(), s.eigenAtB1.imag()}},
              {"offset", s.offset},
              {"fixedPlus", to_json(s.fixedPlus)},
              {"fixedMinus", to_json(s.fixedMinus)},
              {"fixedInChartAtA1", s.fixedInChartAtA1},
              {"stableIndexCenter", s.indexCenter},
              {"stableIndexPlus", s.indexPlus},
              {"stableIndexMinus", s.indexMinus},
              {"alphaBound", s.blocks.alphaBound}};
}

struct BuildOutcome {
  DeformedMap map;
  ParameterLedger ledger;
  std::optional<BvBuild> bv;
};

/// The map the config describes. Zero amplitude off the 4-torus yields the base automorphism.
inline BuildOutcome build_map(const ExperimentConfig& cfg) {
  const ToralAutomorphism A = resolve_base(cfg);
  BuildOutcome out;
  out.ledger = resolve_ledger(A, cfg);
  if (cfg.stages.amplitude == 0 && A.dim() != 4) {
    out.map = DeformedMap(A);
    return out;
  }
  out.bv = build_bv_map(A, out.ledger, cfg.stages);
  out.map = out.bv->map;
  return out;
}

inline RunReport cmd_build(const RunContext& ctx) {
  RunReport r = start_report(ctx, "build");
  BuildOutcome b;
  {
    Stopwatch sw(r, "build");
    b = build_map(ctx.config);
  }
  const auto mapPath = ctx.out / "map.json";
  save_map(mapPath.string(), b.map, &b.ledger);
  r.mapFile = mapPath.filename().string();
  r.mapHash = file_sha256(mapPath.string());
  r.artifacts.push_back(r.mapFile);

  const auto& A = b.map.base();
  const auto& sd = A.spectral();
  Json ev = Json::array();
  for (double e : sd.eigenvalues) ev.push_back(e);
  r.summary["base"] = to_json(A.matrix());
  r.summary["eigenvalues"] = ev;
  r.summary["topologicalEntropy"] = sd.entropy();
  r.summary["linear"] = b.map.is_linear();
  r.summary["supports"] = static_cast<int>(b.map.groups().size());
  r.summary["ledger"] = ledger_to_json(b.ledger);

  double minSlack = std::numeric_limits<double>::infinity();
  for (const auto& c : b.ledger.constraints) minSlack = std::min(minSlack, c.slack);
  r.add("ledger feasible", b.ledger.feasible(), minSlack);

  if (b.bv && ctx.config.stages.amplitude > 0) {
    const auto& bv = *b.bv;
    r.summary["fixedPoints"] = {{"p", to_json(bv.p)}, {"q", to_json(bv.q)}, {"r", to_json(bv.r)}, {"s", to_json(bv.s)}};
    r.summary["q"] = side_summary(bv.qSide);
    if (ctx.config.stages.mirrored) r.summary["p"] = side_summary(bv.pSide);
    r.summary["stableIndexS"] = bv.indexS;
    if (bv.tangency)
      r.summary["tangency"] = {{"found", bv.tangency->found}, {"angle", bv.tangency->angle}, {"gap", bv.tangency->gap}};
    const auto& q = bv.qSide;
    r.add("pitchfork eigenvalue crossing |lambda(a0) - 1| < 1e-8", std::abs(q.eigenAtA0 - 1) < 1e-8,
          1e-8 - std::abs(q.eigenAtA0 - 1));
    r.add("three fixed points in the chart at a1", q.fixedInChartAtA1 == 3, q.fixedInChartAtA1 == 3 ? 1.0 : -1.0,
          {{"count", q.fixedInChartAtA1}});
    r.add("complex contracting block at b1", q.discAtB1 < 0, -q.discAtB1);
    r.add("stable indices of q and s differ", q.indexCenter != bv.indexS, std::abs(q.indexCenter - bv.indexS),
          {{"q", q.indexCenter}, {"s", bv.indexS}});
  }
  finish_report(ctx, r);
  return r;
}

// ---------------------------------------------------------------------------
// Map loading for the analysis commands
// ---------------------------------------------------------------------------

struct LoadedMap {
  DeformedMap map;
  ParameterLedger ledger;
  std::string path, hash;
};

/// Loads `mapPath` (default: <out>/map.json, built from the config when absent).
inline LoadedMap load_run_map(const RunContext& ctx, const std::string& mapPath = {}) {
  fs::path p = mapPath.empty() ? ctx.out / "map.json" : fs::path(mapPath);
  if (mapPath.empty() && !fs::exists(p)) (void)cmd_build(ctx);
  if (!fs::exists(p)) throw Error(Errc::IoError, "map file " + p.string() + " does not exist");
  LoadedMap lm;
  auto doc = load_map(p.string());
  lm.map = std::move(doc.map);
  lm.ledger = doc.ledger ? *doc.ledger : resolve_ledger(lm.map.base(), ctx.config);
  lm.path = p.string();
  lm.hash = file_sha256(p.string());
  return lm;
}

inline void attach_map(RunReport& r, const LoadedMap& lm) {
  r.mapFile = lm.path;
  r.mapHash = lm.hash;
}

inline std::vector<Vec> support_centers(const DeformedMap& g) {
  std::vector<Vec> c;
  for (const auto* gr : g.groups()) c.push_back(gr->center);
  return c;
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

inline RunReport cmd_check(const RunContext& ctx, const std::string& mapPath = {}) {
  RunReport r = start_report(ctx, "check");
  const LoadedMap lm = load_run_map(ctx, mapPath);
  attach_map(r, lm);
  const auto& cfg = ctx.config;
  const auto& k = cfg.check;
  const auto& g = lm.map;
  const auto& L = lm.ledger;
  const auto& sd = g.base().spectral();
  const DeformedMap f(g.base());
  const auto cones = make_cones(sd, L.alpha);
  const auto centers = support_centers(g);

  {
    Stopwatch sw(r, "sparseness");
    try {
      const auto rep = check_sparse_deformation(f, g, L.eps, cfg.supports, k.sparsenessSamples,
                                                static_cast<unsigned>(sub_seed(cfg.seed, 1)));
      r.add("(H1) sparse deformation", rep.pass, L.eps - std::max(rep.c1DistanceOutside, rep.radius),
            {{"c1DistanceOutside", rep.c1DistanceOutside},
             {"supportRadius", rep.radius},
             {"minCenterDistance", detail::finite_or_text(rep.minPairwiseCenterDistance)},
             {"supports", rep.centers.size()},
             {"samples", rep.samples}});
    } catch (const Error& e) {
      r.add("(H1) sparse deformation", false, -1, {{"error", e.what()}});
    }
  }
  {
    Stopwatch sw(r, "cones");
    ConeCheckOptions o;
    o.samples = k.coneSamples;
    o.vectorsPerPoint = k.coneVectorsPerPoint;
    o.seed = static_cast<unsigned>(sub_seed(cfg.seed, 2));
    const auto rep = check_cone_invariance(g, cones, L.Lambda, o);
    Json d{{"forwardMargin", detail::finite_or_text(rep.forwardMargin)},
           {"expansionMargin", detail::finite_or_text(rep.expansionMargin)},
           {"backwardMargin", detail::finite_or_text(rep.backwardMargin)},
           {"insideForwardMargin", detail::finite_or_text(rep.insideForwardMargin)},
           {"insideBackwardMargin", detail::finite_or_text(rep.insideBackwardMargin)},
           {"samples", rep.samples},
           {"insideSamples", rep.insideSamples},
           {"alpha", L.alpha},
           {"Lambda", L.Lambda}};
    // Off the supports: invariance and expansion. Inside: invariance only (expansion may drop there).
    const bool inside = rep.insideForwardMargin >= 0 && rep.insideBackwardMargin >= 0;
    const bool ok = rep.pass && inside;
    if (!rep.pass) {
      if (rep.witnessPoint) d["witnessPoint"] = to_json(*rep.witnessPoint);
      if (rep.witnessVector) d["witnessVector"] = to_json(*rep.witnessVector);
      d["witnessKind"] = rep.witnessKind;
    } else if (!inside && rep.insideWitnessPoint) {
      d["witnessPoint"] = to_json(*rep.insideWitnessPoint);
      d["witnessKind"] = rep.insideWitnessKind + " (inside supports)";
    }
    const double m = std::min({rep.forwardMargin, rep.expansionMargin, rep.backwardMargin, rep.insideForwardMargin,
                               rep.insideBackwardMargin});
    r.add("(H2) cone invariance", ok, m, d);
  }
  {
    Stopwatch sw(r, "domination");
    const auto rep = check_respects_domination(g, cones, L.rho, L.Lambda, k.dominationSamples,
                                               static_cast<unsigned>(sub_seed(cfg.seed, 3)));
    const double thr = L.threshold();
    r.add("(H2) respects domination", rep.pass, rep.minRatioMargin,
          {{"minRatioQuotient", detail::finite_or_text(rep.minRatioQuotient)},
           {"unstableConeMargin", detail::finite_or_text(rep.unstableConeMargin)},
           {"stableConeMargin", detail::finite_or_text(rep.stableConeMargin)},
           {"samples", rep.samples},
           {"rho", L.rho}});
    r.add("Lambda above (eps^(1/2)+2eps)/(eps^(1/2)-2eps)", L.Lambda > thr, L.Lambda - thr,
          {{"Lambda", L.Lambda}, {"threshold", thr}});
  }
  {
    Stopwatch sw(r, "near_hyperbolicity");
    NearHyperbolicityOptions o;
    o.samples = k.nearHyperbolicSamples;
    o.horizon = k.nearHyperbolicHorizon;
    o.seed = static_cast<unsigned>(sub_seed(cfg.seed, 4));
    o.extraPoints = centers;
    const auto rep = check_gamma_near_hyperbolic(g, L.gamma, k.nearHyperbolicC, o);
    Json d{{"gamma", L.gamma},
           {"C", k.nearHyperbolicC},
           {"horizon", o.horizon},
           {"orbits", rep.orbits},
           {"maxStableGrowthRate", detail::finite_or_text(rep.maxStableGrowthRate)},
           {"minUnstableGrowthRate", detail::finite_or_text(rep.minUnstableGrowthRate)}};
    if (rep.witness) d["witness"] = to_json(*rep.witness);
    r.add("(H3) gamma-near hyperbolicity", rep.pass, std::min(rep.worstUnstableSlack, rep.worstStableSlack), d);
  }
  {
    Stopwatch sw(r, "splitting");
    std::mt19937_64 rng(sub_seed(cfg.seed, 5));
    std::vector<Vec> pts = centers;
    for (int i = 0; i < k.splittingPoints; ++i) pts.push_back(sample_point(g, rng, i, i % 2 == 1));
    int worstL = 0;
    double worstConv = 0;
    std::string error;
    for (const auto& x : pts) {
      try {
        const auto sp = estimate_dominated_splitting(g, x, k.splittingLength);
        worstL = std::max(worstL, sp.dominationExponent);
        worstConv = std::max(worstConv, sp.convergence);
      } catch (const Error& e) {
        error = e.what();
      }
    }
    Json d{{"points", pts.size()}, {"maxDominationExponent", worstL}, {"maxConvergence", worstConv}};
    if (!error.empty()) d["error"] = error;
    r.add("dominated splitting detected", error.empty(), error.empty() ? 1.0 / worstL : -1.0, d);
  }
  {
    Stopwatch sw(r, "expansivity");
    AlmostExpansivityOptions o;
    o.offSupportMargin = L.eps;
    o.seed = static_cast<unsigned>(sub_seed(cfg.seed, 6));
    const double eps0 = L.K0 * L.eps;
    const auto rep = check_almost_expansivity(g, eps0, k.expansivityPairs, k.expansivityHorizon, o);
    const double thr = (1 - L.etaMass) * std::log(L.Lambda) - L.etaMass * L.gamma - k.expansivitySlack;
    const double frac = rep.fraction_at_least(thr);
    r.add("almost expansivity (>= 95% separate at rate)", frac >= 0.95, frac - 0.95,
          {{"eps0", eps0},
           {"rateThreshold", thr},
           {"fraction", frac},
           {"pairs", rep.pairs.size()},
           {"nonSeparating", rep.nonSeparating},
           {"minRate", detail::finite_or_text(rep.minRate)},
           {"medianRate", rep.medianRate}});
  }
  finish_report(ctx, r);
  return r;
}

}  // namespace forge
