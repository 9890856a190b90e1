// Acceptance run: one PASS/FAIL line per criterion, exit status 0 iff all pass.
//
//   forge_acceptance [run-directory]
//
// Tolerances are fixed here, not read from defaults, so a config change cannot move them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "forge/forge.hpp"

using namespace forge;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  std::function<Outcome()> run;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

/// Finds a named check; a missing check is a failure, never a silent pass.
const CheckOutcome* find_check(const RunReport& r, const std::string& name) {
  for (const auto& c : r.checks)
    if (c.name == name) return &c;
  return nullptr;
}

bool require(const RunReport& r, const std::string& name, std::ostringstream& why) {
  const auto* c = find_check(r, name);
  if (!c) {
    why << " [missing check '" << name << "']";
    return false;
  }
  if (!c->pass) why << " [" << r.command << ": '" << name << "' failed, margin " << num(c->margin) << "]";
  return c->pass;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Mat central_difference(const std::function<Vec(const Vec&)>& f, const Vec& x, double h) {
  const int d = static_cast<int>(x.size());
  Mat j(d, d);
  for (int k = 0; k < d; ++k) {
    Vec a = x, b = x;
    a[k] += h;
    b[k] -= h;
    j.col(k) = (f(a) - f(b)) / (2 * h);
  }
  return j;
}

ExperimentConfig pinned_config() {
  ExperimentConfig c;
  c.seed = 7;
  c.threads = 1;
  c.supports = 3;
  c.check.nearHyperbolicHorizon = 50;
  c.check.nearHyperbolicC = 2;
  c.check.expansivitySlack = 0.05;
  c.shadow.tol = 1e-3;
  c.shadow.fiberProbes = 100;
  c.foliation.iterations = 40;
  c.foliation.seedDistanceTol = 1e-6;
  c.foliation.equivarianceTol = 1e-5;
  c.entropy.agreementTol = 0.15;
  c.entropy.decreaseMeasures = 10;
  c.entropy.decreaseSlack = 0.1;
  c.entropy.measures = 24;
  c.entropy.orbitLength = 20000;
  c.entropy.katokEps = 0.4;
  c.entropy.katokNMin = 1;
  c.entropy.katokNMax = 4;
  return c;
}

// State shared between criteria; each stage runs once.
struct Run {
  fs::path root;
  bool sandwichCat = false;

  std::optional<RunContext> bvCtx, zeroCtx;
  std::optional<BuildOutcome> bvBuild;
  std::optional<RunReport> build, check, shadow, foliate, entropy;
  double bvBuildCheckSeconds = 0;

  const RunContext& bv() {
    if (!bvCtx) bvCtx = open_run(pinned_config(), root / "bv");
    return *bvCtx;
  }
  const RunReport& bv_build() {
    if (!build) {
      const auto t0 = std::chrono::steady_clock::now();
      build = cmd_build(bv());
      bvBuildCheckSeconds += seconds_since(t0);
    }
    return *build;
  }
  const RunReport& bv_check() {
    bv_build();
    if (!check) {
      const auto t0 = std::chrono::steady_clock::now();
      check = cmd_check(bv());
      bvBuildCheckSeconds += seconds_since(t0);
    }
    return *check;
  }
  const RunReport& bv_shadow() {
    bv_build();
    if (!shadow) shadow = cmd_shadow(bv());
    return *shadow;
  }
  const RunReport& bv_foliate() {
    bv_build();
    if (!foliate) foliate = cmd_foliate(bv());
    return *foliate;
  }
  const RunReport& bv_entropy() {
    bv_build();
    if (!entropy) entropy = cmd_entropy(bv());
    return *entropy;
  }
  const BvBuild& bv_construction() {
    if (!bvBuild) bvBuild = build_map(pinned_config());
    return *bvBuild->bv;
  }
};

Outcome linear_entropy_oracle(Run& run) {
  IMat cat(2, 2);
  cat << 2, 1, 1, 1;
  const double oracle = std::log((3 + std::sqrt(5.0)) / 2);
  EntropyOptions o;
  o.perDim = 512;
  o.threads = 1;
  const auto t0 = std::chrono::steady_clock::now();
  const auto s = estimate_topological_entropy(map_view(DeformedMap(ToralAutomorphism(cat))), {1.0 / 64}, 8, 24, o).front();
  const double secs = seconds_since(t0);
  run.sandwichCat = s.sandwich_holds();
  const double rel = std::abs(s.slope - oracle) / oracle;
  return {rel <= 0.15 && secs < 120, "slope " + num(s.slope) + " vs log((3+sqrt5)/2) = " + num(oracle) +
                                         ", rel err " + num(rel) + " (tol 0.15), " + num(secs) + " s (limit 120)"};
}

Outcome trivial_deformation(Run& run) {
  auto cfg = pinned_config();
  cfg.stages.amplitude = 0;
  cfg.shadow.fiberProbes = 8;
  run.zeroCtx = open_run(cfg, run.root / "zero");
  const auto& ctx = *run.zeroCtx;
  std::ostringstream why;
  bool ok = cmd_build(ctx).pass();
  const auto doc = load_map((ctx.out / "map.json").string());
  const DeformedMap& g = doc.map;
  ok = ok && g.is_linear();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(0, 1);
  double evalGap = 0;
  for (int i = 0; i < 1000; ++i) {
    Vec x(4);
    for (int c = 0; c < 4; ++c) x[c] = U(rng);
    evalGap = std::max(evalGap, torus_distance(g.eval(x), g.base().apply(x)));
  }
  ok = ok && evalGap == 0.0;
  const auto chk = cmd_check(ctx);
  for (const char* n : {"(H1) sparse deformation", "(H2) cone invariance", "(H2) respects domination",
                        "(H3) gamma-near hyperbolicity"})
    ok = require(chk, n, why) && ok;
  const auto sh = cmd_shadow(ctx);
  const double supU = sh.summary.at("supDisplacement").get<double>();
  ok = ok && supU < 1e-12 && require(sh, "pi is the identity for the linear map", why);
  const auto fo = cmd_foliate(ctx);
  ok = require(fo, "disks are affine planes", why) && ok;
  return {ok, "map == f_A (max eval gap " + num(evalGap) + "), sup|u| = " + num(supU) +
                  " (< 1e-12), H1-H3 and affine disks (1e-10)" + why.str()};
}

Outcome bv_integrity(Run& run) {
  const auto& b = run.bv_build();
  const auto& c = run.bv_check();
  std::ostringstream why;
  bool ok = require(b, "ledger feasible", why);
  for (const char* n : {"(H1) sparse deformation", "(H2) cone invariance", "(H2) respects domination",
                        "Lambda above (eps^(1/2)+2eps)/(eps^(1/2)-2eps)", "(H3) gamma-near hyperbolicity"})
    ok = require(c, n, why) && ok;
  const auto* cone = find_check(c, "(H2) cone invariance");
  const double coneMargin = cone ? cone->margin : -1;
  ok = ok && coneMargin > 0;
  ok = ok && run.bv_construction().ledger.N == 3;
  const double secs = run.bvBuildCheckSeconds;
  ok = ok && secs < 600;
  return {ok, "N = 3, cone margin " + num(coneMargin) + " (> 0), near-hyperbolic horizon 50 with C = 2, " + num(secs) +
                  " s (limit 600)" + why.str()};
}

Outcome bifurcations(Run& run) {
  const auto& b = run.bv_construction();
  const auto& q = b.qSide;
  const double crossing = std::abs(q.eigenAtA0 - 1);
  const bool ok = crossing < 1e-8 && q.fixedInChartAtA1 == 3 && q.discAtB1 < 0 && q.indexCenter != b.indexS;
  return {ok, "|lambda(a0) - 1| = " + num(crossing) + " (< 1e-8), fixed points in chart at a1: " +
                  std::to_string(q.fixedInChartAtA1) + " (== 3), discriminant at b1 " + num(q.discAtB1) +
                  " (< 0), stable indices q/s " + std::to_string(q.indexCenter) + "/" + std::to_string(b.indexS)};
}

Outcome shadowing(Run& run) {
  const auto& s = run.bv_shadow();
  std::ostringstream why;
  bool ok = true;
  for (const char* n : {"equivariance defect below tol", "sup |u| <= K0 d_C0", "fiber diameters <= K0 d_C0"})
    ok = require(s, n, why) && ok;
  const double defect = s.summary.at("defect").get<double>();
  const double supU = s.summary.at("supDisplacement").get<double>();
  const double c0 = s.summary.at("c0Distance").get<double>();
  const double k0 = s.summary.at("seriesConstant").get<double>();
  const double diam = s.summary.at("maxFiberDiameter").get<double>();
  const auto probes = s.summary.at("fiberProbes").get<std::size_t>();
  ok = ok && defect < 1e-3 && supU <= k0 * c0 && diam <= k0 * c0 && probes >= 100;
  // The converse: a genuine deformation has a nontrivial semiconjugacy.
  ok = ok && supU > 0;
  // Identity for the undeformed map (computed under criterion 2).
  bool identity = false;
  if (run.zeroCtx) {
    const auto z = report_from_json(parse_json(read_file((run.zeroCtx->out / "shadow_report.json").string()), "zero"));
    const auto* c = find_check(z, "pi is the identity for the linear map");
    identity = c && c->pass;
  }
  ok = ok && identity;
  return {ok, "defect " + num(defect) + " (< 1e-3), sup|u| " + num(supU) + ", max fiber diam " + num(diam) + " over " +
                  std::to_string(probes) + " probes, bound K0 d_C0 = " + num(k0 * c0) +
                  (identity ? ", pi = id for f_A" : ", pi = id for f_A NOT shown") + why.str()};
}

Outcome foliation(Run& run) {
  const auto& f = run.bv_foliate();
  std::ostringstream why;
  bool ok = true;
  for (const char* n : {"leaf computation completed", "step slopes within alpha", "step inner radius >= rho",
                        "Cauchy ratio <= 1/Lambda + 0.1", "seed independence", "equivariance mismatch"})
    ok = require(f, n, why) && ok;
  const double ratio = f.summary.at("cauchyRatio").get<double>();
  const double gap = f.summary.at("maxSeedDistance").get<double>();
  const double eq = f.summary.at("maxEquivarianceMismatch").get<double>();
  const int fitted = f.summary.at("cauchyFittedSequences").get<int>();
  const double Lambda = run.bv_construction().ledger.Lambda;
  ok = ok && fitted > 0 && ratio <= 1 / Lambda + 0.1 && gap < 1e-6 && eq < 1e-5;
  return {ok, "Cauchy ratio " + num(ratio) + " over " + std::to_string(fitted) + " fitted sequences (<= " +
                  num(1 / Lambda + 0.1) + "), seed gap " + num(gap) +
                  " (< 1e-6), equivariance " + num(eq) + " (< 1e-5), slopes <= alpha, inner radius >= rho" +
                  why.str()};
}

Outcome entropy_stability(Run& run) {
  const auto& e = run.bv_entropy();
  std::ostringstream why;
  bool ok = require(e, "estimates of the map and its linear model agree", why);
  ok = require(e, "h(f_A, pi_* mu) >= h(g, mu) - d gamma - slack", why) && ok;
  double gap = 0;
  const auto& m = e.summary.at("map");
  const auto& l = e.summary.at("linear");
  for (std::size_t i = 0; i < m.size(); ++i)
    gap = std::max(gap, std::abs(m[i].at("slope").get<double>() - l[i].at("slope").get<double>()));
  const auto& dec = e.summary.at("entropyDecrease");
  const double gamma = run.bv_construction().ledger.gamma;
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& x : dec)
    worst = std::min(worst, x.at("hModel").get<double>() - (x.at("hMap").get<double>() - 4 * gamma - 0.1));
  ok = ok && gap <= 0.15 && dec.size() == 10 && worst >= 0;
  return {ok, "slope gap " + num(gap) + " (<= 0.15), " + std::to_string(dec.size()) +
                  " pushed-forward measures, worst h(f_A) - (h(g) - 4 gamma - 0.1) = " + num(worst) + why.str()};
}

Outcome non_concentration(Run& run) {
  const auto& e = run.bv_entropy();
  std::ostringstream why;
  bool ok = require(e, "non-concentration: mu(B_r0) < eta for entropy > h0", why);
  const auto& nc = e.summary.at("nonConcentration");
  const int qualifying = nc.at("qualifying").get<int>();
  const double eta = nc.at("eta").get<double>();
  double worst = 0;
  for (const auto& x : nc.at("entries"))
    if (x.at("qualifies").get<bool>()) worst = std::max(worst, x.at("mass").get<double>());
  ok = ok && qualifying >= 20 && worst < eta;
  return {ok, std::to_string(qualifying) + " qualifying measures (>= 20), max mass near supports " + num(worst) +
                  " (< eta = " + num(eta) + "), r0 = " + num(nc.at("radius").get<double>()) +
                  ", h0 = " + num(nc.at("h0").get<double>()) + why.str()};
}

Outcome almost_expansivity(Run& run) {
  const auto& c = run.bv_check();
  std::ostringstream why;
  const bool ok = require(c, "almost expansivity (>= 95% separate at rate)", why);
  const auto* x = find_check(c, "almost expansivity (>= 95% separate at rate)");
  const double frac = x ? x->margin + 0.95 : 0;
  return {ok, "fraction separating at rate " + num(frac) + " (>= 0.95), slack 0.05" + why.str()};
}

Outcome numerical_kernels(Run& run) {
  const auto& g = run.bv_construction().map;
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> U(-1, 1);
  double roundTrip = 0, jacRel = 0, detGap = 0;
  int stages = 0;
  for (const auto* group : g.groups())
    for (const auto& s : group->stages) {
      if (s.time == 0.0) continue;
      ++stages;
      const int d = s.dim();
      // Central-difference step tied to the smallest cutoff feature of this stage.
      double feature = std::min(s.plane.outer - s.plane.inner, s.transverse.outer - s.transverse.inner);
      if (s.plane.inner > 0) feature = std::min(feature, s.plane.inner);
      if (s.transverse.inner > 0) feature = std::min(feature, s.transverse.inner);
      const double h = 1e-3 * feature;
      for (int i = 0; i < 300; ++i) {
        Vec z = s.offset;
        for (int k = 0; k < d; ++k) z[k] += U(rng) * (k < 2 ? s.plane.outer : s.transverse.outer);
        if (!s.in_support(z)) continue;
        Mat j;
        const Vec y = s.flow(z, +1, &j);
        roundTrip = std::max(roundTrip, (s.flow(y, -1) - z).norm());
        if (i % 10 == 0) {
          const Mat fd = central_difference([&](const Vec& w) { return s.flow(w, +1); }, z, h);
          jacRel = std::max(jacRel, (j - fd).norm() / j.norm());
        }
        if (s.field.volume_preserving()) detGap = std::max(detGap, std::abs(j.determinant() - 1));
      }
    }
  std::ostringstream why;
  bool sandwich = run.sandwichCat;
  if (!sandwich) why << " [cat-map entropy run broke the sandwich]";
  sandwich = require(run.bv_entropy(), "cover/separated sandwich on every run", why) && sandwich;
  const bool ok = stages > 0 && roundTrip < 1e-9 && jacRel < 1e-5 && detGap < 1e-6 && sandwich;
  return {ok, std::to_string(stages) + " stages: round trip " + num(roundTrip) + " (< 1e-9), Jacobian rel " +
                  num(jacRel) + " (< 1e-5), |det - 1| " + num(detGap) + " (< 1e-6), sandwich on every run" +
                  why.str()};
}

}  // namespace

int main(int argc, char** argv) {
  Run run;
  run.root = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance-run";
  fs::remove_all(run.root);
  fs::create_directories(run.root);

  const std::vector<Criterion> criteria{
      {1, "linear-model entropy oracle", [&] { return linear_entropy_oracle(run); }},
      {2, "trivial deformation returns f_A", [&] { return trivial_deformation(run); }},
      {3, "4-torus construction integrity", [&] { return bv_integrity(run); }},
      {4, "bifurcation bookkeeping", [&] { return bifurcations(run); }},
      {5, "shadowing", [&] { return shadowing(run); }},
      {6, "foliation by graph transform", [&] { return foliation(run); }},
      {7, "entropy stability", [&] { return entropy_stability(run); }},
      {8, "non-concentration", [&] { return non_concentration(run); }},
      {9, "almost expansivity", [&] { return almost_expansivity(run); }},
      {10, "numerical kernels", [&] { return numerical_kernels(run); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << c.id << "] " << c.title << ": " << o.detail << "  ("
              << num(seconds_since(t0)) << " s)" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
