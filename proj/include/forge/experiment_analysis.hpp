#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "forge/entropy.hpp"
#include "forge/experiment.hpp"
#include "forge/foliation.hpp"
#include "forge/shadowing.hpp"

namespace forge {

// ---------------------------------------------------------------------------
// shadow
// ---------------------------------------------------------------------------

inline ShadowOptions shadow_options(const ExperimentConfig& cfg) {
  ShadowOptions o;
  o.resolution = cfg.shadow.resolution;
  o.tol = cfg.shadow.tol;
  o.maxTerms = cfg.shadow.maxTerms;
  o.refineSteps = cfg.shadow.refineSteps;
  o.testResolution = cfg.shadow.testResolution;
  o.supportTests = cfg.shadow.supportTests;
  o.threads = cfg.threads;
  o.seed = static_cast<unsigned>(sub_seed(cfg.seed, 10));
  return o;
}

/// Solves for pi, reusing a checkpointed grid keyed by the map hash and the grid-shaping options.
inline SemiConjugacy semiconjugacy_for(const RunContext& ctx, const LoadedMap& lm, bool* reused = nullptr) {
  const auto o = shadow_options(ctx.config);
  if (reused) *reused = false;
  if (!ctx.config.shadow.checkpoint) return solve_semiconjugacy(lm.map, o);
  const std::string key = lm.hash + "|" + std::to_string(o.resolution) + "|" + fmt(o.tol, 17) + "|" +
                          std::to_string(o.maxTerms) + "|" + std::to_string(o.refineSteps);
  const fs::path dir = ctx.out / "cache";
  const fs::path file = dir / ("shadow-" + sha256_hex(key).substr(0, 24) + ".grd");
  if (fs::exists(file)) {
    try {
      auto sc = resume_semiconjugacy(file.string(), lm.map, o);
      if (reused) *reused = true;
      return sc;
    } catch (const Error&) {
      // Stale or foreign checkpoint: recompute below.
    }
  }
  auto sc = solve_semiconjugacy(lm.map, o);
  fs::create_directories(dir);
  save_displacement_grid(sc, file.string());
  return sc;
}

inline RunReport cmd_shadow(const RunContext& ctx, const std::string& mapPath = {}) {
  RunReport r = start_report(ctx, "shadow");
  const LoadedMap lm = load_run_map(ctx, mapPath);
  attach_map(r, lm);
  const auto& cfg = ctx.config;
  const auto& g = lm.map;
  SemiConjugacy sc;
  bool reused = false;
  try {
    Stopwatch sw(r, "solve");
    sc = semiconjugacy_for(ctx, lm, &reused);
  } catch (const Error& e) {
    r.add("semiconjugacy solved", false, -1, {{"error", e.what()}});
    finish_report(ctx, r);
    return r;
  }
  const auto gridPath = ctx.out / "shadow_grid.bin";
  save_displacement_grid(sc, gridPath.string());
  r.artifacts.push_back(gridPath.filename().string());

  const double bound = sc.constant() * sc.c0();
  std::vector<double> diam;
  double maxDiam = 0, maxRes = 0;
  {
    Stopwatch sw(r, "fibers");
    std::vector<Vec> pts = support_centers(g);
    std::mt19937_64 rng(sub_seed(cfg.seed, 11));
    for (int i = 0; static_cast<int>(pts.size()) < cfg.shadow.fiberProbes; ++i)
      pts.push_back(sample_point(g, rng, i, i % 4 != 3));
    pts.resize(static_cast<std::size_t>(std::max(0, cfg.shadow.fiberProbes)));
    diam.assign(pts.size(), 0.0);
    std::vector<double> res(pts.size(), 0.0);
    FiberProbeOptions fo;
    fo.seed = static_cast<unsigned>(sub_seed(cfg.seed, 12));
    parallel_for(pts.size(), cfg.threads, [&](std::size_t i) {
      const auto fp = fiber_probe(sc, sc.pi(pts[i]), fo);
      diam[i] = fp.diameter;
      res[i] = fp.maxResidual;
    });
    for (std::size_t i = 0; i < pts.size(); ++i) {
      maxDiam = std::max(maxDiam, diam[i]);
      maxRes = std::max(maxRes, res[i]);
    }
  }
  const double k0Empirical = sc.c0() > 0 ? 2 * std::max(maxDiam, sc.sup_displacement()) / sc.c0() : 0.0;
  r.summary = {{"defect", sc.defect()},
               {"supDisplacement", sc.sup_displacement()},
               {"c0Distance", sc.c0()},
               {"seriesConstant", sc.constant()},
               {"K0Ledger", lm.ledger.K0},
               {"K0Empirical", k0Empirical},
               {"resolution", sc.identity() ? 1 : sc.resolution()},
               {"maxTermsUsed", sc.max_terms_used()},
               {"checkpointReused", reused},
               {"fiberProbes", diam.size()},
               {"maxFiberDiameter", maxDiam},
               {"maxFiberResidual", maxRes},
               {"grid", gridPath.filename().string()}};
  r.add("equivariance defect below tol", sc.defect() < cfg.shadow.tol, cfg.shadow.tol - sc.defect());
  r.add("sup |u| <= K0 d_C0", sc.sup_displacement() <= bound, bound - sc.sup_displacement(),
        {{"K0", sc.constant()}, {"c0", sc.c0()}});
  r.add("fiber diameters <= K0 d_C0", maxDiam <= bound, bound - maxDiam, {{"probes", diam.size()}});
  if (g.is_linear()) {
    bool exact = sc.identity();
    std::mt19937_64 rng(sub_seed(cfg.seed, 13));
    for (int i = 0; i < 100 && exact; ++i) {
      const Vec x = sample_point(g, rng, i, false);
      exact = sc.pi(x) == x;
    }
    r.add("pi is the identity for the linear map", exact && sc.sup_displacement() == 0.0,
          -sc.sup_displacement());
  }
  finish_report(ctx, r);
  return r;
}

// ---------------------------------------------------------------------------
// foliate
// ---------------------------------------------------------------------------

inline RunReport cmd_foliate(const RunContext& ctx, const std::string& mapPath = {}) {
  RunReport r = start_report(ctx, "foliate");
  const LoadedMap lm = load_run_map(ctx, mapPath);
  attach_map(r, lm);
  const auto& cfg = ctx.config;
  const auto& fc = cfg.foliation;
  const auto& g = lm.map;
  const auto& L = lm.ledger;
  const int d = g.dim();
  LeafOptions opt;
  opt.resolution = fc.resolution;
  opt.rho = L.rho;
  opt.threads = cfg.threads;

  std::vector<Vec> pts = support_centers(g);
  std::mt19937_64 rng(sub_seed(cfg.seed, 20));
  for (int i = 0; i < 2; ++i) pts.push_back(sample_point(g, rng, i, false));

  const auto csvPath = ctx.out / "foliation_disks.csv";
  std::ofstream csv(csvPath);
  if (!csv) throw Error(Errc::IoError, "cannot open " + csvPath.string());
  const int kdim = [&] {
    const auto f = leaf_frame(g.base().spectral(), LeafKind::CenterUnstable);
    return static_cast<int>(f.plane.cols());
  }();
  // Cs disks have the complementary plane dimension; pad to a common width.
  const int width = std::max(kdim, d - kdim);
  csv << "point,kind";
  for (int i = 0; i < width; ++i) csv << ",a" << i;
  for (int i = 0; i < width; ++i) csv << ",h" << i;
  csv << "\n";

  double maxSlope = 0, minInner = std::numeric_limits<double>::infinity(), maxEquiv = 0, maxSeedGap = 0,
         maxCauchy = 0, maxHeightLinear = 0;
  int cauchyFitted = 0;
  int equivCompared = std::numeric_limits<int>::max();
  std::string error;
  {
    Stopwatch sw(r, "leaves");
    for (std::size_t pi = 0; pi < pts.size(); ++pi) {
      const Vec& x = pts[pi];
      for (auto kind : {LeafKind::CenterUnstable, LeafKind::CenterStable}) {
        const bool cu = kind == LeafKind::CenterUnstable;
        try {
          const auto res = compute_leaf_disk(g, x, fc.iterations, kind, opt);
          for (const auto& s : res.steps) {
            maxSlope = std::max(maxSlope, s.maxSlope);
            minInner = std::min(minInner, s.innerRadius);
          }
          const auto& D = res.disk;
          maxHeightLinear = std::max(maxHeightLinear, D.max_height());
          char buf[64];
          for (std::size_t n = 0; n < D.node_count(); ++n) {
            csv << pi << ',' << leaf_kind_name(kind);
            const Vec a = D.node_coords(n), h = D.node_height(n);
            for (int i = 0; i < width; ++i) {
              if (i < a.size()) {
                std::snprintf(buf, sizeof buf, "%.17g", a[i]);
                csv << ',' << buf;
              } else {
                csv << ',';
              }
            }
            for (int i = 0; i < width; ++i) {
              if (i < h.size()) {
                std::snprintf(buf, sizeof buf, "%.17g", h[i]);
                csv << ',' << buf;
              } else {
                csv << ',';
              }
            }
            csv << "\n";
          }
          // Seed independence: a tilted seed inside the cone converges to the same disk.
          LeafOptions tilted = opt;
          const int kk = D.plane_dim(), mm = d - kk;
          tilted.seedSlope = Mat::Zero(mm, kk);
          for (int i = 0; i < std::min(mm, kk); ++i) tilted.seedSlope(i, i) = 0.5 * L.alpha;
          const auto alt = compute_leaf_disk(g, x, fc.iterations, kind, tilted).disk;
          maxSeedGap = std::max(maxSeedGap, disk_distance(D, alt));
          // Equivariance: the image of the disk at x sits inside the disk at its image.
          const Vec y = cu ? g.eval(x) : g.eval_inverse(x);
          const auto next = compute_leaf_disk(g, y, fc.iterations, kind, opt).disk;
          const auto eq = check_equivariance(g, D, next, L.rho);
          maxEquiv = std::max(maxEquiv, eq.mismatch);
          equivCompared = std::min(equivCompared, eq.compared);
          // A flat seed is often already at the limit, so the rate is measured from the tilted seed.
          // Sequences that reach rounding after one step carry no rate; only fitted ones count.
          const auto ch = check_cauchy(g, x, kind, 1, fc.cauchyMax, tilted);
          if (ch.fitPoints >= 2) {
            maxCauchy = std::max(maxCauchy, ch.ratio);
            ++cauchyFitted;
          }
        } catch (const Error& e) {
          error = e.what();
        }
      }
    }
  }
  r.artifacts.push_back(csvPath.filename().string());
  const double ratioBudget = 1 / L.Lambda + 0.1;
  r.summary = {{"points", pts.size()},
               {"iterations", fc.iterations},
               {"maxSlope", maxSlope},
               {"minInnerRadius", detail::finite_or_text(minInner)},
               {"maxSeedDistance", maxSeedGap},
               {"maxEquivarianceMismatch", maxEquiv},
               {"cauchyRatio", maxCauchy},
               {"cauchyFittedSequences", cauchyFitted},
               {"disks", csvPath.filename().string()}};
  if (!error.empty()) r.summary["error"] = error;
  r.add("leaf computation completed", error.empty(), error.empty() ? 1.0 : -1.0);
  r.add("step slopes within alpha", maxSlope <= L.alpha, L.alpha - maxSlope);
  r.add("step inner radius >= rho", minInner >= L.rho - 1e-12, minInner - L.rho);
  const bool cauchyMeasured = cauchyFitted > 0;
  r.add("Cauchy ratio <= 1/Lambda + 0.1", cauchyMeasured && maxCauchy <= ratioBudget,
        cauchyMeasured ? ratioBudget - maxCauchy : -1.0, {{"fittedSequences", cauchyFitted}});
  r.add("seed independence", maxSeedGap < fc.seedDistanceTol, fc.seedDistanceTol - maxSeedGap);
  r.add("equivariance mismatch", maxEquiv < fc.equivarianceTol && equivCompared > 0, fc.equivarianceTol - maxEquiv,
        {{"minCompared", equivCompared}});
  if (g.is_linear()) r.add("disks are affine planes", maxHeightLinear < 1e-10, 1e-10 - maxHeightLinear);
  finish_report(ctx, r);
  return r;
}

// ---------------------------------------------------------------------------
// entropy
// ---------------------------------------------------------------------------

inline Json series_summary(const EntropySeries& s) {
  return Json{{"epsilon", s.epsilon},
              {"slope", s.slope},
              {"r2", s.r2},
              {"separatedSlope", s.separatedSlope},
              {"windowMin", s.windowMin},
              {"windowMax", s.windowMax},
              {"samples", s.sampleCount},
              {"sandwich", s.sandwich_holds()}};
}

inline RunReport cmd_entropy(const RunContext& ctx, const std::string& mapPath = {}) {
  RunReport r = start_report(ctx, "entropy");
  const LoadedMap lm = load_run_map(ctx, mapPath);
  attach_map(r, lm);
  const auto& cfg = ctx.config;
  const auto& ec = cfg.entropy;
  const auto& g = lm.map;
  const auto& L = lm.ledger;
  const int d = g.dim();
  const DeformedMap f(g.base());

  std::vector<double> eps = ec.epsilons;
  if (eps.empty()) eps = {d <= 2 ? 1.0 / 64 : 1.0 / 16};
  const int nMin = ec.nMin > 0 ? ec.nMin : (d <= 2 ? 8 : 4);
  const int nMax = ec.nMax > 0 ? ec.nMax : (d <= 2 ? 24 : 12);
  EntropyOptions eo;
  eo.cloudSize = ec.cloudSize;
  eo.perDim = ec.perDim;
  eo.fitDiscard = ec.fitDiscard;
  eo.threads = cfg.threads;
  eo.seed = sub_seed(cfg.seed, 30);

  std::vector<EntropySeries> sg, sf;
  {
    Stopwatch sw(r, "topological");
    sg = estimate_topological_entropy(map_view(g), eps, nMin, nMax, eo);
    sf = g.is_linear() ? sg : estimate_topological_entropy(map_view(f), eps, nMin, nMax, eo);
  }
  const auto csvPath = ctx.out / "entropy.csv";
  const auto csvLinear = ctx.out / "entropy_linear.csv";
  {
    std::ofstream os(csvPath);
    write_entropy_csv(os, sg);
    std::ofstream ol(csvLinear);
    write_entropy_csv(ol, sf);
    if (!os || !ol) throw Error(Errc::IoError, "cannot write entropy CSV files");
  }
  r.artifacts.push_back(csvPath.filename().string());
  r.artifacts.push_back(csvLinear.filename().string());

  const double exact = exact_linear_entropy(g.base());
  Json js = Json::array(), jf = Json::array();
  bool sandwich = true;
  double worstGap = 0;
  for (std::size_t i = 0; i < sg.size(); ++i) {
    js.push_back(series_summary(sg[i]));
    jf.push_back(series_summary(sf[i]));
    sandwich = sandwich && sg[i].sandwich_holds() && sf[i].sandwich_holds();
    worstGap = std::max(worstGap, std::abs(sg[i].slope - sf[i].slope));
  }
  r.summary["map"] = js;
  r.summary["linear"] = jf;
  r.summary["exactLinearEntropy"] = exact;
  r.summary["note"] = "long-orbit empirical measures are used as proxies for ergodic measures";
  r.add("cover/separated sandwich on every run", sandwich, sandwich ? 1.0 : -1.0);
  r.add("estimates of the map and its linear model agree", worstGap <= ec.agreementTol, ec.agreementTol - worstGap);
  if (sg.size() > 1)
    r.add("entropy nondecreasing as epsilon shrinks", entropy_monotone_in_epsilon(sg, ec.monotoneNoise), 0.0);

  // Orbit measures: Katok entropy and non-concentration near the supports.
  const MapView gv = map_view(g), fv = map_view(f);
  std::vector<EmpiricalMeasure> measures;
  std::vector<double> hk;
  KatokOptions ko;
  ko.fitDiscard = ec.fitDiscard;
  ko.threads = cfg.threads;
  if (ec.measures > 0) {
    Stopwatch sw(r, "katok");
    std::mt19937_64 rng(sub_seed(cfg.seed, 31));
    std::uniform_real_distribution<double> U(0, 1);
    for (int i = 0; i < ec.measures; ++i) {
      Vec x(d);
      for (int c = 0; c < d; ++c) x[c] = U(rng);
      measures.push_back(orbit_measure(gv, x, ec.orbitLength));
      hk.push_back(estimate_measure_entropy_katok(gv, measures.back(), ec.katokEps, ec.katokNMin, ec.katokNMax, ko).slope);
    }
    const auto centers = support_centers(g);
    const auto nc = check_non_concentration(measures, hk, centers.empty() ? std::vector<Vec>{} : centers, L.r0, L.h0,
                                            L.etaMass);
    Json e = Json::array();
    for (const auto& x : nc.entries) e.push_back({{"entropy", x.entropy}, {"mass", x.mass}, {"qualifies", x.qualifies}});
    r.summary["nonConcentration"] = {{"h0", nc.h0},
                                     {"eta", nc.eta},
                                     {"radius", nc.radius},
                                     {"qualifying", nc.qualifying},
                                     {"maxQualifyingMass", nc.maxQualifyingMass},
                                     {"entries", e}};
    r.add("non-concentration: mu(B_r0) < eta for entropy > h0", nc.pass(), L.etaMass - nc.maxQualifyingMass,
          {{"violations", nc.violations}});
    const int need = std::min(20, ec.measures);
    r.add("qualifying orbit measures sampled", nc.qualifying >= need, nc.qualifying - need);
  }
  if (ec.decreaseMeasures > 0 && !measures.empty()) {
    Stopwatch sw(r, "entropy_decrease");
    const SemiConjugacy sc = semiconjugacy_for(ctx, lm);
    double worst = std::numeric_limits<double>::infinity();
    Json e = Json::array();
    const int m = std::min<int>(ec.decreaseMeasures, static_cast<int>(measures.size()));
    for (int i = 0; i < m; ++i) {
      const auto nu = push_forward(measures[static_cast<std::size_t>(i)], [&](const Vec& x) { return sc.pi(x); });
      const double hf = estimate_measure_entropy_katok(fv, nu, ec.katokEps, ec.katokNMin, ec.katokNMax, ko).slope;
      const auto dec = check_entropy_decrease(hf, hk[static_cast<std::size_t>(i)], d, L.gamma, ec.decreaseSlack);
      worst = std::min(worst, dec.hModel - dec.bound);
      e.push_back({{"hModel", dec.hModel}, {"hMap", dec.hPerturbed}, {"bound", dec.bound}});
    }
    r.summary["entropyDecrease"] = e;
    r.add("h(f_A, pi_* mu) >= h(g, mu) - d gamma - slack", worst >= 0, worst, {{"measures", m}});
  }
  finish_report(ctx, r);
  return r;
}

// ---------------------------------------------------------------------------
// periodic
// ---------------------------------------------------------------------------

inline RunReport cmd_periodic(const RunContext& ctx, const std::string& mapPath = {}) {
  RunReport r = start_report(ctx, "periodic");
  const LoadedMap lm = load_run_map(ctx, mapPath);
  attach_map(r, lm);
  const auto& cfg = ctx.config;
  const auto& pc = cfg.periodic;
  PeriodicOptions o;
  o.enumerateLimit = pc.enumerateLimit;
  o.sampleSize = pc.sampleSize;
  o.captureRadius = pc.captureRadius;
  o.threads = cfg.threads;
  o.seed = sub_seed(cfg.seed, 40);
  PeriodicGrowthReport rep;
  {
    Stopwatch sw(r, "continuation");
    rep = periodic_growth(lm.map, pc.nMax, o);
  }
  const auto csvPath = ctx.out / "periodic.csv";
  {
    std::ofstream os(csvPath);
    os << "n,linear_count,attempted,converged,enumerated,estimated_count\n";
    char buf[200];
    for (const auto& row : rep.rows) {
      std::snprintf(buf, sizeof buf, "%d,%lld,%lld,%lld,%d,%.17g\n", row.n, row.linearCount, row.attempted,
                    row.converged, row.enumerated ? 1 : 0, row.estimatedCount);
      os << buf;
    }
    if (!os) throw Error(Errc::IoError, "cannot write " + csvPath.string());
  }
  r.artifacts.push_back(csvPath.filename().string());
  r.summary = {{"slope", rep.slope}, {"r2", rep.r2}, {"linearEntropy", rep.linearEntropy}, {"rows", rep.rows.size()}};
  const double rel = std::abs(rep.slope - rep.linearEntropy) / rep.linearEntropy;
  r.add("periodic growth rate matches linear entropy", rel <= pc.slopeTol, pc.slopeTol - rel);
  const bool fixedAll = !rep.rows.empty() && rep.rows[0].converged == rep.rows[0].linearCount;
  r.add("every fixed point of the base continues", fixedAll, fixedAll ? 1.0 : -1.0);
  finish_report(ctx, r);
  return r;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> c{"build", "check", "shadow", "foliate", "entropy", "periodic"};
  return c;
}

struct ConsolidatedReport {
  std::string text;
  std::vector<std::string> missing;
  bool pass = false;
};

/// Reads every <command>_report.json in runDir; missing stages are listed as gaps. Writes
/// summary.txt and checks.csv (command, check, pass, margin) into runDir.
inline ConsolidatedReport cmd_report(const fs::path& runDir) {
  if (!fs::is_directory(runDir)) throw Error(Errc::IoError, runDir.string() + " is not a directory");
  std::vector<RunReport> found;
  ConsolidatedReport out;
  for (const auto& c : pipeline_commands()) {
    const auto p = runDir / (c + "_report.json");
    if (fs::exists(p))
      found.push_back(report_from_json(parse_json(read_file(p.string()), p.string())));
    else
      out.missing.push_back(c);
  }
  if (found.empty()) throw Error(Errc::IoError, "no reports found in " + runDir.string());
  std::ostringstream os, csv;
  csv << "command,check,pass,margin\n";
  out.pass = true;
  for (const auto& r : found) {
    os << format_table(r) << "\n";
    out.pass = out.pass && r.pass();
    char buf[64];
    for (const auto& c : r.checks) {
      std::snprintf(buf, sizeof buf, "%.17g", c.margin);
      std::string name = c.name;
      std::replace(name.begin(), name.end(), ',', ';');
      csv << r.command << ',' << name << ',' << (c.pass ? 1 : 0) << ',' << buf << "\n";
    }
  }
  for (const auto& m : out.missing) os << m << "  [missing: no report in this directory]\n";
  os << (out.missing.empty() ? "" : "pipeline incomplete\n") << (out.pass ? "all recorded checks passed\n"
                                                                          : "some recorded checks failed\n");
  out.text = os.str();
  write_file((runDir / "summary.txt").string(), out.text);
  write_file((runDir / "checks.csv").string(), csv.str());
  return out;
}

}  // namespace forge
