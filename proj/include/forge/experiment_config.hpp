#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "forge/bv_builder.hpp"
#include "forge/serialize.hpp"

namespace forge {

inline constexpr int kConfigVersion = 1;

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct MatrixSource {
  std::optional<IMat> inlineMatrix;  // empty: run the matrix search
  std::size_t searchBudget = 0;
  BvFamily family = BvFamily::SymmetricSquare;
};

struct CheckSettings {
  int sparsenessSamples = 4000;
  int coneSamples = 4000;
  int coneVectorsPerPoint = 8;
  int dominationSamples = 2000;
  int nearHyperbolicSamples = 200;
  int nearHyperbolicHorizon = 50;
  double nearHyperbolicC = 2.0;
  int splittingPoints = 8;
  int splittingLength = 40;
  int expansivityPairs = 200;
  int expansivityHorizon = 60;
  double expansivitySlack = 0.05;
};

struct ShadowSettings {
  int resolution = 0;  // 0: 64 (d = 2) or 12 (d = 4)
  double tol = 1e-3;
  int maxTerms = 400;
  int refineSteps = 4;
  int testResolution = 8;
  int supportTests = 2000;
  int fiberProbes = 100;
  bool checkpoint = true;
};

struct FoliationSettings {
  int iterations = 40;
  int resolution = 33;
  int cauchyMax = 40;
  double seedDistanceTol = 1e-6;
  double equivarianceTol = 1e-5;
};

struct EntropySettings {
  std::vector<double> epsilons;  // empty: 2^-6 (d = 2) or 1/16 (d = 4)
  int nMin = 0, nMax = 0;        // 0: [8, 24] (d = 2) or [4, 12] (d = 4)
  std::size_t cloudSize = 32768;
  int perDim = 0;
  double fitDiscard = 0.25;
  double agreementTol = 0.15;
  double monotoneNoise = 0.05;
  // Katok experiments on orbit measures
  int measures = 24;
  std::size_t orbitLength = 20000;
  double katokEps = 0.4;
  int katokNMin = 1, katokNMax = 4;
  int decreaseMeasures = 10;
  double decreaseSlack = 0.1;
};

struct PeriodicSettings {
  int nMax = 8;
  std::size_t enumerateLimit = 200000;
  std::size_t sampleSize = 2000;
  double captureRadius = 1e-3;
  double slopeTol = 0.1;  // relative agreement with the linear entropy
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 7;
  int threads = 1;
  MatrixSource matrix;
  int supports = 3;  // N in the sparseness check
  LedgerOverrides ledger;
  BvStageConfig stages;
  CheckSettings check;
  ShadowSettings shadow;
  FoliationSettings foliation;
  EntropySettings entropy;
  PeriodicSettings periodic;
};

namespace detail {

inline void reject_unknown(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) bad(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) bad("unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad(where + "." + key + " must be a boolean");
    out = v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) bad(where + "." + key + " must be an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.get<long long>() < 0) bad(where + "." + key + " must be non-negative");
    }
    out = v.get<T>();
  } else {
    if (!v.is_number()) bad(where + "." + key + " must be a number");
    out = v.get<double>();
  }
}

inline void read_opt(const Json& j, const char* key, std::optional<double>& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number()) bad(where + "." + key + " must be a number");
  out = j.at(key).get<double>();
}

inline std::string family_name(BvFamily f) {
  return f == BvFamily::SymmetricSquare ? "symmetric_square" : "companion_power";
}

}  // namespace detail

/// Parses and validates a configuration document. Unknown keys, wrong types and out-of-range values
/// raise InvalidConfig naming the offending path.
inline ExperimentConfig config_from_json(const Json& j) {
  using detail::read;
  using detail::reject_unknown;
  ExperimentConfig c;
  reject_unknown(j,
                 {"version", "seed", "threads", "matrix", "supports", "ledger", "stages", "check", "shadow",
                  "foliation", "entropy", "periodic"},
                 "config");
  read(j, "version", c.version, "config");
  if (c.version != kConfigVersion) detail::bad("unsupported config version " + std::to_string(c.version));
  read(j, "seed", c.seed, "config");
  read(j, "threads", c.threads, "config");
  read(j, "supports", c.supports, "config");
  if (c.threads < 1) detail::bad("config.threads must be >= 1");
  if (c.supports < 1) detail::bad("config.supports must be >= 1");

  if (j.contains("matrix")) {
    const Json& m = j.at("matrix");
    if (m.is_array() || m.is_string()) {
      c.matrix.inlineMatrix = imat_from_json(m);
    } else {
      reject_unknown(m, {"search_budget", "family"}, "matrix");
      read(m, "search_budget", c.matrix.searchBudget, "matrix");
      if (m.contains("family")) {
        const auto f = m.at("family").get<std::string>();
        if (f == "symmetric_square")
          c.matrix.family = BvFamily::SymmetricSquare;
        else if (f == "companion_power")
          c.matrix.family = BvFamily::CompanionPower;
        else
          detail::bad("matrix.family must be symmetric_square or companion_power");
      }
    }
  }

  if (j.contains("ledger")) {
    const Json& l = j.at("ledger");
    reject_unknown(l, {"eps", "alpha", "gamma", "Lambda", "etaSpectral", "etaMass", "K0", "eps0", "R0", "r0", "h0", "tau2"},
                   "ledger");
    auto& o = c.ledger;
    detail::read_opt(l, "eps", o.eps, "ledger");
    detail::read_opt(l, "alpha", o.alpha, "ledger");
    detail::read_opt(l, "gamma", o.gamma, "ledger");
    detail::read_opt(l, "Lambda", o.Lambda, "ledger");
    detail::read_opt(l, "etaSpectral", o.etaSpectral, "ledger");
    detail::read_opt(l, "etaMass", o.etaMass, "ledger");
    detail::read_opt(l, "K0", o.K0, "ledger");
    detail::read_opt(l, "eps0", o.eps0, "ledger");
    detail::read_opt(l, "R0", o.R0, "ledger");
    detail::read_opt(l, "r0", o.r0, "ledger");
    detail::read_opt(l, "h0", o.h0, "ledger");
    detail::read_opt(l, "tau2", o.tau2, "ledger");
  }

  if (j.contains("stages")) {
    const Json& s = j.at("stages");
    const std::string w = "stages";
    reject_unknown(s,
                   {"amplitude", "saddleRate", "centerRate", "planeRadiusFraction", "transverseRadiusFraction",
                    "innerFraction", "transverseInnerFraction", "crossingExponent", "centerRadiusFraction",
                    "centerOvershoot", "mirrored", "conjugate", "enforceAlphaBound", "tangency", "blockSamples",
                    "tangencyConfig"},
                   w);
    auto& b = c.stages;
    read(s, "amplitude", b.amplitude, w);
    read(s, "saddleRate", b.saddleRate, w);
    read(s, "centerRate", b.centerRate, w);
    read(s, "planeRadiusFraction", b.planeRadiusFraction, w);
    read(s, "transverseRadiusFraction", b.transverseRadiusFraction, w);
    read(s, "innerFraction", b.innerFraction, w);
    read(s, "transverseInnerFraction", b.transverseInnerFraction, w);
    read(s, "crossingExponent", b.crossingExponent, w);
    read(s, "centerRadiusFraction", b.centerRadiusFraction, w);
    read(s, "centerOvershoot", b.centerOvershoot, w);
    read(s, "mirrored", b.mirrored, w);
    read(s, "conjugate", b.conjugate, w);
    read(s, "enforceAlphaBound", b.enforceAlphaBound, w);
    read(s, "tangency", b.tangency, w);
    read(s, "blockSamples", b.blockSamples, w);
    if (b.amplitude < 0) detail::bad("stages.amplitude must be >= 0");
    if (s.contains("tangencyConfig")) {
      const Json& t = s.at("tangencyConfig");
      const std::string tw = "stages.tangencyConfig";
      reject_unknown(t, {"tau", "rate", "time", "amplitude", "startFraction", "maxIterates", "angleTolerance"}, tw);
      auto& tc = b.tangencyConfig;
      read(t, "tau", tc.tau, tw);
      read(t, "rate", tc.rate, tw);
      read(t, "time", tc.time, tw);
      read(t, "amplitude", tc.amplitude, tw);
      read(t, "startFraction", tc.startFraction, tw);
      read(t, "maxIterates", tc.maxIterates, tw);
      read(t, "angleTolerance", tc.angleTolerance, tw);
    }
  }

  if (j.contains("check")) {
    const Json& s = j.at("check");
    const std::string w = "check";
    reject_unknown(s,
                   {"sparsenessSamples", "coneSamples", "coneVectorsPerPoint", "dominationSamples",
                    "nearHyperbolicSamples", "nearHyperbolicHorizon", "nearHyperbolicC", "splittingPoints",
                    "splittingLength", "expansivityPairs", "expansivityHorizon", "expansivitySlack"},
                   w);
    auto& k = c.check;
    read(s, "sparsenessSamples", k.sparsenessSamples, w);
    read(s, "coneSamples", k.coneSamples, w);
    read(s, "coneVectorsPerPoint", k.coneVectorsPerPoint, w);
    read(s, "dominationSamples", k.dominationSamples, w);
    read(s, "nearHyperbolicSamples", k.nearHyperbolicSamples, w);
    read(s, "nearHyperbolicHorizon", k.nearHyperbolicHorizon, w);
    read(s, "nearHyperbolicC", k.nearHyperbolicC, w);
    read(s, "splittingPoints", k.splittingPoints, w);
    read(s, "splittingLength", k.splittingLength, w);
    read(s, "expansivityPairs", k.expansivityPairs, w);
    read(s, "expansivityHorizon", k.expansivityHorizon, w);
    read(s, "expansivitySlack", k.expansivitySlack, w);
  }

  if (j.contains("shadow")) {
    const Json& s = j.at("shadow");
    const std::string w = "shadow";
    reject_unknown(s, {"resolution", "tol", "maxTerms", "refineSteps", "testResolution", "supportTests", "fiberProbes",
                       "checkpoint"},
                   w);
    auto& k = c.shadow;
    read(s, "resolution", k.resolution, w);
    read(s, "tol", k.tol, w);
    read(s, "maxTerms", k.maxTerms, w);
    read(s, "refineSteps", k.refineSteps, w);
    read(s, "testResolution", k.testResolution, w);
    read(s, "supportTests", k.supportTests, w);
    read(s, "fiberProbes", k.fiberProbes, w);
    read(s, "checkpoint", k.checkpoint, w);
    if (k.resolution < 0 || k.resolution == 1) detail::bad("shadow.resolution must be 0 or >= 2");
    if (!(k.tol > 0)) detail::bad("shadow.tol must be positive");
  }

  if (j.contains("foliation")) {
    const Json& s = j.at("foliation");
    const std::string w = "foliation";
    reject_unknown(s, {"iterations", "resolution", "cauchyMax", "seedDistanceTol", "equivarianceTol"}, w);
    auto& k = c.foliation;
    read(s, "iterations", k.iterations, w);
    read(s, "resolution", k.resolution, w);
    read(s, "cauchyMax", k.cauchyMax, w);
    read(s, "seedDistanceTol", k.seedDistanceTol, w);
    read(s, "equivarianceTol", k.equivarianceTol, w);
    if (k.iterations < 1 || k.resolution < 3) detail::bad("foliation.iterations >= 1 and resolution >= 3 required");
  }

  if (j.contains("entropy")) {
    const Json& s = j.at("entropy");
    const std::string w = "entropy";
    reject_unknown(s,
                   {"epsilons", "nMin", "nMax", "cloudSize", "perDim", "fitDiscard", "agreementTol", "monotoneNoise",
                    "measures", "orbitLength", "katokEps", "katokNMin", "katokNMax", "decreaseMeasures",
                    "decreaseSlack"},
                   w);
    auto& k = c.entropy;
    if (s.contains("epsilons")) {
      const Json& e = s.at("epsilons");
      // An empty list selects the dimension default.
      if (!e.is_array()) detail::bad("entropy.epsilons must be an array");
      for (const auto& v : e) {
        if (!v.is_number() || !(v.get<double>() > 0)) detail::bad("entropy.epsilons entries must be positive");
        k.epsilons.push_back(v.get<double>());
      }
    }
    read(s, "nMin", k.nMin, w);
    read(s, "nMax", k.nMax, w);
    read(s, "cloudSize", k.cloudSize, w);
    read(s, "perDim", k.perDim, w);
    read(s, "fitDiscard", k.fitDiscard, w);
    read(s, "agreementTol", k.agreementTol, w);
    read(s, "monotoneNoise", k.monotoneNoise, w);
    read(s, "measures", k.measures, w);
    read(s, "orbitLength", k.orbitLength, w);
    read(s, "katokEps", k.katokEps, w);
    read(s, "katokNMin", k.katokNMin, w);
    read(s, "katokNMax", k.katokNMax, w);
    read(s, "decreaseMeasures", k.decreaseMeasures, w);
    read(s, "decreaseSlack", k.decreaseSlack, w);
    if (k.nMin < 0 || k.nMax < 0 || (k.nMax > 0 && k.nMax < k.nMin)) detail::bad("entropy n range is empty");
  }

  if (j.contains("periodic")) {
    const Json& s = j.at("periodic");
    const std::string w = "periodic";
    reject_unknown(s, {"nMax", "enumerateLimit", "sampleSize", "captureRadius", "slopeTol"}, w);
    auto& k = c.periodic;
    read(s, "nMax", k.nMax, w);
    read(s, "enumerateLimit", k.enumerateLimit, w);
    read(s, "sampleSize", k.sampleSize, w);
    read(s, "captureRadius", k.captureRadius, w);
    read(s, "slopeTol", k.slopeTol, w);
    if (k.nMax < 2) detail::bad("periodic.nMax must be >= 2");
  }
  return c;
}

/// Fully resolved document: every knob written out, so the file alone reproduces the run.
inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["supports"] = c.supports;
  if (c.matrix.inlineMatrix)
    j["matrix"] = to_json(*c.matrix.inlineMatrix);
  else
    j["matrix"] = {{"search_budget", c.matrix.searchBudget}, {"family", detail::family_name(c.matrix.family)}};
  Json l = Json::object();
  const auto& o = c.ledger;
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) l[k] = *v;
  };
  put("eps", o.eps);
  put("alpha", o.alpha);
  put("gamma", o.gamma);
  put("Lambda", o.Lambda);
  put("etaSpectral", o.etaSpectral);
  put("etaMass", o.etaMass);
  put("K0", o.K0);
  put("eps0", o.eps0);
  put("R0", o.R0);
  put("r0", o.r0);
  put("h0", o.h0);
  put("tau2", o.tau2);
  j["ledger"] = l;
  const auto& b = c.stages;
  const auto& tc = b.tangencyConfig;
  j["stages"] = {{"amplitude", b.amplitude},
                 {"saddleRate", b.saddleRate},
                 {"centerRate", b.centerRate},
                 {"planeRadiusFraction", b.planeRadiusFraction},
                 {"transverseRadiusFraction", b.transverseRadiusFraction},
                 {"innerFraction", b.innerFraction},
                 {"transverseInnerFraction", b.transverseInnerFraction},
                 {"crossingExponent", b.crossingExponent},
                 {"centerRadiusFraction", b.centerRadiusFraction},
                 {"centerOvershoot", b.centerOvershoot},
                 {"mirrored", b.mirrored},
                 {"conjugate", b.conjugate},
                 {"enforceAlphaBound", b.enforceAlphaBound},
                 {"tangency", b.tangency},
                 {"blockSamples", b.blockSamples},
                 {"tangencyConfig",
                  {{"tau", tc.tau},
                   {"rate", tc.rate},
                   {"time", tc.time},
                   {"amplitude", tc.amplitude},
                   {"startFraction", tc.startFraction},
                   {"maxIterates", tc.maxIterates},
                   {"angleTolerance", tc.angleTolerance}}}};
  const auto& k = c.check;
  j["check"] = {{"sparsenessSamples", k.sparsenessSamples},
                {"coneSamples", k.coneSamples},
                {"coneVectorsPerPoint", k.coneVectorsPerPoint},
                {"dominationSamples", k.dominationSamples},
                {"nearHyperbolicSamples", k.nearHyperbolicSamples},
                {"nearHyperbolicHorizon", k.nearHyperbolicHorizon},
                {"nearHyperbolicC", k.nearHyperbolicC},
                {"splittingPoints", k.splittingPoints},
                {"splittingLength", k.splittingLength},
                {"expansivityPairs", k.expansivityPairs},
                {"expansivityHorizon", k.expansivityHorizon},
                {"expansivitySlack", k.expansivitySlack}};
  const auto& s = c.shadow;
  j["shadow"] = {{"resolution", s.resolution},         {"tol", s.tol},
                 {"maxTerms", s.maxTerms},             {"refineSteps", s.refineSteps},
                 {"testResolution", s.testResolution}, {"supportTests", s.supportTests},
                 {"fiberProbes", s.fiberProbes},       {"checkpoint", s.checkpoint}};
  const auto& f = c.foliation;
  j["foliation"] = {{"iterations", f.iterations},
                    {"resolution", f.resolution},
                    {"cauchyMax", f.cauchyMax},
                    {"seedDistanceTol", f.seedDistanceTol},
                    {"equivarianceTol", f.equivarianceTol}};
  const auto& e = c.entropy;
  j["entropy"] = {{"epsilons", e.epsilons},
                  {"nMin", e.nMin},
                  {"nMax", e.nMax},
                  {"cloudSize", e.cloudSize},
                  {"perDim", e.perDim},
                  {"fitDiscard", e.fitDiscard},
                  {"agreementTol", e.agreementTol},
                  {"monotoneNoise", e.monotoneNoise},
                  {"measures", e.measures},
                  {"orbitLength", e.orbitLength},
                  {"katokEps", e.katokEps},
                  {"katokNMin", e.katokNMin},
                  {"katokNMax", e.katokNMax},
                  {"decreaseMeasures", e.decreaseMeasures},
                  {"decreaseSlack", e.decreaseSlack}};
  const auto& p = c.periodic;
  j["periodic"] = {{"nMax", p.nMax},
                   {"enumerateLimit", p.enumerateLimit},
                   {"sampleSize", p.sampleSize},
                   {"captureRadius", p.captureRadius},
                   {"slopeTol", p.slopeTol}};
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  return config_from_json(parse_json(read_file(path), path));
}

// ---------------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------------

struct CheckOutcome {
  std::string name;
  bool pass = false;
  double margin = 0;  // positive when satisfied
  Json detail = Json::object();
};

struct RunReport {
  std::string command;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string configHash;  // SHA-256 of the resolved config file bytes
  std::string mapFile, mapHash;
  std::vector<CheckOutcome> checks;
  std::map<std::string, double> timings;  // seconds
  std::vector<std::string> artifacts;
  Json summary = Json::object();

  [[nodiscard]] bool pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
  void add(std::string name, bool ok, double margin, Json detail = Json::object()) {
    checks.push_back({std::move(name), ok, margin, std::move(detail)});
  }
};

namespace detail {

/// JSON numbers cannot hold inf/nan; those are written as strings.
inline Json finite_or_text(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

}  // namespace detail

inline Json report_to_json(const RunReport& r) {
  Json checks = Json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name}, {"pass", c.pass}, {"margin", detail::finite_or_text(c.margin)}, {"detail", c.detail}});
  return Json{{"command", r.command},
              {"seed", r.seed},
              {"threads", r.threads},
              {"configHash", r.configHash},
              {"mapFile", r.mapFile},
              {"mapHash", r.mapHash},
              {"pass", r.pass()},
              {"checks", std::move(checks)},
              {"timings", r.timings},
              {"artifacts", r.artifacts},
              {"summary", r.summary}};
}

inline RunReport report_from_json(const Json& j) {
  RunReport r;
  r.command = detail::field(j, "command").get<std::string>();
  r.seed = detail::field(j, "seed").get<std::uint64_t>();
  r.threads = detail::field(j, "threads").get<int>();
  r.configHash = detail::field(j, "configHash").get<std::string>();
  r.mapFile = detail::field(j, "mapFile").get<std::string>();
  r.mapHash = detail::field(j, "mapHash").get<std::string>();
  for (const auto& c : detail::field(j, "checks")) {
    CheckOutcome o;
    o.name = c.at("name").get<std::string>();
    o.pass = c.at("pass").get<bool>();
    o.margin = c.at("margin").is_number() ? c.at("margin").get<double>()
                                          : (c.at("margin") == "-inf" ? -INFINITY : (c.at("margin") == "inf" ? INFINITY : NAN));
    o.detail = c.at("detail");
    r.checks.push_back(std::move(o));
  }
  r.timings = detail::field(j, "timings").get<std::map<std::string, double>>();
  r.artifacts = detail::field(j, "artifacts").get<std::vector<std::string>>();
  r.summary = detail::field(j, "summary");
  return r;
}

/// Wall-clock stopwatch that records into a report's timing table.
class Stopwatch {
 public:
  Stopwatch(RunReport& r, std::string name) : r_(r), name_(std::move(name)), t0_(std::chrono::steady_clock::now()) {}
  ~Stopwatch() {
    r_.timings[name_] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }
  Stopwatch(const Stopwatch&) = delete;
  Stopwatch& operator=(const Stopwatch&) = delete;

 private:
  RunReport& r_;
  std::string name_;
  std::chrono::steady_clock::time_point t0_;
};

}  // namespace forge
