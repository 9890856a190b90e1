// forge: command-line front end for the experiment pipeline.
//
//   forge build|check|shadow|foliate|entropy|periodic|report [--config FILE] [--out DIR]
//                                                            [--seed N] [--threads N] [--map FILE]
//
// Exit status: 0 when every enabled check passes, 1 when a check fails, 2 on errors.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "forge/experiment_analysis.hpp"

namespace {

struct Options {
  std::string config;
  std::string out = "forge-run";
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string map;
};

forge::ExperimentConfig resolve_config(const Options& o) {
  forge::ExperimentConfig cfg = o.config.empty() ? forge::ExperimentConfig{} : forge::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) {
    if (*o.threads < 1) throw forge::Error(forge::Errc::InvalidConfig, "--threads must be >= 1");
    cfg.threads = *o.threads;
  }
  return cfg;
}

int emit(const forge::RunReport& r) {
  std::cout << forge::format_table(r);
  return r.pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse deformations of hyperbolic toral automorphisms: build, check and measure"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool usesMap) {
    sub->add_option("--config", o.config, "JSON experiment config (defaults apply when omitted)")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "RNG seed (overrides the config)");
    sub->add_option("--threads", o.threads, "worker threads (overrides the config)");
    if (usesMap) sub->add_option("--map", o.map, "map descriptor (default: <out>/map.json, built when absent)");
  };
  auto* build = app.add_subcommand("build", "construct the deformed map and write map.json");
  common(build, false);
  auto* check = app.add_subcommand("check", "sparseness, cone, domination, near-hyperbolicity and expansivity checks");
  common(check, true);
  auto* shadow = app.add_subcommand("shadow", "solve for the semiconjugacy and write its displacement grid");
  common(shadow, true);
  auto* foliate = app.add_subcommand("foliate", "graph-transform leaves, written as CSV point clouds");
  common(foliate, true);
  auto* entropy = app.add_subcommand("entropy", "entropy estimates, Katok measures and non-concentration");
  common(entropy, true);
  auto* periodic = app.add_subcommand("periodic", "continue periodic points and fit their growth rate");
  common(periodic, true);
  auto* report = app.add_subcommand("report", "consolidate the reports of a run directory");
  std::string runDir;
  report->add_option("--out,dir", runDir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      const auto rep = forge::cmd_report(runDir);
      std::cout << rep.text;
      return rep.pass ? 0 : 1;
    }
    const auto ctx = forge::open_run(resolve_config(o), o.out);
    if (build->parsed()) return emit(forge::cmd_build(ctx));
    if (check->parsed()) return emit(forge::cmd_check(ctx, o.map));
    if (shadow->parsed()) return emit(forge::cmd_shadow(ctx, o.map));
    if (foliate->parsed()) return emit(forge::cmd_foliate(ctx, o.map));
    if (entropy->parsed()) return emit(forge::cmd_entropy(ctx, o.map));
    if (periodic->parsed()) return emit(forge::cmd_periodic(ctx, o.map));
  } catch (const forge::Error& e) {
    std::cerr << "forge: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "forge: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
