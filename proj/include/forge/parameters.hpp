#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "forge/error.hpp"
#include "forge/torus.hpp"

namespace forge {

struct Constraint {
  std::string name;
  double slack = 0;  // strictly positive when satisfied
};

/// Every scalar used by the construction and the checks, with its feasibility report.
struct ParameterLedger {
  int d = 0;
  int N = 1;
  double eps = 0.01;
  double alpha = 0.05;
  double gamma = 0.1;
  double Lambda = 0;
  double etaSpectral = 0.1;  // spectral margin: lambda_u - etaSpectral > 1
  double etaMass = 0.1;      // measure bound near the supports
  double rho = 0;
  double tau1 = 0, tau2 = 0;
  double K = 0;   // product-structure constant
  double K0 = 0;  // shadowing constant
  double eps0 = 0;
  double R0 = 0.25;
  double r0 = 0;
  double h0 = 0, h1 = 0, htop = 0;
  double lambdaU = 0, muS = 0;  // weakest expansion / contraction of the base
  std::string K0Source = "analytic";
  std::vector<Constraint> constraints;

  [[nodiscard]] bool feasible() const {
    for (const auto& c : constraints)
      if (!(c.slack > 0)) return false;
    return true;
  }
  [[nodiscard]] double threshold() const { return (std::sqrt(eps) + 2 * eps) / (std::sqrt(eps) - 2 * eps); }
};

struct LedgerOverrides {
  std::optional<double> eps, alpha, gamma, Lambda, etaSpectral, etaMass, K0, eps0, R0, r0, h0, tau2;
};

inline double domination_threshold(double eps) { return (std::sqrt(eps) + 2 * eps) / (std::sqrt(eps) - 2 * eps); }

/// Largest eps whose threshold stays below Lambda.
inline double eps_for_threshold(double Lambda) {
  const double s = (Lambda - 1) / (2 * (Lambda + 1));
  return s * s;
}

/// Recompute every derived quantity and the slack report from the primary fields.
inline void refresh_constraints(ParameterLedger& L) {
  const double s = std::sqrt(L.eps);
  L.rho = s - 2 * L.eps;
  L.K = std::sqrt(1 + L.alpha * L.alpha) / (1 - L.alpha);
  const double eps1 = eps_for_threshold(L.Lambda);
  const double eps2 = std::min({eps1, 1.0 / std::pow(2 * L.K0, 2), L.tau1 / L.K0, std::pow(2 / (L.K * L.K0), 2)});
  auto& c = L.constraints;
  c.clear();
  c.push_back({"rho = eps^(1/2) - 2 eps > 0", L.rho});
  c.push_back({"Lambda > (eps^(1/2) + 2 eps)/(eps^(1/2) - 2 eps)", L.rho > 0 ? L.Lambda - L.threshold() : -1.0});
  c.push_back({"Lambda^(1-eta) e^(-eta) > 1", std::pow(L.Lambda, 1 - L.etaMass) * std::exp(-L.etaMass) - 1});
  c.push_back({"(1-eta) log Lambda - eta gamma > 0", (1 - L.etaMass) * std::log(L.Lambda) - L.etaMass * L.gamma});
  c.push_back({"Lambda <= (lambda_u - etaSpectral) e^(-gamma)",
               (L.lambdaU - L.etaSpectral) * std::exp(-L.gamma) - L.Lambda + 1e-15});
  c.push_back({"lambda_u - etaSpectral > 1", L.lambdaU - L.etaSpectral - 1});
  c.push_back({"alpha < 1", 1 - L.alpha});
  c.push_back({"h1 = h0 + d gamma < h_top", L.htop - L.h1});
  c.push_back({"eps < eps1", eps1 - L.eps});
  c.push_back({"eps < eps2", eps2 - L.eps});
  c.push_back({"eps < tau2/K0", L.tau2 / L.K0 - L.eps});
  c.push_back({"eps < r0/(1 + 2 K0 + K K0)", L.r0 / (1 + 2 * L.K0 + L.K * L.K0) - L.eps});
  c.push_back({"eps < R0/(K K0)", L.R0 / (L.K * L.K0) - L.eps});
  c.push_back({"eps < 1/(K K0 + 2)^2", 1.0 / std::pow(L.K * L.K0 + 2, 2) - L.eps});
  c.push_back({"eta_mass in (0, 1)", std::min(L.etaMass, 1 - L.etaMass)});
  c.push_back({"gamma > 0", L.gamma});
}

/// Deterministic defaults for the base automorphism, N support balls and any overrides.
/// Throws InfeasibleParameters naming the first violated constraint.
inline ParameterLedger choose_parameters(const ToralAutomorphism& A, int N, const LedgerOverrides& ov = {}) {
  const auto& sd = A.spectral();
  ParameterLedger L;
  L.d = A.dim();
  L.N = N;
  L.eps = ov.eps.value_or(0.01);
  if (!(L.eps > 0) || !(std::sqrt(L.eps) - 2 * L.eps > 0))
    throw Error(Errc::InfeasibleParameters, "rho = eps^(1/2) - 2 eps > 0 violated (eps = " + std::to_string(L.eps) + ")");
  L.alpha = ov.alpha.value_or(0.05);
  L.gamma = ov.gamma.value_or(0.1);
  L.etaSpectral = ov.etaSpectral.value_or(0.1);
  L.etaMass = ov.etaMass.value_or(0.1);
  L.lambdaU = sd.lambda0;
  L.muS = sd.mu0;
  const double ceiling = (L.lambdaU - L.etaSpectral) * std::exp(-L.gamma);
  // Geometric mean of the admissible window [threshold, ceiling].
  L.Lambda = ov.Lambda.value_or(std::sqrt(domination_threshold(L.eps) * std::max(ceiling, 0.0)));
  L.K0 = ov.K0.value_or(2 * (1 / (sd.lambda0 - 1) + 1 / (1 - sd.mu0)));
  if (ov.K0) L.K0Source = "override";
  L.eps0 = ov.eps0.value_or(1.0 / (8 * L.K0));
  L.R0 = ov.R0.value_or(0.25);
  L.K = std::sqrt(1 + L.alpha * L.alpha) / (1 - L.alpha);
  L.rho = std::sqrt(L.eps) - 2 * L.eps;
  L.tau2 = ov.tau2.value_or(4 * L.rho);
  L.tau1 = L.tau2 / (2 * L.K);
  L.r0 = ov.r0.value_or(std::max(0.15, 2 * L.eps * (1 + 2 * L.K0 + L.K * L.K0)));
  L.htop = sd.entropy();
  L.h0 = ov.h0.value_or(L.htop / 2);
  L.h1 = L.h0 + L.d * L.gamma;
  refresh_constraints(L);
  for (const auto& c : L.constraints)
    if (!(c.slack > 0)) throw Error(Errc::InfeasibleParameters, c.name + " (slack " + std::to_string(c.slack) + ")");
  return L;
}

}  // namespace forge
