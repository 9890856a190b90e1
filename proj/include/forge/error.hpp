#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace forge {

enum class Errc {
  DimensionMismatch,
  NotHyperbolic,
  UnsupportedSpectrum,
  DegeneratePeriod,
  SearchFailed,
  IntegrationFailure,
  NoEigenvalueCrossing,
  FixedPointSearchFailed,
  NoCollision,
  GluingViolation,
  TangencyNotFound,
  TooManyComponents,
  ZeroVector,
  DominationNotDetected,
  InfeasibleParameters,
  ShadowingDiverged,
  NotConverged,
  NoIntersection,
  AmbiguousIntersection,
  GraphFoldDetected,
  ConvergenceFailure,
  NotApplicable,
  EmptySet,
  FitFailure,
  InvalidConfig,
  IoError,
};

constexpr std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NotHyperbolic: return "NotHyperbolic";
    case Errc::UnsupportedSpectrum: return "UnsupportedSpectrum";
    case Errc::DegeneratePeriod: return "DegeneratePeriod";
    case Errc::SearchFailed: return "SearchFailed";
    case Errc::IntegrationFailure: return "IntegrationFailure";
    case Errc::NoEigenvalueCrossing: return "NoEigenvalueCrossing";
    case Errc::FixedPointSearchFailed: return "FixedPointSearchFailed";
    case Errc::NoCollision: return "NoCollision";
    case Errc::GluingViolation: return "GluingViolation";
    case Errc::TangencyNotFound: return "TangencyNotFound";
    case Errc::TooManyComponents: return "TooManyComponents";
    case Errc::ZeroVector: return "ZeroVector";
    case Errc::DominationNotDetected: return "DominationNotDetected";
    case Errc::InfeasibleParameters: return "InfeasibleParameters";
    case Errc::ShadowingDiverged: return "ShadowingDiverged";
    case Errc::NotConverged: return "NotConverged";
    case Errc::NoIntersection: return "NoIntersection";
    case Errc::AmbiguousIntersection: return "AmbiguousIntersection";
    case Errc::GraphFoldDetected: return "GraphFoldDetected";
    case Errc::ConvergenceFailure: return "ConvergenceFailure";
    case Errc::NotApplicable: return "NotApplicable";
    case Errc::EmptySet: return "EmptySet";
    case Errc::FitFailure: return "FitFailure";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure in the library is reported through this type; `code()`
/// identifies the failure class, `what()` carries the detail.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(errc_name(code)) + ": " + detail), code_(code), detail_(detail) {}

  [[nodiscard]] Errc code() const noexcept { return code_; }
  [[nodiscard]] const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

}  // namespace forge
