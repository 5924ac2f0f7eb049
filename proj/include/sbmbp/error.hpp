#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sbmbp {

enum class ErrorCode {
  InvalidArgument,
  DegreeNotUniform,
  NonSymmetricQ,
  NotReversible,
  EntriesOutOfRange,
  OutOfRange,
  InvalidRange,
  EmptyCollection,
  SingularNoise,
  MissingNoisyLabels,
  DepthExceeded,
  ZeroMass,
  DegenerateLeafPrior,
  TooLarge,
  ProbabilityOverflow,
  DegenerateRadius,
  SingularP,
  RadiusTooSmall,
  ConfigInvalid,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DegreeNotUniform: return "DegreeNotUniform";
    case ErrorCode::NonSymmetricQ: return "NonSymmetricQ";
    case ErrorCode::NotReversible: return "NotReversible";
    case ErrorCode::EntriesOutOfRange: return "EntriesOutOfRange";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::InvalidRange: return "InvalidRange";
    case ErrorCode::EmptyCollection: return "EmptyCollection";
    case ErrorCode::SingularNoise: return "SingularNoise";
    case ErrorCode::MissingNoisyLabels: return "MissingNoisyLabels";
    case ErrorCode::DepthExceeded: return "DepthExceeded";
    case ErrorCode::ZeroMass: return "ZeroMass";
    case ErrorCode::DegenerateLeafPrior: return "DegenerateLeafPrior";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::ProbabilityOverflow: return "ProbabilityOverflow";
    case ErrorCode::DegenerateRadius: return "DegenerateRadius";
    case ErrorCode::SingularP: return "SingularP";
    case ErrorCode::RadiusTooSmall: return "RadiusTooSmall";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
  }
  return "Unknown";
}

/// Exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace sbmbp
