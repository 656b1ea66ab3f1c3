#include "rcs/errors.hpp"

namespace rcs {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::UnknownDatasetId: return "UnknownDatasetId";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::TooFewLayers: return "TooFewLayers";
    case ErrorCode::SingleClassData: return "SingleClassData";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::EmptyBank: return "EmptyBank";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InvalidSweep: return "InvalidSweep";
    case ErrorCode::ModeError: return "ModeError";
    case ErrorCode::FactorizationFailure: return "FactorizationFailure";
  }
  return "Unknown";
}

ErrorKind error_kind(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidSpec:
    case ErrorCode::InvalidSweep:
    case ErrorCode::ModeError:
      return ErrorKind::Config;
    case ErrorCode::FactorizationFailure:
      return ErrorKind::Numerical;
    default:
      return ErrorKind::Data;
  }
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace rcs
