#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rcs {

enum class ErrorCode {
  // data / format
  BadMagic,
  TruncatedPayload,
  NonFiniteValue,
  UnknownDatasetId,
  MalformedRecord,
  IoFailure,
  InvariantViolation,
  DimensionMismatch,
  EmptySet,
  ZeroVector,
  TooFewSamples,
  TooFewLayers,
  SingleClassData,
  EmptyBatch,
  EmptyBank,
  KTooLarge,
  DegenerateLabels,
  NoPositives,
  LengthMismatch,
  // configuration
  InvalidConfig,
  InvalidArgument,
  InvalidSpec,
  InvalidSweep,
  ModeError,
  // numerical
  FactorizationFailure,
};

std::string_view error_code_name(ErrorCode code) noexcept;

/// Which CLI exit-code family an error belongs to.
enum class ErrorKind { Config, Data, Numerical };
ErrorKind error_kind(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace rcs
