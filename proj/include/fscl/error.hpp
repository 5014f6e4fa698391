#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fscl {

enum class ErrorCode {
  kInvalidArgument,
  kIo,
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kLabelOutOfRange,
  kShapeMismatch,
  kInvalidValue,
  kInsufficientSamples,
  kOverlappingClasses,
  kZeroNorm,
  kDegenerateClass,
  kFactorization,
  kNonFinite,
  kEmpty,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kUnsupportedVersion: return "unsupported_version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kLabelOutOfRange: return "label_out_of_range";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kInvalidValue: return "invalid_value";
    case ErrorCode::kInsufficientSamples: return "insufficient_samples";
    case ErrorCode::kOverlappingClasses: return "overlapping_classes";
    case ErrorCode::kZeroNorm: return "zero_norm";
    case ErrorCode::kDegenerateClass: return "degenerate_class";
    case ErrorCode::kFactorization: return "factorization";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kEmpty: return "empty";
  }
  return "unknown";
}

/// Exception carrying a machine-readable code next to the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace fscl
