#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace neurolens {

enum class ErrorCode {
  // configuration
  ConfigError,
  // data / input
  MissingTensor,
  ShapeMismatch,
  SchemaError,
  UnknownRawGroup,
  GroupTooSmall,
  EmptyGroup,
  EmptyInput,
  EmptyTestSet,
  DegenerateData,
  NoBaselineErrors,
  UnknownClass,
  LayerNotCaptured,
  IoError,
  // numeric
  NonFiniteWeight,
  DimensionMismatch,
  DimTooSmall,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::UnknownRawGroup: return "UnknownRawGroup";
    case ErrorCode::GroupTooSmall: return "GroupTooSmall";
    case ErrorCode::EmptyGroup: return "EmptyGroup";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::DegenerateData: return "DegenerateData";
    case ErrorCode::NoBaselineErrors: return "NoBaselineErrors";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::LayerNotCaptured: return "LayerNotCaptured";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NonFiniteWeight: return "NonFiniteWeight";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DimTooSmall: return "DimTooSmall";
  }
  return "Unknown";
}

/// Process exit codes used by the CLI: 2 config, 3 data, 4 numeric.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
      return 2;
    case ErrorCode::NonFiniteWeight:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::DimTooSmall:
      return 4;
    default:
      return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code), detail_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace neurolens
