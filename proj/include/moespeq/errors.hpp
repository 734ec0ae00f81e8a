#pragma once

#include <stdexcept>
#include <string>

namespace moespeq {

enum class ErrorCode {
  MalformedRecord,
  ShapeViolation,
  EmptyTrace,
  InvalidFidelity,
  DegenerateShape,
  LayerOutOfRange,
  ShapeMismatch,
  RangeOutOfBounds,
  EmptyCache,
  UnknownPolicy,
  EmptyRequired,
  IncompleteRouting,
  KOutOfRange,
  InsufficientSamples,
  EmptyRange,
  InfeasibleBudget,
  InvalidConfig,
  IoError,
};

const char* to_string(ErrorCode code);

// Single exception type for the whole library; `code` keeps error categories
// testable, `line` is 1-based for trace parse errors (0 when not applicable).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, int line = 0)
      : std::runtime_error(format(code, message, line)), code_(code), line_(line) {}

  ErrorCode code() const noexcept { return code_; }
  int line() const noexcept { return line_; }

 private:
  static std::string format(ErrorCode code, const std::string& message, int line);

  ErrorCode code_;
  int line_;
};

}  // namespace moespeq
