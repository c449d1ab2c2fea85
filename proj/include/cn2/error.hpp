#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cn2 {

enum class ErrorKind {
  Dimension,
  Bounds,
  InsufficientFrames,
  DegenerateScene,
  AlignmentFailure,
  NumericalGuard,
  Shape,
  Config,
  Parse,
  Validation,
  Load,
  Split,
  EmptyInput,
  Undefined,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Bounds: return "bounds error";
    case ErrorKind::InsufficientFrames: return "insufficient frames";
    case ErrorKind::DegenerateScene: return "degenerate scene";
    case ErrorKind::AlignmentFailure: return "alignment failure";
    case ErrorKind::NumericalGuard: return "numerical guard";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Parse: return "parse error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Load: return "load error";
    case ErrorKind::Split: return "split error";
    case ErrorKind::EmptyInput: return "empty input";
    case ErrorKind::Undefined: return "undefined metric";
    case ErrorKind::Io: return "i/o error";
  }
  return "error";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace cn2
