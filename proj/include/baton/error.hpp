#pragma once

#include <stdexcept>
#include <string>

namespace baton {

enum class ErrorKind {
  InputTooShort,
  InvalidAudio,
  ConfigError,
  ShapeError,
  DegenerateRotation,
  InvalidRotation,
  NumericalError,
  FormatError,
  IoError,
};

const char* to_string(ErrorKind kind);

// Single exception type for the engine; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) fail(kind, message);
}

}  // namespace baton
