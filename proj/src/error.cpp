#include "baton/error.hpp"

namespace baton {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InputTooShort: return "InputTooShort";
    case ErrorKind::InvalidAudio: return "InvalidAudio";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::DegenerateRotation: return "DegenerateRotation";
    case ErrorKind::InvalidRotation: return "InvalidRotation";
    case ErrorKind::NumericalError: return "NumericalError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace baton
