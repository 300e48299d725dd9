#pragma once

#include <stdexcept>
#include <string>

namespace geoseg {

enum class ErrorKind {
  shape,        // tensor/grid extents disagree
  config,       // invalid configuration value
  state,        // operation called in the wrong order
  validation,   // bad user input (bad pixel, malformed file, ...)
  not_found,    // unknown session or resource
  unavailable,  // a required model is not loaded
  numeric,      // non-finite value encountered
  io,           // file system failure
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::config: return "config";
    case ErrorKind::state: return "state";
    case ErrorKind::validation: return "validation";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::unavailable: return "unavailable";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace geoseg
