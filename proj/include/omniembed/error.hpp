#pragma once

#include <stdexcept>
#include <string>

namespace omniembed {

enum class ErrorCode {
  invalid_argument,
  dimension_mismatch,
  not_found,
  io,
  config,
  numeric,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::io: return "io";
    case ErrorCode::config: return "config";
    case ErrorCode::numeric: return "numeric";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-readable code and,
// for configuration/input problems, the offending field path or file path.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string path = {})
      : std::runtime_error(message), code_(code), path_(std::move(path)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& path() const noexcept { return path_; }

 private:
  ErrorCode code_;
  std::string path_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace omniembed
