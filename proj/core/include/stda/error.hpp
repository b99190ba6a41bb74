#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stda {

// Error categories double as the machine-parsable codes printed by the CLI.
enum class ErrorCode {
  kShape,
  kValue,
  kNonFinite,
  kIo,
  kFormat,
  kConfig,
  kNotFound,
  kResource,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "E_SHAPE";
    case ErrorCode::kValue: return "E_VALUE";
    case ErrorCode::kNonFinite: return "E_NONFINITE";
    case ErrorCode::kIo: return "E_IO";
    case ErrorCode::kFormat: return "E_FORMAT";
    case ErrorCode::kConfig: return "E_CONFIG";
    case ErrorCode::kNotFound: return "E_NOT_FOUND";
    case ErrorCode::kResource: return "E_RESOURCE";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace stda
