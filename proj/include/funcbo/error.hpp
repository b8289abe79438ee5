#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace funcbo {

enum class ErrorCode {
  dimension_mismatch,
  not_positive_definite,
  singular_system,
  non_finite,
  empty_input,
  precondition,
  config,
  io,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::not_positive_definite: return "not_positive_definite";
    case ErrorCode::singular_system: return "singular_system";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::empty_input: return "empty_input";
    case ErrorCode::precondition: return "precondition";
    case ErrorCode::config: return "config";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised by the Cholesky factorization; `pivot()` is the first failing diagonal index.
class NotPositiveDefinite : public Error {
 public:
  NotPositiveDefinite(std::size_t pivot, double value)
      : Error(ErrorCode::not_positive_definite,
              "Cholesky pivot " + std::to_string(pivot) + " is " + std::to_string(value)),
        pivot_(pivot) {}

  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) throw Error(code, what);
}

inline void require_dims(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw Error(ErrorCode::dimension_mismatch,
                std::string(what) + ": got " + std::to_string(got) + ", expected " +
                    std::to_string(want));
  }
}

}  // namespace funcbo
