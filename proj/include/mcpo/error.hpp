#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mcpo {

enum class ErrorCode {
  invalid_kind,
  vocab_too_small,
  invalid_argument,
  token_out_of_range,
  empty_group,
  degenerate_group,
  non_finite_ratio,
  non_finite_objective,
  non_finite_gradient,
  overflow,
  parse_error,
  config_parse_error,
  invalid_override,
  incompatible_runs,
  io_error,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_kind: return "invalid-kind";
    case ErrorCode::vocab_too_small: return "vocab-too-small-for-kind";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::token_out_of_range: return "token-out-of-range";
    case ErrorCode::empty_group: return "empty-group";
    case ErrorCode::degenerate_group: return "degenerate-group";
    case ErrorCode::non_finite_ratio: return "non-finite-ratio";
    case ErrorCode::non_finite_objective: return "non-finite-objective";
    case ErrorCode::non_finite_gradient: return "non-finite-gradient";
    case ErrorCode::overflow: return "overflow";
    case ErrorCode::parse_error: return "parse-error";
    case ErrorCode::config_parse_error: return "config-parse-error";
    case ErrorCode::invalid_override: return "invalid-override";
    case ErrorCode::incompatible_runs: return "incompatible-runs";
    case ErrorCode::io_error: return "io-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace mcpo
