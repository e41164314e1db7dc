#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tree {

/// Classification of every fault the toolkit can raise.
enum class ErrorKind {
  invalid_argument,
  unsupported_arity,
  backend_unavailable,  // retryable
  configuration,
  backend_protocol,
  unscripted_prompt,
  input_unavailable,
  empty_caption,
  stage_failure,
  load_error,
  output_error,
  cache_corrupt,
  metric_undefined,
  empty_report,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  bool retryable() const noexcept { return kind_ == ErrorKind::backend_unavailable; }

 private:
  ErrorKind kind_;
};

}  // namespace tree
