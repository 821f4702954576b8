#pragma once

#include <stdexcept>
#include <string>

namespace xmreid {

/// Shape mismatch between operands or an impossible output shape.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN or infinity where a finite number is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse: bad label, non-scalar backward root, level out of range, ...
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid or mutually inconsistent configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Retrieval protocol violated (e.g. a probe with no relevant gallery item).
class ProtocolError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training aborted because a loss term became non-finite.
class NumericAbort : public std::runtime_error {
 public:
  NumericAbort(std::string term, long step, double value)
      : std::runtime_error("non-finite loss term '" + term + "' at step " +
                           std::to_string(step) + " (value " + std::to_string(value) + ")"),
        term_(std::move(term)),
        step_(step) {}

  const std::string& term() const noexcept { return term_; }
  long step() const noexcept { return step_; }

 private:
  std::string term_;
  long step_;
};

}  // namespace xmreid
