#pragma once

#include <stdexcept>
#include <string>

namespace vqtok {

/// A violated input or configuration rule. `rule()` names the rule so
/// callers (and the CLI) can report it verbatim.
class ValidationError : public std::invalid_argument {
 public:
  ValidationError(std::string rule, const std::string& detail)
      : std::invalid_argument(rule + ": " + detail), rule_(std::move(rule)) {}
  const std::string& rule() const { return rule_; }

 private:
  std::string rule_;
};

/// A loss term went NaN/Inf during training.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::string term, double value)
      : std::runtime_error("non-finite loss term '" + term + "' (" + std::to_string(value) + ")"),
        term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

/// Corrupt or mismatched on-disk data (archives, shards, checkpoints).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vqtok
