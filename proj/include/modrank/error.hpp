#pragma once

#include <stdexcept>
#include <string>

namespace modrank {

/// Violated precondition or invariant. Maps to CLI exit code 1.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Tensor shapes that do not fit the requested operation.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// NaN or infinity reached a numerically guarded primitive.
class NumericError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Invalid model, adapter or experiment configuration.
class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Artifact fingerprints disagree (adapter/mask built against another base).
class FingerprintError : public ContractError {
 public:
  FingerprintError(const std::string& what, std::string expected, std::string found)
      : ContractError(what + " (base " + expected + ", artifact " + found + ")"),
        expected_(std::move(expected)),
        found_(std::move(found)) {}

  const std::string& expected() const { return expected_; }
  const std::string& found() const { return found_; }

 private:
  std::string expected_;
  std::string found_;
};

/// Missing, unreadable or malformed files. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace modrank
