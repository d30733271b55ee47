#pragma once

#include <stdexcept>
#include <string>

namespace subflow {

// Caller broke a documented precondition (invalid action, s_f queried, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or missing configuration. `path` is the dotted key, e.g. "env.kind".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Operation needs something the environment cannot provide (exact enumeration).
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf showed up in a loss, residual or gradient.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace subflow
