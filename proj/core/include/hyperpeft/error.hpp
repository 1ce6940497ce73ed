#pragma once

#include <stdexcept>
#include <string>

namespace hyperpeft {

// Incompatible tensor shapes or dimension counts.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: calling an operation outside its preconditions.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf produced where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or incompatible file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent or invalid configuration. `path` names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::invalid_argument(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Data that violates a record invariant (e.g. a JSONL task line).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hyperpeft
