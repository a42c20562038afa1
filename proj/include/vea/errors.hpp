#pragma once

#include <stdexcept>
#include <string>

namespace vea {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shapes incompatible with the requested operation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Invalid configuration (bad parameter values, mismatched model specs, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// File I/O problems: missing, truncated or corrupt artifacts.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

/// A runtime invariant was violated (non-finite values, budget overrun, ...).
class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& msg) : Error(msg) {}
};

/// An API contract was misused (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

/// Model training failed to reach the required accuracy gate.
class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& msg) : Error(msg) {}
};

}  // namespace vea
