#pragma once

#include <stdexcept>
#include <string>

namespace cmssl {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension mismatch.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Invalid user-facing configuration (config file, CLI flags).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Non-finite values or numerically degenerate inputs.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// File I/O and on-disk format problems.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace cmssl
