#pragma once

#include <stdexcept>
#include <string>

namespace oplora {

/// Operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad configuration or command-line input.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace oplora
