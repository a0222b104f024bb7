#pragma once

#include <stdexcept>
#include <string>

namespace caps {

/// Invalid shapes, hyperparameters, or run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or inputs outside an operation's numeric domain.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data (CSV cells, missing values).
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an evaluation route does not support the requested score map.
class UnsupportedModeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace caps
