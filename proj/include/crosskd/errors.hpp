#pragma once

#include <stdexcept>
#include <string>

namespace crosskd {

// Error categories map onto CLI exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration, unsupported geometry, or violated precondition.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not conform for an operation.
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced somewhere, or a solve that could not be rescued.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace crosskd
