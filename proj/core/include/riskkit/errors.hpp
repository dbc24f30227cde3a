#pragma once

#include <stdexcept>
#include <string>

namespace riskkit {

// Every error thrown by the library derives from Error. The subclasses map
// one-to-one onto the command-line exit codes (see tools/riskkit_cli.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced where the operation contract forbids it.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t epoch, std::size_t batch)
      : Error(what), epoch_(epoch), batch_(batch) {}

  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

// A metric wrapper cannot be applied to the model structure it was given.
class IncompatibleMetricError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Prediction requested from a wrapped model whose heads were never stepped.
class UntrainedModelError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace riskkit
