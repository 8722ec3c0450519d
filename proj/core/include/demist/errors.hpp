#pragma once

#include <stdexcept>
#include <string>

namespace demist {

// Base class for every error this library raises on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad flags, bad config files, parameter values outside their domain.
// Maps to process exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Parameter-domain violations (beta <= 0, negative depth, tau <= 0, ...).
class DomainError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Broken datasets, missing files, corpus integrity failures. Exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

// Structural errors: mismatched shapes, indivisible dims, odd sizes.
class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

// Degenerate inputs: transmission below the inversion floor, empty masks.
class DegenerateError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite values where finiteness is a contract. Exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require_domain(bool cond, const std::string& msg) {
  if (!cond) throw DomainError(msg);
}

}  // namespace demist
