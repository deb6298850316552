#pragma once

#include <stdexcept>
#include <string>

namespace untangled {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A point lies outside the spatial domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: unknown registry id, bad parameter vector, etc.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Violated operation precondition.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown (inconsistent support table, singular system, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Every branch of the inclusion integrator left the domain.
class InfeasibleError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace untangled
