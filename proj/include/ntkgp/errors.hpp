#pragma once

#include <stdexcept>
#include <string>

namespace ntkgp {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad field values, unknown config keys, bad dataset spec).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dimension mismatch between an input and what the operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument value (e.g. k > N, empty dataset).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A dense materialization would exceed the configured memory budget.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during an iterative computation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A linear system is singular (or numerically indistinguishable from singular).
class SingularityError : public Error {
 public:
  using Error::Error;
};

/// Two objects that must share a configuration do not.
class IncompatibilityError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure, annotated with the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ntkgp
