#pragma once

#include <stdexcept>
#include <string>

namespace rf {

// Base of every error the library throws on a broken contract. The CLI maps
// the concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an op or fed to the optimizer.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain.
class ValueError : public Error {
 public:
  using Error::Error;
};

// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// File opened but its contents are malformed or of the wrong version.
class FormatError : public Error {
 public:
  using Error::Error;
};

// ODE integration failed (non-finite state, step budget exhausted).
class SolverError : public Error {
 public:
  using Error::Error;
};

// A metric was asked for on data that does not satisfy its preconditions.
class MetricPreconditionError : public Error {
 public:
  using Error::Error;
};

// Bad command-line flags or configuration (unknown key, invalid value).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace rf
