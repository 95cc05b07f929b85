#pragma once

#include <stdexcept>
#include <string>

namespace stmesh {

// Base for every error raised by the library. Subclasses let the CLI map
// failures onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Degenerate geometry: parallel 6D columns, rank-deficient Procrustes input.
class DegeneracyError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in a computation or a failed numeric check.
class NumericError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace stmesh
