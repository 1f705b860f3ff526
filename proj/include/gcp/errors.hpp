#pragma once

#include <stdexcept>
#include <string>

namespace gcp {

// Base of every error the library throws. Callers that only care about
// "something went wrong" catch this; tests match the concrete subclasses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Structurally invalid configuration: bad network graph, impossible output size,
// degenerate batch, missing latency coverage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied value outside its domain (negative threshold, bad label...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

// API used out of order (stale tape, missing statistics).
class UsageError : public Error {
 public:
  using Error::Error;
};

// A prune request that would empty a channel group or cannot reach its budget.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data. Subclasses separate the load failure modes.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class MissingBlobError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace gcp
