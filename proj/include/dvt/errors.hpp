#pragma once

#include <stdexcept>
#include <string>

namespace dvt {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or invalid axes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable input files (datasets, checkpoints, traces, configs).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced by an operation, or numeric preconditions violated.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid command-line usage or run configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace dvt
