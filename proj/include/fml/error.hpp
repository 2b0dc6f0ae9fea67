#pragma once

#include <stdexcept>
#include <string>

namespace fml {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Grid dimensions that are not square, not a power of two, or do not match.
class SizeError : public Error {
 public:
  using Error::Error;
};

// A numeric argument or configuration value outside its admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition (cyclic parent graph, wrong shape).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Training diverged or had nothing to train on.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// Dataset / checkpoint I/O failures. Each failure mode is its own type so
// callers can tell a damaged file from a missing one.
class IoError : public Error {
 public:
  using Error::Error;
};

class MissingFileError : public IoError {
 public:
  using IoError::IoError;
};

class CorruptHeaderError : public IoError {
 public:
  using IoError::IoError;
};

class SizeMismatchError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace fml
