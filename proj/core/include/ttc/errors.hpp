#pragma once

#include <stdexcept>
#include <string>

namespace ttc {

/// Base class for all toolkit errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape / index mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (unknown key, bad value, bad plan). CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value detected (NaN/Inf). CLI exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File read/write failure. CLI exit code 4.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ttc
