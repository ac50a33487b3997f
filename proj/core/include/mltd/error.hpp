#pragma once

#include <stdexcept>
#include <string>

namespace mltd {

// Base class for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or layer dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (model, decomposition, task generator, CLI).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape (seed mismatch, foreign tensors, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

// Corrupt, truncated or otherwise unreadable checkpoint / task files.
class FormatError : public Error {
 public:
  FormatError(std::string section, const std::string& what)
      : Error(section + ": " + what), section_(std::move(section)) {}

  const std::string& section() const noexcept { return section_; }

 private:
  std::string section_;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mltd
