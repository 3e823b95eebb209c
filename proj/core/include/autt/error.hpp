#pragma once

#include <stdexcept>
#include <string>

namespace autt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A recurrence or training loop produced non-finite values.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long index)
      : Error(what), index_(index) {}
  long index() const noexcept { return index_; }

 private:
  long index_;
};

/// Invalid configuration values or malformed configuration text.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace autt
