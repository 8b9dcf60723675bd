#pragma once

#include <stdexcept>
#include <string>

namespace nahtm {

// Base for every error raised by the library. The CLI maps the concrete
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or matrix shapes do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced, or an input outside a function's domain (log of a
// non-positive value, non-finite gradient).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// A file could not be parsed.
class ParseError : public DataError {
 public:
  using DataError::DataError;
};

// Embeddings or checkpoints that do not line up with the paired corpus.
class AlignmentError : public DataError {
 public:
  AlignmentError(const std::string& level, const std::string& what)
      : DataError(level + ": " + what), level_(level) {}
  const std::string& level() const { return level_; }

 private:
  std::string level_;
};

// Invalid configuration values or unknown configuration keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace nahtm
