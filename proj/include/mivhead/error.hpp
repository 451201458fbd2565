#pragma once

#include <stdexcept>
#include <string>

namespace mivhead {

// Base of every error raised by the library. Callers that only care about
// "something went wrong" catch this; the subclasses exist for tests and the
// CLI's exit-code mapping.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a numeric operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mivhead
