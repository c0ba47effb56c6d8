#pragma once

#include <stdexcept>
#include <string>

namespace sppo {

// Base for every error raised by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  DimensionError(const std::string& what, long expected, long actual)
      : Error(what + ": expected " + std::to_string(expected) + ", got " +
              std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  long expected() const { return expected_; }
  long actual() const { return actual_; }

 private:
  long expected_;
  long actual_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace sppo
