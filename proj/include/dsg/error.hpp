#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dsg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite or otherwise malformed numeric input.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Mismatched vector lengths or tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (negative weight, bad threshold, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Frames fed to a tracker out of order.
class SequenceError : public Error {
 public:
  using Error::Error;
};

/// A record violates a data invariant after parsing succeeded.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Backward called on a graph that was already consumed.
class StaleGraphError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (NaN or infinite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Malformed line in a line-delimited input file.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace dsg
