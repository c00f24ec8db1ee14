#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace retgrade {

// All library failures derive from Error so callers can catch one type and
// still dispatch on the concrete class (the CLI maps them to exit codes).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class StateError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class NumericError : public Error {
public:
  using Error::Error;
};

class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string &what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

// Checkpoint decoding failures. Each one is a distinct type.
class FormatError : public Error {
public:
  using Error::Error;
};

class VersionError : public Error {
public:
  using Error::Error;
};

class TruncatedError : public Error {
public:
  using Error::Error;
};

class ChecksumError : public Error {
public:
  using Error::Error;
};

} // namespace retgrade
