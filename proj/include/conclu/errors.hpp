#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace conclu {

// Base of every error the library throws. Callers that only care about
// "something in conclu failed" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DegenerateError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

class BatchTooSmallError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ScaleError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line == 0 ? what : what + " (line " + std::to_string(line) + ")"), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A prototype whose soft column mass fell below the floor. Training reports
// it instead of producing NaN centers.
class DeadPrototypeError : public Error {
 public:
  DeadPrototypeError(std::size_t column, double mass)
      : Error("dead prototype: column " + std::to_string(column) + " has mass " +
              std::to_string(mass)),
        column_(column),
        mass_(mass) {}

  std::size_t column() const noexcept { return column_; }
  double mass() const noexcept { return mass_; }

 private:
  std::size_t column_;
  double mass_;
};

}  // namespace conclu
