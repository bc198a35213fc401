#pragma once

#include <stdexcept>
#include <string>

namespace healnet {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A metric has no defined value for the given input.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data. Subclasses narrow the cause.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : DataError(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public DataError {
 public:
  FormatError(const std::string& path, std::size_t offset, const std::string& what)
      : DataError(path + " @ byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class DiscretizationError : public DataError {
 public:
  using DataError::DataError;
};

class JoinError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace healnet
