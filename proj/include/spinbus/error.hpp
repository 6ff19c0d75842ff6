#pragma once

#include <stdexcept>
#include <string>

namespace spinbus {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside its documented domain (non-unit axis, negative time, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Positions too close together or to the NV centre.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// A computation would exceed a configured budget (e.g. the integrator step cap).
class ResourceError : public Error {
 public:
  using Error::Error;
};

// Physics-level validation failure (non trace-preserving channel, invalid model).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Bisection bracket without a sign change.
class NoRootError : public Error {
 public:
  using Error::Error;
};

// Text input that could not be parsed; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, int line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Configuration that violates the schema; carries the offending field path.
class SchemaError : public Error {
 public:
  SchemaError(std::string path, const std::string& what)
      : Error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

}  // namespace spinbus
