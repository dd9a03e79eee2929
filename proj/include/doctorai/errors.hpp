#pragma once

#include <stdexcept>
#include <string>

namespace doctorai {

// Base for every error raised by the library. The CLI maps these to exit
// status 1; anything thrown by argument parsing maps to 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class UnknownCodeError : public Error {
 public:
  explicit UnknownCodeError(const std::string& code)
      : Error("unknown code: " + code), code_(code) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class DuplicateTimestampError : public Error {
 public:
  using Error::Error;
};

class NoHistoryError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class MappingError : public Error {
 public:
  explicit MappingError(const std::string& code)
      : Error("target code has no source mapping: " + code), code_(code) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class UnsupportedVersionError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace doctorai
