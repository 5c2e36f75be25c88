#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace decomp {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API contract violated by the caller (e.g. ending a call twice).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Input data fails a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what + " (at byte " + std::to_string(position) + ")"), position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class VersionError : public Error {
 public:
  explicit VersionError(int version)
      : Error("unsupported trace version " + std::to_string(version)), version_(version) {}

  int version() const noexcept { return version_; }

 private:
  int version_;
};

}  // namespace decomp
