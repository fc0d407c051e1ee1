#pragma once

#include <stdexcept>
#include <string>

namespace pyrseg {

// Base of every exception raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or volume dimensions incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (kernel sizes, pyramid/network/training settings).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents. Carries the 0-based offset of the byte at which decoding failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }
  // what() without the offset suffix, for re-wrapping with more context.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::size_t offset_;
};

// Violated precondition on values (normalization, label range, empty input).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pyrseg
