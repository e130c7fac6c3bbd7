#pragma once

#include <stdexcept>
#include <string>

namespace libs {

// Root of every exception thrown by the library. The CLI maps the concrete
// subclasses onto exit codes (ConfigError -> 2, IoError/FormatError -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input outside an operation's domain (empty sequence, empty reference, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller violated an API contract (non-scalar loss, index out of range, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents; the message carries the byte offset.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Unknown sample id, parameter name, ...
class LookupError : public Error {
 public:
  using Error::Error;
};

}  // namespace libs
