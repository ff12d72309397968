#pragma once

#include <stdexcept>
#include <string>

namespace ctxmem {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an operation (bad id, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or misaligned input data.
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctxmem
