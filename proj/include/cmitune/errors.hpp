#pragma once

#include <stdexcept>
#include <string>

namespace cmitune {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or axis contract violated by an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misused: non-scalar backward, reusing a consumed tape, mutating data
// while recording, and similar.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN/Inf, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad argument values at a call boundary (labels out of range, ids out of
// vocabulary, too-short sequences, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: schema violations, unknown keys, incompatible
// checkpoint/config combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset or file ingestion problems (missing file, malformed line, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmitune
