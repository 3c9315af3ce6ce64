#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace s2rm {

// Error taxonomy shared across the library. Anything a caller can trigger
// with bad inputs throws one of these.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid static configuration (model sizes, simulator geometry, run config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input that is structurally valid but mathematically unusable (e.g. a zero
// vector where a direction is required).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Runtime input outside the documented domain (e.g. an out-of-bounds query
// position).
class InputError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or other numeric breakdowns.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file content; carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace s2rm
