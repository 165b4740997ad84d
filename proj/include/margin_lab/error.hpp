#pragma once

#include <stdexcept>
#include <string>

namespace margin_lab {

/// Shapes or parameters that cannot be used together.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (IDX, checkpoint, config).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure could not produce a valid result.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite or exploding loss.
class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace margin_lab
