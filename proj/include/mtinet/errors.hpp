#pragma once

#include <stdexcept>
#include <string>

namespace mtinet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (sizes, ratios, switches).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data: bad magic, version, truncation.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A loss or metric became NaN/Inf during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint does not fit the requested model or data.
class CompatibilityError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace mtinet
