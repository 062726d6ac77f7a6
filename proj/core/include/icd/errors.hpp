#pragma once

#include <stdexcept>
#include <string>

namespace icd {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Operand shapes or axes do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An input claimed to be a probability distribution is not one.
class DistributionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or inconsistent configuration combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (dataset files, checkpoints, tensor blobs).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// An operation produced a non-finite value outside its error contract.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or gradient; runs abort rather than clip.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace icd
