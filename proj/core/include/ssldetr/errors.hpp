#pragma once

#include <stdexcept>
#include <string>

namespace ssldetr {

// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Image or tensor extents incompatible with a geometric requirement
// (e.g. a dimension not divisible by the downsampling factor).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Tensor shape mismatch between arguments.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Scalar argument outside its documented range.
class RangeError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition linking two arguments
// (e.g. a match result inconsistent with the prediction set).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Assignment problem without a feasible solution (fewer rows than columns).
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// Filesystem or serialization failure; message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssldetr
