#pragma once

#include <stdexcept>
#include <string>

namespace ddro {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf showed up where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Argument outside an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace ddro
