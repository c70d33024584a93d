#pragma once

#include <stdexcept>
#include <string>

namespace glandseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: missing files, malformed config, invalid arguments.
/// The CLI maps this to exit code 2.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Array or tensor shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf encountered in activations, gradients or loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace glandseg
