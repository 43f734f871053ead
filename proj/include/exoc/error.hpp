#pragma once

#include <stdexcept>
#include <string>

namespace exoc {

// Base for every error the library raises. The CLI maps ValidationError to
// exit code 2 and everything else to 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad caller input: out-of-range hyperparameters, kind mismatches, empty slices.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed files: bad magic, CRC failure, unparsable lines.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Dimensions of a stored object disagree with the consumer.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Numerical failure: quadrature non-convergence, non-finite losses,
// degenerate bisection.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace exoc
