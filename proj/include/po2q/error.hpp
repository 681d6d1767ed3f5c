#pragma once

#include <stdexcept>
#include <string>

namespace po2q {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration value is outside its legal range (bit width, n_iters, ...).
class InvalidConfig : public Error {
 public:
  using Error::Error;
};

/// Numeric domain violation: non-finite input, non-positive scale, exponent out of range.
class DomainError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// MSQE weight factors that are negative, non-finite, or sum to zero.
class InvalidWeights : public Error {
 public:
  using Error::Error;
};

/// The least-squares step saw q^T q = 0, i.e. every code rounded to zero.
class DegenerateCodes : public Error {
 public:
  explicit DegenerateCodes(double delta)
      : Error("all quantization codes are zero at delta=" + std::to_string(delta)),
        delta_(delta) {}

  /// Scale that produced the all-zero code vector.
  double delta() const noexcept { return delta_; }

 private:
  double delta_;
};

/// A ratio metric was asked for with an empty numerator or denominator set.
class UndefinedRatio : public Error {
 public:
  using Error::Error;
};

/// Fixed-point accumulator or shift would not fit in 64 bits.
class Overflow : public Error {
 public:
  using Error::Error;
};

/// Malformed tensor file or config document.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace po2q
