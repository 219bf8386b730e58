#pragma once

#include <stdexcept>
#include <string>

namespace clada {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or mismatched dimensions (zero sizes, mask length, shapes).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Layer, neuron or position index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Token id outside the vocabulary.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Sequence longer than the model context.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Malformed weight, policy, corpus or panel file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

/// A ratio whose denominator vanished (zero MLP output, zero matrix).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Regression design is rank deficient after dropping constant columns.
class CollinearityError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace clada
