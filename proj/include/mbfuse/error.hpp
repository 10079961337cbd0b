#pragma once

#include <stdexcept>
#include <string>

namespace mbfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents violate an operation's shape contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf was produced; the op name is part of the message.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace mbfuse
