#pragma once

#include <stdexcept>
#include <string>

namespace pop {

// Bad argument or configuration supplied by a caller.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor extents disagree with what an operation requires.
class DimensionError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Missing, unreadable or malformed dataset / checkpoint / metrics files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An internal invariant did not hold (frozen weights moved, buffer overflow, ...).
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace pop
