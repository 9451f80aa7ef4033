#pragma once

#include <stdexcept>
#include <string>

namespace finehand {

/// Malformed or out-of-contract input.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A mutation collides with existing state (e.g. a patch labeled twice).
class ConflictError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation requested on an object in the wrong lifecycle state.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace finehand
