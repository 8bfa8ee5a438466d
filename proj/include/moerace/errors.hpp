// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moerace {

// Incompatible tensor extents. Messages name both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid user-facing configuration (k-in-E split, selection budget, CLI values).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operation requested in a state that does not support it, e.g. thresholded
// inference before the threshold has been estimated.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Caller broke an API precondition (non-scalar loss passed to backward, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf encountered where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace moerace
