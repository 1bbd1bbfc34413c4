#pragma once

#include <stdexcept>
#include <string>

namespace sparsefit {

// Tensor extents disagree with what an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke an operation's precondition (non-scalar backward root,
// missing gradient, length mismatch, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A NaN or infinity was produced or stored.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration: unknown component, bad LoRA rank, infeasible quota, ...
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sparsefit
