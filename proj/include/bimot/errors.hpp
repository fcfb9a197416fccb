#pragma once

#include <stdexcept>
#include <string>

namespace bimot {

/// Violated precondition of an operation (bad shapes, malformed sequences, ...).
/// The CLI maps these to exit code 1.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Raised by cross_entropy_masked when every position is masked out.
class EmptyLossError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Invalid configuration or missing prerequisite artifacts. Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or non-finite input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bimot
