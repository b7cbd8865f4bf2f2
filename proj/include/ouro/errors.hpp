#pragma once

#include <stdexcept>
#include <string>

namespace ouro {

// Root of every error this library throws. Callers that only need to
// distinguish "ours" from foreign exceptions can catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extents disagree between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A configuration value is invalid or inconsistent (bad split, depth too
// large, odd head_dim, unknown config key, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A token id or target id falls outside the vocabulary.
class IndexError : public Error {
 public:
  using Error::Error;
};

// A caller broke a precondition of an operation (e.g. backward on a
// non-scalar, depth 0).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input is well-shaped but carries no information (all-zero mask row).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// A frozen tensor received a gradient, or was handed to the optimizer.
class FreezingViolation : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};

class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class BadVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Truncated or structurally malformed container.
class FormatError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace ouro
