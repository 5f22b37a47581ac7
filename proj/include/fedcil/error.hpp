#pragma once

#include <stdexcept>

namespace fedcil {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not line up (matmul inner dims, elementwise shapes, ...).
struct DimensionError : Error {
  using Error::Error;
};

// An operation was called in a state that forbids it (double backward,
// recording onto a frozen tape).
struct StateError : Error {
  using Error::Error;
};

// An argument violates the operation's contract (non-scalar loss,
// shrinking a class head).
struct ContractError : Error {
  using Error::Error;
};

// A label or index is outside the valid range.
struct RangeError : Error {
  using Error::Error;
};

// Invalid experiment or run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Server/client exchange violated the protocol (incompatible uploads,
// a class no uploaded generator covers, empty upload list).
struct ProtocolError : Error {
  using Error::Error;
};

// Evaluation requested on an empty or malformed input.
struct EvalError : Error {
  using Error::Error;
};

// Checkpoint or log file problems.
struct IoError : Error {
  using Error::Error;
};

}  // namespace fedcil
