#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace psv {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimension mismatch; message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf where finite values are required, diverged training, etc.
struct NumericError : Error {
  using Error::Error;
};

// API misuse: non-scalar loss, double instrumentation, duplicate names.
struct ContractError : Error {
  using Error::Error;
};

// Bad user-supplied data: out-of-range label, too-short waveform,
// unknown utterance id, degenerate score sets.
struct InputError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem failures; message carries the path.
struct IoError : Error {
  using Error::Error;
};

// Checkpoint load failures, one type per failure class.
struct CheckpointError : Error {
  using Error::Error;
};
struct CheckpointHeaderError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointTruncatedError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointChecksumError : CheckpointError {
  using CheckpointError::CheckpointError;
};
// Checkpoint loads into a model with a different architecture.
struct CheckpointMismatchError : CheckpointError {
  using CheckpointError::CheckpointError;
};

namespace detail {

inline void cat_into(std::ostringstream&) {}

template <typename A, typename... Rest>
void cat_into(std::ostringstream& os, A&& a, Rest&&... rest) {
  os << a;
  cat_into(os, std::forward<Rest>(rest)...);
}

// Small helper so error sites read as msg("expected ", a, ", got ", b).
template <typename... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  cat_into(os, std::forward<Args>(args)...);
  return os.str();
}

}  // namespace detail

}  // namespace psv
