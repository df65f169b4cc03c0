#pragma once

#include <stdexcept>
#include <string>

namespace faitheval {

// Common base so callers can catch anything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid argument or configuration value (CLI exit code 1).
struct ParameterError : Error {
  using Error::Error;
};

// Corpus / input file problems: parse failures, invariant violations
// (CLI exit code 2).
struct DataError : Error {
  using Error::Error;
};

// Non-finite inputs or other numeric contract violations (CLI exit code 3).
struct NumericError : Error {
  using Error::Error;
};

// Dimension mismatch between matrices/vectors (CLI exit code 3).
struct ShapeError : Error {
  using Error::Error;
};

// Stale trace, missing run artifacts, or other cross-object mismatch.
struct ConsistencyError : Error {
  using Error::Error;
};

// Loss became non-finite (or failed the decrease contract) while training.
struct TrainingError : Error {
  TrainingError(const std::string& msg, int epoch_index)
      : Error(msg), epoch(epoch_index) {}
  int epoch;
};

// Adapter transport failures, one type per cause so callers can tell
// a hung process from a chatty-but-wrong one.
struct AdapterError : Error {
  using Error::Error;
};
struct AdapterTimeout : AdapterError {
  using AdapterError::AdapterError;
};
struct AdapterProcessExit : AdapterError {
  using AdapterError::AdapterError;
};
// Malformed line, wrong message type, or an invalid payload (e.g.
// probabilities that do not form a distribution).
struct AdapterProtocolError : AdapterError {
  using AdapterError::AdapterError;
};

}  // namespace faitheval
