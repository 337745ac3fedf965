#pragma once

#include <stdexcept>
#include <string>

namespace tss {

// Error taxonomy used across the toolkit. Every category maps to a distinct
// CLI exit code (see tools/).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not conform (message names the operation and both shapes).
struct ShapeError : Error {
  using Error::Error;
};

// Non-finite values detected under strict numerics, degenerate norms, etc.
struct NumericError : Error {
  using Error::Error;
};

// API misuse: non-scalar loss passed to backward, wrong embedding kind, ...
struct ContractError : Error {
  using Error::Error;
};

// Bad configuration value or schema violation.
struct ConfigError : Error {
  using Error::Error;
};

// Missing / malformed input data (files, manifests, signals).
struct DataError : Error {
  using Error::Error;
};

// Stateful module used before its state exists (e.g. eval-mode BN without
// accumulated statistics).
struct StateError : Error {
  using Error::Error;
};

// Metric preconditions violated (zero reference, single-class EER input).
struct MetricError : Error {
  using Error::Error;
};

// The finite-difference oracle detected a non-deterministic function.
struct OracleError : Error {
  using Error::Error;
};

// Training diverged (non-finite loss).
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace tss
