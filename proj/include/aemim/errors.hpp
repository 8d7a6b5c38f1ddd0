#pragma once

#include <stdexcept>
#include <string>

namespace aemim {

// Shape/axis disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A caller broke an operation's precondition.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid or out-of-range configuration value.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient; the offending step is aborted.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint loading failures, one kind per failure mode so callers can
// distinguish a stale format from a truncated or corrupted file.
struct CheckpointError : std::runtime_error {
  enum class Kind { VersionMismatch, HashMismatch, Truncated, Corrupted };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

}  // namespace aemim
