#pragma once

#include <stdexcept>
#include <string>

namespace lakd {

// Base for all engine errors. Subclasses distinguish what the CLI maps to
// which exit code and what tests assert on.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not line up; the message names the offending axis.
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid run/plan/model configuration.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A call violated an operation's contract (non-scalar backward, label out
// of range, degenerate metric input, ...).
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// On-disk format violation (checkpoint or dataset files).
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

}  // namespace lakd
