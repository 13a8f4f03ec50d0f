#pragma once

#include <stdexcept>
#include <string>

namespace uwm {

// A numeric contract of an operation was violated (non-Hermitian input,
// shape mismatch, trace underflow, ...). The message names the offending
// quantity and its value.
struct ContractViolation : std::runtime_error {
  explicit ContractViolation(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent configuration (unknown keys, bad enum values,
// impossible geometry). Maps to CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Missing or corrupt data files, schema-version mismatches. Exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite losses, failed factorizations, degenerate measurements. Exit code 4.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace uwm
