#pragma once

#include <stdexcept>
#include <string>

namespace conduct {

// Invalid user-supplied configuration (bad counts, malformed config files).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Inconsistent internal structure (e.g. a firm split across effective groups).
struct StructuralError : std::logic_error {
  using std::logic_error::logic_error;
};

// Inputs outside the mathematical domain of an operation (bad shares, sigma out of range).
struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Singular systems, non-finite intermediates.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Iterative solver did not reach tolerance; carries the last residual.
struct ConvergenceError : std::runtime_error {
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what + " (last residual " + std::to_string(residual) + ")"),
        last_residual(residual) {}
  double last_residual;
};

// Dataset/schema violations on CSV ingestion.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace conduct
