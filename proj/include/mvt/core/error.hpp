#pragma once

#include <stdexcept>
#include <string>

namespace mvt {

// Error categories surfaced by the library. The CLI maps these onto exit codes.

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Raised when a NaN/Inf appears in a loss or gradient.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed dataset, checkpoint or log file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace mvt
