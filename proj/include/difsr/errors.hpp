#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace difsr {

/// Operand extents do not fit the operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// An integer index fell outside its table.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// A caller broke a precondition of the API (non-scalar backward root,
/// padding target, AAP disabled, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Softmax row with no admissible entry.
struct DegenerateRowError : std::domain_error {
  using std::domain_error::domain_error;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line_number)
      : std::runtime_error("line " + std::to_string(line_number) + ": " + what),
        line(line_number) {}
  std::size_t line;
};

struct EmptyDatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration or command-line input. Maps to exit code 1.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct LookupError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// NaN or infinity in a loss or gradient.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace difsr
