#pragma once

#include <stdexcept>
#include <string>

namespace peftforge {

// Shape disagreement between operands (e.g. matmul inner dims).
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Violation of an operation's calling contract (non-scalar backward, ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Invalid or inconsistent configuration values.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Object is in the wrong state for the requested operation
// (double hook installation, optimizer stepped before backward, ...).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

// Bad caller-supplied data (token id out of range, ...).
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed file content; message carries the line number.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Requested parameter budget cannot be met.
struct BudgetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (NaN loss abort).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace peftforge
