#pragma once

#include <stdexcept>

namespace mmt {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not satisfy an operation's contract.
struct ShapeError : Error {
  using Error::Error;
};

// A precondition on values (not shapes) was violated.
struct ContractError : Error {
  using Error::Error;
};

// Input is degenerate for the requested computation: all-masked row,
// zero-norm vector, empty pool.
struct DegenerateError : Error {
  using Error::Error;
};

// Malformed or mutually inconsistent data files.
struct DataError : Error {
  using Error::Error;
};

// Invalid run configuration; reported before any work starts.
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite value detected while finite checks are enabled.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace mmt
