#pragma once

#include <stdexcept>
#include <string>

namespace evtrack {

// Error taxonomy used across the library. Each maps to a distinct CLI exit
// path, so callers can catch the base or a specific kind.

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents disagree (matmul inner dims, concat axes, ...).
struct ShapeError : Error {
  using Error::Error;
};

// A value-level precondition on input data failed (unsorted stream,
// out-of-range event, degenerate box, ...).
struct InputError : Error {
  using Error::Error;
};

// A structural parameter is invalid (kernel wider than input, tau <= 0,
// indivisible patch size, ...).
struct ParamError : Error {
  using Error::Error;
};

// Non-finite values observed where finite math is required.
struct NumericError : Error {
  using Error::Error;
};

// RunConfig invariant violated; carries the offending field name.
struct ConfigError : Error {
  ConfigError(const std::string& field, const std::string& msg)
      : Error("config field '" + field + "': " + msg), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace evtrack
