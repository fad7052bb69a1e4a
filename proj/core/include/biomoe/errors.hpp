#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace biomoe {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed values passed to an operation (bad shapes, non-finite data, ...).
struct InvalidInputError : Error {
  using Error::Error;
};

/// Violated configuration invariants or malformed config/input files.
struct ConfigError : Error {
  using Error::Error;
};

/// Lookup of a task id that is not registered.
struct UnknownTaskError : Error {
  using Error::Error;
};

/// Operation attempted on an object in the wrong state (e.g. unfilled cache).
struct InvalidStateError : Error {
  using Error::Error;
};

/// Optimization produced a non-finite loss; carries the failing step.
struct TrainingError : Error {
  std::size_t step;
  TrainingError(const std::string& msg, std::size_t at)
      : Error(msg + " (step " + std::to_string(at) + ")"), step(at) {}
};

/// Geometry too degenerate to define the requested construction.
struct DegenerateGeometryError : Error {
  using Error::Error;
};

}  // namespace biomoe
