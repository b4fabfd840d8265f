#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace pinnpi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values produced by dynamics, costs or losses.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Violated modelling assumption (degenerate diffusion, non-concave cost).
class AssumptionError : public Error {
 public:
  using Error::Error;
};

/// Operation requires a control structure the problem does not have.
class StructureError : public Error {
 public:
  using Error::Error;
};

/// Failure inside one of the reference solvers.
class OracleError : public Error {
 public:
  using Error::Error;
};

/// The requested oracle comparison is not available for the problem.
class UnsupportedComparison : public OracleError {
 public:
  using OracleError::OracleError;
};

/// Malformed or inconsistent run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Residual training blew up; carries the loss history up to the failure.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> loss_trace)
      : NumericalError(what), loss_trace_(std::move(loss_trace)) {}

  const std::vector<double>& loss_trace() const noexcept { return loss_trace_; }

 private:
  std::vector<double> loss_trace_;
};

}  // namespace pinnpi
