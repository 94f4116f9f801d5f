#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace obd {

// Base for failures of the numerical kernels, as opposed to bad arguments
// (std::invalid_argument). The CLI maps the two classes to distinct exit codes.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Cholesky hit a non-positive pivot. Carries the pivot index so callers can
// tell which leading minor failed (usually a sign of insufficient dampening).
struct NotPositiveDefiniteError : NumericalError {
    NotPositiveDefiniteError(const std::string& msg, std::size_t pivot_index)
        : NumericalError(msg), pivot(pivot_index) {}
    std::size_t pivot;
};

// A triangular factor with a zero diagonal entry was handed to a solve.
struct SingularFactorError : NumericalError {
    explicit SingularFactorError(const std::string& msg) : NumericalError(msg) {}
};

// An iterative kernel ran out of sweeps. The message carries the residual.
struct ConvergenceError : NumericalError {
    explicit ConvergenceError(const std::string& msg) : NumericalError(msg) {}
};

struct NonFiniteError : NumericalError {
    explicit NonFiniteError(const std::string& msg) : NumericalError(msg) {}
};

}  // namespace obd
