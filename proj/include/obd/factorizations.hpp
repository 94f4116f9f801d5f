#pragma once

#include <cstddef>
#include <vector>

#include "obd/matrix.hpp"

namespace obd {

// Lower-triangular factor L with L·Lᵀ equal to the (dampened) covariance it
// came from. dampening_applied records the fraction used for provenance.
struct CholeskyFactor {
    Matrix l;
    std::size_t dim = 0;
    double dampening_applied = 0.0;
};

// Thin SVD of an m×n input: u is m×k, v is n×k, k = min(m,n), sigma
// non-increasing and nonnegative. Sign convention: the largest-magnitude
// entry of each u column is positive.
struct SvdResult {
    Matrix u;
    std::vector<double> sigma;
    Matrix v;
};

// Eigendecomposition of a symmetric matrix: u orthogonal d×d, lambda
// descending by value. Same column sign convention as SvdResult.
struct EigResult {
    Matrix u;
    std::vector<double> lambda;
};

inline constexpr double kDampenEpsilonFloor = 1e-8;

// Returns c + fraction·mean(diag(c))·I. A nonpositive diagonal mean (empty or
// degenerate traces) falls back to fraction·kDampenEpsilonFloor·I with a
// warning so the Cholesky stays defined.
Matrix dampen(const Matrix& c, double fraction);

// Lower-triangular Cholesky of a symmetric positive-definite matrix. The
// caller dampens first; a nonpositive pivot raises NotPositiveDefiniteError
// carrying the pivot index. dampening_applied is stored on the factor.
CholeskyFactor cholesky(const Matrix& c, double dampening_applied = 0.0);

// dampen followed by cholesky, stamping the fraction on the factor.
CholeskyFactor dampened_cholesky(const Matrix& c, double fraction);

// Solves lᵀ·B == y for B by back-substitution. y has l.dim rows.
Matrix triangular_solve_lower_left(const CholeskyFactor& l, const Matrix& y);

// Solves A·l == y for A, working across columns. y has l.dim columns.
Matrix triangular_solve_lower_right(const CholeskyFactor& l, const Matrix& y);

// Solves l·B == y for B by forward substitution. Needed wherever a factor
// must divide from the left without transposition (whitening checks, the
// K-cache reconstruction map).
Matrix triangular_solve_forward(const CholeskyFactor& l, const Matrix& y);

// One-sided Jacobi SVD. Deterministic for a fixed input; convergence cap of
// 100 sweeps, off-diagonal tolerance 1e-12 relative.
SvdResult svd(const Matrix& w);

// Cyclic two-sided Jacobi eigendecomposition of a symmetric matrix.
EigResult sym_eig(const Matrix& s);

}  // namespace obd
