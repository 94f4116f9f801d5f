#include "obd/factorizations.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "obd/errors.hpp"
#include "obd/warnings.hpp"

namespace obd {

namespace {

void require_square_symmetric(const Matrix& c, const char* op) {
    if (c.rows() != c.cols()) {
        throw std::invalid_argument(std::string(op) + " requires a square matrix, got " +
                                    std::to_string(c.rows()) + "x" + std::to_string(c.cols()));
    }
    const double tol = 1e-10 * std::max(1.0, max_abs(c));
    if (!is_symmetric(c, tol)) {
        throw std::invalid_argument(std::string(op) + " requires a symmetric matrix");
    }
    check_finite(c, op);
}

void require_nonsingular_diagonal(const CholeskyFactor& l) {
    for (std::size_t j = 0; j < l.dim; ++j) {
        if (l.l(j, j) == 0.0) {
            throw SingularFactorError("triangular factor has zero diagonal at index " +
                                      std::to_string(j));
        }
    }
}

// Sorts singular triplets descending (stable in the original column order),
// regenerates columns whose singular value collapsed to zero, and applies the
// sign convention: largest-magnitude entry of each u column positive.
void canonicalize_svd(Matrix& u, std::vector<double>& sigma, Matrix& v) {
    const std::size_t k = sigma.size();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

    Matrix u_sorted(u.rows(), k);
    Matrix v_sorted(v.rows(), k);
    std::vector<double> sigma_sorted(k);
    for (std::size_t j = 0; j < k; ++j) {
        sigma_sorted[j] = sigma[order[j]];
        for (std::size_t i = 0; i < u.rows(); ++i) u_sorted(i, j) = u(i, order[j]);
        for (std::size_t i = 0; i < v.rows(); ++i) v_sorted(i, j) = v(i, order[j]);
    }
    u = std::move(u_sorted);
    v = std::move(v_sorted);
    sigma = std::move(sigma_sorted);

    const double sigma_max = sigma.empty() ? 0.0 : sigma.front();
    const double zero_tol = 1e-13 * sigma_max;

    // Replace columns belonging to zero singular values with a deterministic
    // orthonormal completion built from coordinate vectors.
    auto complete_column = [](Matrix& q, std::size_t col) {
        const std::size_t d = q.rows();
        for (std::size_t cand = 0; cand < d; ++cand) {
            std::vector<double> w(d, 0.0);
            w[cand] = 1.0;
            double norm = 0.0;
            // Two orthogonalization passes keep the column orthogonal even
            // when the first projection leaves only a small residual.
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t p = 0; p < q.cols(); ++p) {
                    if (p == col) continue;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < d; ++i) dot += w[i] * q(i, p);
                    for (std::size_t i = 0; i < d; ++i) w[i] -= dot * q(i, p);
                }
                norm = 0.0;
                for (double x : w) norm += x * x;
                norm = std::sqrt(norm);
                if (norm <= 1e-6) break;
                for (double& x : w) x /= norm;
            }
            if (norm > 1e-6) {
                for (std::size_t i = 0; i < d; ++i) q(i, col) = w[i];
                return;
            }
        }
        throw NumericalError("failed to complete an orthonormal basis column");
    };

    for (std::size_t j = 0; j < k; ++j) {
        if (sigma[j] <= zero_tol) {
            sigma[j] = 0.0;
            for (std::size_t i = 0; i < u.rows(); ++i) u(i, j) = 0.0;
            for (std::size_t i = 0; i < v.rows(); ++i) v(i, j) = 0.0;
            complete_column(u, j);
            complete_column(v, j);
        }
    }

    for (std::size_t j = 0; j < k; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < u.rows(); ++i) {
            const double a = std::fabs(u(i, j));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < u.rows(); ++i) u(i, j) = -u(i, j);
            for (std::size_t i = 0; i < v.rows(); ++i) v(i, j) = -v(i, j);
        }
    }
}

// One-sided Jacobi on a tall (rows >= cols) matrix: rotate column pairs until
// all columns are mutually orthogonal, then read off norms as singular values.
void jacobi_one_sided(Matrix& a, Matrix& v) {
    const std::size_t n = a.cols();
    const double tol = 1e-12;
    const int max_sweeps = 100;
    double worst = 0.0;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        // Rank-deficient inputs leave columns that collapse to rounding noise;
        // their pair correlations are garbage of order one and would thrash
        // forever, so columns far below the largest norm are frozen.
        double max_norm2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double norm2 = 0.0;
            for (std::size_t i = 0; i < a.rows(); ++i) norm2 += a(i, j) * a(i, j);
            max_norm2 = std::max(max_norm2, norm2);
        }
        const double floor2 = 1e-26 * max_norm2;
        bool rotated = false;
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    alpha += a(i, p) * a(i, p);
                    beta += a(i, q) * a(i, q);
                    gamma += a(i, p) * a(i, q);
                }
                const double scale = std::sqrt(alpha * beta);
                if (scale == 0.0 || alpha <= floor2 || beta <= floor2) continue;
                worst = std::max(worst, std::fabs(gamma) / scale);
                if (std::fabs(gamma) <= tol * scale) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t =
                    (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    const double aip = a(i, p);
                    const double aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v(i, p);
                    const double viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
        if (!rotated) return;
    }
    throw ConvergenceError("one-sided Jacobi SVD did not converge in 100 sweeps; worst relative "
                           "column correlation " +
                           std::to_string(worst));
}

}  // namespace

Matrix dampen(const Matrix& c, double fraction) {
    require_square_symmetric(c, "dampen");
    if (fraction < 0.0) {
        throw std::invalid_argument("dampening fraction must be nonnegative, got " +
                                    std::to_string(fraction));
    }
    if (fraction == 0.0) return c;
    const std::size_t n = c.rows();
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean_diag += c(i, i);
    mean_diag /= static_cast<double>(n);
    if (mean_diag <= 0.0) {
        warn("dampen: nonpositive diagonal mean " + std::to_string(mean_diag) +
             ", falling back to the epsilon floor");
        mean_diag = kDampenEpsilonFloor;
    }
    Matrix out = c;
    const double shift = fraction * mean_diag;
    for (std::size_t i = 0; i < n; ++i) out(i, i) += shift;
    return out;
}

CholeskyFactor cholesky(const Matrix& c, double dampening_applied) {
    require_square_symmetric(c, "cholesky");
    const std::size_t n = c.rows();
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double pivot_sq = c(j, j);
        for (std::size_t k = 0; k < j; ++k) pivot_sq -= l(j, k) * l(j, k);
        if (pivot_sq <= 0.0) {
            throw NotPositiveDefiniteError(
                "matrix is not positive definite: pivot " + std::to_string(j) +
                    " is nonpositive (" + std::to_string(pivot_sq) +
                    "); dampening may be insufficient",
                j);
        }
        l(j, j) = std::sqrt(pivot_sq);
        for (std::size_t i = j + 1; i < n; ++i) {
            double sum = c(i, j);
            for (std::size_t k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
            l(i, j) = sum / l(j, j);
        }
    }
    check_finite(l, "cholesky");
    return CholeskyFactor{std::move(l), n, dampening_applied};
}

CholeskyFactor dampened_cholesky(const Matrix& c, double fraction) {
    return cholesky(dampen(c, fraction), fraction);
}

Matrix triangular_solve_lower_left(const CholeskyFactor& l, const Matrix& y) {
    if (y.rows() != l.dim) {
        throw std::invalid_argument("solve dimension mismatch: factor dim " +
                                    std::to_string(l.dim) + " vs " + std::to_string(y.rows()) +
                                    " rows");
    }
    require_nonsingular_diagonal(l);
    const std::size_t n = l.dim;
    Matrix b(n, y.cols());
    for (std::size_t c = 0; c < y.cols(); ++c) {
        for (std::size_t ii = n; ii-- > 0;) {
            double sum = y(ii, c);
            for (std::size_t j = ii + 1; j < n; ++j) sum -= l.l(j, ii) * b(j, c);
            b(ii, c) = sum / l.l(ii, ii);
        }
    }
    check_finite(b, "triangular solve (transposed-left)");
    return b;
}

Matrix triangular_solve_lower_right(const CholeskyFactor& l, const Matrix& y) {
    if (y.cols() != l.dim) {
        throw std::invalid_argument("solve dimension mismatch: factor dim " +
                                    std::to_string(l.dim) + " vs " + std::to_string(y.cols()) +
                                    " cols");
    }
    require_nonsingular_diagonal(l);
    const std::size_t n = l.dim;
    Matrix a(y.rows(), n);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        for (std::size_t jj = n; jj-- > 0;) {
            double sum = y(r, jj);
            for (std::size_t k = jj + 1; k < n; ++k) sum -= a(r, k) * l.l(k, jj);
            a(r, jj) = sum / l.l(jj, jj);
        }
    }
    check_finite(a, "triangular solve (right)");
    return a;
}

Matrix triangular_solve_forward(const CholeskyFactor& l, const Matrix& y) {
    if (y.rows() != l.dim) {
        throw std::invalid_argument("solve dimension mismatch: factor dim " +
                                    std::to_string(l.dim) + " vs " + std::to_string(y.rows()) +
                                    " rows");
    }
    require_nonsingular_diagonal(l);
    const std::size_t n = l.dim;
    Matrix b(n, y.cols());
    for (std::size_t c = 0; c < y.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double sum = y(i, c);
            for (std::size_t j = 0; j < i; ++j) sum -= l.l(i, j) * b(j, c);
            b(i, c) = sum / l.l(i, i);
        }
    }
    check_finite(b, "triangular solve (forward)");
    return b;
}

SvdResult svd(const Matrix& w) {
    check_finite(w, "svd");
    const bool flipped = w.rows() < w.cols();
    Matrix work = flipped ? transpose(w) : w;
    const std::size_t k = work.cols();
    Matrix rot = Matrix::identity(k);
    jacobi_one_sided(work, rot);

    std::vector<double> sigma(k);
    for (std::size_t j = 0; j < k; ++j) {
        double norm = 0.0;
        for (std::size_t i = 0; i < work.rows(); ++i) norm += work(i, j) * work(i, j);
        sigma[j] = std::sqrt(norm);
        if (sigma[j] > 0.0) {
            for (std::size_t i = 0; i < work.rows(); ++i) work(i, j) /= sigma[j];
        }
    }

    Matrix u = flipped ? std::move(rot) : std::move(work);
    Matrix v = flipped ? std::move(work) : std::move(rot);
    canonicalize_svd(u, sigma, v);
    check_finite(u, "svd");
    check_finite(v, "svd");
    return SvdResult{std::move(u), std::move(sigma), std::move(v)};
}

EigResult sym_eig(const Matrix& s) {
    require_square_symmetric(s, "sym_eig");
    const std::size_t n = s.rows();
    Matrix b = s;
    Matrix u = Matrix::identity(n);
    const double norm = frobenius_norm(s);
    const double tol = 1e-12 * norm;
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) off += 2.0 * b(p, q) * b(p, q);
        }
        if (std::sqrt(off) <= tol) {
            std::vector<double> lambda(n);
            for (std::size_t i = 0; i < n; ++i) lambda[i] = b(i, i);

            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
                return lambda[x] > lambda[y];
            });
            Matrix u_sorted(n, n);
            std::vector<double> lambda_sorted(n);
            for (std::size_t j = 0; j < n; ++j) {
                lambda_sorted[j] = lambda[order[j]];
                for (std::size_t i = 0; i < n; ++i) u_sorted(i, j) = u(i, order[j]);
            }
            for (std::size_t j = 0; j < n; ++j) {
                std::size_t arg = 0;
                double best = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double a = std::fabs(u_sorted(i, j));
                    if (a > best) {
                        best = a;
                        arg = i;
                    }
                }
                if (u_sorted(arg, j) < 0.0) {
                    for (std::size_t i = 0; i < n; ++i) u_sorted(i, j) = -u_sorted(i, j);
                }
            }
            check_finite(u_sorted, "sym_eig");
            return EigResult{std::move(u_sorted), std::move(lambda_sorted)};
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (b(p, q) == 0.0) continue;
                const double tau = (b(q, q) - b(p, p)) / (2.0 * b(p, q));
                const double t =
                    (tau >= 0.0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = c * t;
                const double bpq = b(p, q);
                for (std::size_t i = 0; i < n; ++i) {
                    if (i == p || i == q) continue;
                    const double bip = b(i, p);
                    const double biq = b(i, q);
                    b(i, p) = b(p, i) = c * bip - sn * biq;
                    b(i, q) = b(q, i) = sn * bip + c * biq;
                }
                b(p, p) -= t * bpq;
                b(q, q) += t * bpq;
                b(p, q) = b(q, p) = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double uip = u(i, p);
                    const double uiq = u(i, q);
                    u(i, p) = c * uip - sn * uiq;
                    u(i, q) = sn * uip + c * uiq;
                }
            }
        }
    }
    throw ConvergenceError("Jacobi eigendecomposition did not converge in 100 sweeps");
}

}  // namespace obd
