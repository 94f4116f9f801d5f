#include "obd/oracle.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

#include "obd/errors.hpp"
#include "obd/factorizations.hpp"
#include "obd/rng.hpp"

namespace obd {

namespace {

Matrix random_probe(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = rng.normal();
    }
    return m;
}

double quadratic_form(const Matrix& h, const Matrix& delta_w) {
    Matrix flat = vec_row(delta_w);
    Matrix hv = matmul(h, transpose(flat));
    double sum = 0.0;
    for (std::size_t i = 0; i < hv.rows(); ++i) sum += flat(0, i) * hv(i, 0);
    return sum;
}

bool matches_trace_form(const Matrix& h, const CovariancePair& pair, std::size_t m,
                        std::size_t n) {
    Rng rng(0x0bd);
    for (int probe = 0; probe < 3; ++probe) {
        Matrix delta = random_probe(rng, m, n);
        const double q = quadratic_form(h, delta);
        const double t = trace_form_loss(delta, pair);
        if (std::fabs(q - t) > 1e-8 * std::max(1.0, std::fabs(t))) return false;
    }
    return true;
}

// Solves the SPD system M·X == rhs through Cholesky and two triangular
// solves, retrying with growing diagonal jitter when M is numerically
// rank-deficient. Returns nothing when even the jittered factorization fails.
std::optional<Matrix> spd_solve(const Matrix& m, const Matrix& rhs) {
    double jitter = 0.0;
    double base = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) base += m(i, i);
    base = std::max(base / static_cast<double>(m.rows()), kDampenEpsilonFloor);
    for (int attempt = 0; attempt < 4; ++attempt) {
        Matrix shifted = m;
        for (std::size_t i = 0; i < m.rows(); ++i) shifted(i, i) += jitter;
        try {
            CholeskyFactor l = cholesky(shifted);
            Matrix half = triangular_solve_forward(l, rhs);
            return triangular_solve_lower_left(l, half);
        } catch (const NotPositiveDefiniteError&) {
            jitter = (jitter == 0.0) ? 1e-10 * base : jitter * 100.0;
        }
    }
    return std::nullopt;
}

}  // namespace

ExplicitHessian build_hessian(const CovariancePair& pair, std::size_t max_dim) {
    const std::size_t m = pair.c_g.rows();
    const std::size_t n = pair.c_x.rows();
    if (m * n > max_dim) {
        throw std::invalid_argument("build_hessian: layer size " + std::to_string(m) + "x" +
                                    std::to_string(n) + " exceeds the oracle scale cap of " +
                                    std::to_string(max_dim));
    }
    // The derivation source uses both argument orders in different lines, so
    // the orientation is decided by self-test rather than notation.
    Matrix h = kron(pair.c_g, pair.c_x);
    KronOrder order = KronOrder::cg_cx;
    if (!matches_trace_form(h, pair, m, n)) {
        h = kron(pair.c_x, pair.c_g);
        order = KronOrder::cx_cg;
        if (!matches_trace_form(h, pair, m, n)) {
            throw NumericalError(
                "build_hessian: neither Kronecker orientation reproduces the trace form");
        }
    }
    if (!is_symmetric(h, 1e-8 * std::max(1.0, max_abs(h)))) {
        throw NumericalError("build_hessian: explicit Hessian is not symmetric");
    }
    return ExplicitHessian{std::move(h), m, n, order};
}

double quadratic_loss(const ExplicitHessian& h, const Matrix& delta_w) {
    if (delta_w.rows() != h.m || delta_w.cols() != h.n) {
        throw std::invalid_argument("quadratic_loss: delta shape " +
                                    std::to_string(delta_w.rows()) + "x" +
                                    std::to_string(delta_w.cols()) + " does not match Hessian for " +
                                    std::to_string(h.m) + "x" + std::to_string(h.n));
    }
    return quadratic_form(h.h, delta_w);
}

double trace_form_loss(const Matrix& delta_w, const CovariancePair& pair) {
    if (delta_w.rows() != pair.c_g.rows() || delta_w.cols() != pair.c_x.rows()) {
        throw std::invalid_argument("trace_form_loss: delta shape " +
                                    std::to_string(delta_w.rows()) + "x" +
                                    std::to_string(delta_w.cols()) + " does not match covariances");
    }
    return trace(matmul(transpose(delta_w), matmul(pair.c_g, matmul(delta_w, pair.c_x))));
}

double random_search_competitor(const Matrix& w, const CovariancePair& pair, std::size_t r,
                                std::size_t trials, std::uint64_t seed) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    if (r < 1 || r > std::min(m, n)) {
        throw std::invalid_argument("random_search_competitor: rank " + std::to_string(r) +
                                    " outside [1, min(m,n)]");
    }
    if (trials == 0) return std::numeric_limits<double>::infinity();

    // Work in the whitened space: the triangular maps put rank-r pairs there
    // in one-to-one correspondence with rank-r pairs on the original weights,
    // at equal K-FAC loss, so searching whitened coordinates loses nothing.
    CholeskyFactor l_g = cholesky(pair.c_g, pair.dampening);
    CholeskyFactor l_x = cholesky(pair.c_x, pair.dampening);
    Matrix w_tilde = matmul(transpose(l_g.l), matmul(w, l_x.l));

    Rng rng(seed);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Matrix b = random_probe(rng, m, r);
        Matrix a = random_probe(rng, r, n);
        best = std::min(best, frobenius_norm_sq(w_tilde - matmul(b, a)));
        for (int iter = 0; iter < 25; ++iter) {
            std::optional<Matrix> bt =
                spd_solve(matmul(a, transpose(a)), matmul(a, transpose(w_tilde)));
            if (!bt) break;
            b = transpose(*bt);
            std::optional<Matrix> at =
                spd_solve(matmul(transpose(b), b), matmul(transpose(b), w_tilde));
            if (!at) break;
            a = *at;
        }
        best = std::min(best, frobenius_norm_sq(w_tilde - matmul(b, a)));
    }
    return best;
}

}  // namespace obd
