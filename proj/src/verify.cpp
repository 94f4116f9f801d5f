#include "obd/verify.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "obd/covariance.hpp"
#include "obd/decomposer.hpp"
#include "obd/factorizations.hpp"
#include "obd/kvcache.hpp"
#include "obd/matrix.hpp"
#include "obd/oracle.hpp"
#include "obd/rng.hpp"

namespace obd {

namespace {

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix out(rows, cols);
    for (double& v : out.data()) v = scale * rng.normal();
    return out;
}

Matrix random_spd(Rng& rng, std::size_t n) {
    const std::size_t samples = 2 * n + 4;
    const Matrix x = random_matrix(rng, n, samples);
    Matrix out = matmul(x, transpose(x));
    out *= 1.0 / static_cast<double>(samples);
    return out;
}

bool check_derivation_chain(std::ostream& out) {
    Rng rng(101);
    bool ok = true;
    const int instances = 40;
    for (int i = 0; i < instances && ok; ++i) {
        const std::size_t m = 2 + rng.index(7);
        const std::size_t n = 2 + rng.index(7);
        const CovariancePair pair =
            pair_from_matrices(random_spd(rng, n), random_spd(rng, m), 0.1);
        const ExplicitHessian h = build_hessian(pair);
        const Matrix delta = random_matrix(rng, m, n);
        const double q = quadratic_loss(h, delta);
        const double t = trace_form_loss(delta, pair);
        const double k = kfac_loss(delta, pair);
        const double tol = std::max(1e-10, 1e-8 * std::fabs(t));
        ok = std::fabs(q - t) <= tol && std::fabs(t - k) <= tol;
    }
    out << (ok ? "[PASS]" : "[FAIL]") << " derivation chain: quadratic == trace == whitened ("
        << instances << " instances)\n";
    return ok;
}

bool check_whitening(std::ostream& out) {
    Rng rng(102);
    bool ok = true;
    const int instances = 20;
    for (int i = 0; i < instances && ok; ++i) {
        const std::size_t n = 2 + rng.index(7);
        const Matrix c = dampen(random_spd(rng, n), 0.1);
        const CholeskyFactor l = cholesky(c);
        const Matrix half = triangular_solve_forward(l, c);
        const Matrix white = triangular_solve_forward(l, transpose(half));
        Matrix deviation = white;
        deviation -= Matrix::identity(n);
        ok = frobenius_norm(deviation) <= 1e-8;
    }
    out << (ok ? "[PASS]" : "[FAIL]") << " whitening identity: solve-based L^-1 C L^-T == I ("
        << instances << " instances)\n";
    return ok;
}

bool check_coloring(std::ostream& out) {
    Rng rng(103);
    bool ok = true;
    const int instances = 10;
    for (int i = 0; i < instances && ok; ++i) {
        const std::size_t m = 3 + rng.index(5);
        const std::size_t n = 3 + rng.index(5);
        const CovariancePair pair =
            pair_from_matrices(random_spd(rng, n), random_spd(rng, m), 0.1);
        const Matrix w = random_matrix(rng, m, n);
        CompressionSpec spec;
        spec.rank = 1 + rng.index(std::min(m, n));
        const LowRankFactors factors = decompose(w, pair, spec);

        const CholeskyFactor l_x = cholesky(pair.c_x);
        const CholeskyFactor l_g = cholesky(pair.c_g);
        const Matrix whitened = matmul(transpose(l_g.l), matmul(w, l_x.l));
        const SvdResult svd_w = svd(whitened);
        const std::size_t r = factors.rank;
        Matrix b_target(m, r), a_target(r, n);
        for (std::size_t row = 0; row < m; ++row) {
            for (std::size_t j = 0; j < r; ++j) {
                b_target(row, j) = svd_w.u(row, j) * std::sqrt(svd_w.sigma[j]);
            }
        }
        for (std::size_t j = 0; j < r; ++j) {
            for (std::size_t col = 0; col < n; ++col) {
                a_target(j, col) = std::sqrt(svd_w.sigma[j]) * svd_w.v(col, j);
            }
        }
        Matrix b_residual = matmul(transpose(l_g.l), factors.b);
        b_residual -= b_target;
        Matrix a_residual = matmul(factors.a, l_x.l);
        a_residual -= a_target;
        const double bound = 1e-10 * frobenius_norm(whitened);
        ok = frobenius_norm(b_residual) <= bound && frobenius_norm(a_residual) <= bound;
    }
    out << (ok ? "[PASS]" : "[FAIL]")
        << " coloring exactness: factors hit their whitened targets through solves (" << instances
        << " instances)\n";
    return ok;
}

bool check_optimality(std::ostream& out) {
    Rng rng(104);
    bool ok = true;
    const int instances = 10;
    for (int i = 0; i < instances && ok; ++i) {
        const std::size_t m = 3 + rng.index(4);
        const std::size_t n = 3 + rng.index(4);
        const CovariancePair pair =
            pair_from_matrices(random_spd(rng, n), random_spd(rng, m), 0.1);
        const Matrix w = random_matrix(rng, m, n);
        const std::size_t r = 1 + rng.index(std::min({m, n, std::size_t{3}}));

        CompressionSpec spec;
        spec.rank = r;
        spec.mode = Mode::Obd;
        const LowRankFactors best = decompose(w, pair, spec);
        for (Mode mode : {Mode::PlainSvd, Mode::InputWhiten, Mode::OutputWhiten}) {
            CompressionSpec other = spec;
            other.mode = mode;
            ok = ok && decompose(w, pair, other).kfac_loss >= best.kfac_loss - 1e-10;
        }
        const double competitor = random_search_competitor(w, pair, r, 100, 500 + i);
        ok = ok && competitor >= best.kfac_loss - 1e-10;

        const CholeskyFactor l_x = cholesky(pair.c_x);
        const CholeskyFactor l_g = cholesky(pair.c_g);
        const SvdResult svd_w = svd(matmul(transpose(l_g.l), matmul(w, l_x.l)));
        double tail = 0.0;
        for (std::size_t j = r; j < svd_w.sigma.size(); ++j) {
            tail += svd_w.sigma[j] * svd_w.sigma[j];
        }
        ok = ok && std::fabs(best.kfac_loss - tail) <= 1e-8 * std::max(1.0, tail);
    }
    out << (ok ? "[PASS]" : "[FAIL]")
        << " decomposition optimality: beats all modes and refined random pairs (" << instances
        << " instances)\n";
    return ok;
}

bool check_kcache(std::ostream& out) {
    Rng rng(105);
    bool ok = true;
    const int instances = 5;
    for (int i = 0; i < instances && ok; ++i) {
        const std::size_t d = 4 + rng.index(4);
        const std::size_t t = 3 * d;
        const Matrix k = random_matrix(rng, t, d);
        const Matrix h_k = dampen(random_spd(rng, d), 0.1);
        const std::size_t r = 1 + rng.index(d);

        const KCompressor comp = fit_k_compressor(k, h_k, r);
        const Matrix k_hat = reconstruct(comp, compress(comp, k));
        Matrix residual = k;
        residual -= k_hat;
        const Matrix h_res = matmul(residual, h_k);
        double metric_error = 0.0;
        for (std::size_t row = 0; row < t; ++row) {
            for (std::size_t col = 0; col < d; ++col) {
                metric_error += residual(row, col) * h_res(row, col);
            }
        }
        double dropped = 0.0;
        for (std::size_t j = r; j < d; ++j) dropped += comp.scatter_eigenvalues[j];
        ok = std::fabs(metric_error - dropped) <= 1e-8 * std::max(1.0, dropped);

        const KCompressor full = fit_k_compressor(k, h_k, d);
        Matrix round_trip = reconstruct(full, compress(full, k));
        round_trip -= k;
        ok = ok && frobenius_norm(round_trip) <= 1e-8 * std::max(1.0, frobenius_norm(k));
    }
    out << (ok ? "[PASS]" : "[FAIL]")
        << " K-cache accounting: metric error == dropped eigenvalues, full rank round trips ("
        << instances << " instances)\n";
    return ok;
}

}  // namespace

bool run_verification_suites(std::ostream& out) {
    bool ok = true;
    ok = check_derivation_chain(out) && ok;
    ok = check_whitening(out) && ok;
    ok = check_coloring(out) && ok;
    ok = check_optimality(out) && ok;
    ok = check_kcache(out) && ok;
    out << (ok ? "all suites passed\n" : "FAILURES above\n");
    return ok;
}

}  // namespace obd
