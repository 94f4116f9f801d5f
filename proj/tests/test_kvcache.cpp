#include "obd/kvcache.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "obd/covariance.hpp"
#include "obd/decomposer.hpp"
#include "obd/matrix.hpp"
#include "obd/rng.hpp"
#include "test_support.hpp"

using namespace obd;
using test::max_abs_diff;
using test::random_matrix;
using test::random_orthonormal;
using test::random_spd;
using test::rel_err;

namespace {

// K-FAC-metric reconstruction error summed over sample rows, computed from
// the raw quadratic form rather than any whitened shortcut.
double total_metric_error(const Matrix& k, const Matrix& k_hat, const Matrix& h_k) {
    Matrix diff = k - k_hat;
    Matrix q = matmul(diff, matmul(h_k, transpose(diff)));
    double sum = 0.0;
    for (std::size_t t = 0; t < q.rows(); ++t) sum += q(t, t);
    return sum;
}

}  // namespace

TEST_CASE("per-head decomposition with one head matches the plain path") {
    Rng rng(91);
    Matrix w_v = random_matrix(rng, 4, 6);
    Matrix c_x = random_spd(rng, 6);
    Matrix c_g = random_spd(rng, 4);
    HeadPartition part{1, 4};

    std::vector<LowRankFactors> heads =
        decompose_v_per_head(w_v, c_x, {c_g}, part, 2, 0.1);
    REQUIRE(heads.size() == 1);

    CompressionSpec spec;
    spec.rank = 2;
    spec.mode = Mode::Obd;
    LowRankFactors whole = decompose(w_v, pair_from_matrices(c_x, c_g, 0.1), spec);
    CHECK(max_abs_diff(matmul(heads[0].b, heads[0].a), matmul(whole.b, whole.a)) <= 1e-10);
}

TEST_CASE("per-head full rank with identity covariances reproduces the weight") {
    Rng rng(92);
    HeadPartition part{3, 2};
    Matrix w_v = random_matrix(rng, 6, 5);
    std::vector<Matrix> c_gs(3, Matrix::identity(2));

    std::vector<LowRankFactors> heads =
        decompose_v_per_head(w_v, Matrix::identity(5), c_gs, part, 2, 0.0);
    REQUIRE(heads.size() == 3);
    for (std::size_t head = 0; head < 3; ++head) {
        Matrix approx = matmul(heads[head].b, heads[head].a);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                CHECK(std::fabs(approx(i, j) - w_v(2 * head + i, j)) <= 1e-8);
            }
        }
    }
}

TEST_CASE("per-head decomposition beats the monolithic slice under its own metric") {
    Rng rng(93);
    HeadPartition part{2, 3};
    const std::size_t n = 5;
    Matrix w_v = random_matrix(rng, part.rows(), n);
    Matrix c_x = random_spd(rng, n);
    Matrix c_g_full = random_spd(rng, part.rows());
    std::vector<Matrix> c_g_heads;
    for (std::size_t head = 0; head < 2; ++head) {
        Matrix block(3, 3);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                block(i, j) = c_g_full(3 * head + i, 3 * head + j);
            }
        }
        c_g_heads.push_back(block);
    }

    const std::size_t r = 2;
    std::vector<LowRankFactors> heads =
        decompose_v_per_head(w_v, c_x, c_g_heads, part, r, 0.1);

    CompressionSpec spec;
    spec.rank = r;
    spec.mode = Mode::Obd;
    LowRankFactors mono = decompose(w_v, pair_from_matrices(c_x, c_g_full, 0.1), spec);

    for (std::size_t head = 0; head < 2; ++head) {
        Matrix slice_product(3, n);
        Matrix mono_product = matmul(mono.b, mono.a);
        Matrix w_block(3, n);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                slice_product(i, j) = mono_product(3 * head + i, j);
                w_block(i, j) = w_v(3 * head + i, j);
            }
        }
        CovariancePair head_pair = pair_from_matrices(c_x, c_g_heads[head], 0.1);
        const double sliced_loss = kfac_loss(w_block - slice_product, head_pair);
        CHECK(heads[head].kfac_loss <= sliced_loss + 1e-10);
    }
}

TEST_CASE("per-head decomposition validates its inputs") {
    Rng rng(94);
    Matrix w_v = random_matrix(rng, 6, 4);
    Matrix c_x = random_spd(rng, 4);
    std::vector<Matrix> two_heads(2, Matrix::identity(3));
    CHECK_THROWS_AS(decompose_v_per_head(w_v, c_x, two_heads, HeadPartition{2, 2}, 1, 0.1),
                    std::invalid_argument);
    CHECK_THROWS_AS(decompose_v_per_head(w_v, c_x, two_heads, HeadPartition{4, 2}, 1, 0.1),
                    std::invalid_argument);
    std::vector<Matrix> wrong_dim(2, Matrix::identity(2));
    CHECK_THROWS_AS(decompose_v_per_head(w_v, c_x, wrong_dim, HeadPartition{2, 3}, 1, 0.1),
                    std::invalid_argument);
    CHECK_THROWS_AS(decompose_v_per_head(w_v, random_spd(rng, 5), two_heads,
                                         HeadPartition{2, 3}, 1, 0.1),
                    std::invalid_argument);
}

TEST_CASE("k compressor full-rank round trip") {
    Rng rng(95);
    const std::size_t d = 6;
    Matrix k = random_matrix(rng, 20, d);
    Matrix h_k = dampen(random_spd(rng, d), 0.1);
    KCompressor comp = fit_k_compressor(k, h_k, d);
    Matrix round = reconstruct(comp, compress(comp, k));
    CHECK(frobenius_norm(round - k) <= 1e-8 * (1.0 + frobenius_norm(k)));
    CHECK(comp.compression_ratio() == 0.0);
}

TEST_CASE("identity curvature reduces to ordinary PCA") {
    Rng rng(96);
    const std::size_t d = 5;
    Matrix k = random_matrix(rng, 30, d);
    KCompressor comp = fit_k_compressor(k, Matrix::identity(d), 3);

    EigResult pca = sym_eig(matmul(transpose(k), k));
    Matrix u3(d, 3);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < 3; ++j) u3(i, j) = pca.u(i, j);
    }
    // Compare projectors, which are basis-sign-free.
    Matrix p_comp = matmul(comp.u_r, transpose(comp.u_r));
    Matrix p_pca = matmul(u3, transpose(u3));
    CHECK(max_abs_diff(p_comp, p_pca) <= 1e-8);

    Matrix k_hat = reconstruct(comp, compress(comp, k));
    CHECK(max_abs_diff(k_hat, matmul(k, p_pca)) <= 1e-8);
}

TEST_CASE("metric reconstruction error equals the dropped eigenvalue sum") {
    Rng rng(97);
    const std::size_t d = 8;
    Matrix k = random_matrix(rng, 64, d);
    Matrix h_k = dampen(random_spd(rng, d), 0.1);
    KCompressor comp = fit_k_compressor(k, h_k, 3);

    Matrix k_hat = reconstruct(comp, compress(comp, k));
    const double err = total_metric_error(k, k_hat, h_k);
    double dropped = 0.0;
    for (std::size_t i = 3; i < d; ++i) dropped += comp.scatter_eigenvalues[i];
    CHECK(rel_err(err, dropped) <= 1e-8);
}

TEST_CASE("fitted basis beats random rank-r bases") {
    Rng rng(98);
    const std::size_t d = 6;
    Matrix k = random_matrix(rng, 40, d);
    Matrix h_k = dampen(random_spd(rng, d), 0.1);
    KCompressor comp = fit_k_compressor(k, h_k, 2);
    Matrix k_hat = reconstruct(comp, compress(comp, k));
    const double fitted = total_metric_error(k, k_hat, h_k);

    CholeskyFactor l_k = cholesky(h_k);
    Matrix whitened = matmul(k, l_k.l);
    for (int trial = 0; trial < 100; ++trial) {
        Matrix q = random_orthonormal(rng, d, 2);
        Matrix projected = matmul(matmul(whitened, q), transpose(q));
        const double err = frobenius_norm_sq(whitened - projected);
        CHECK(err >= fitted - 1e-10);
    }
}

TEST_CASE("compressor basic contracts") {
    Rng rng(99);
    const std::size_t d = 5;
    Matrix k = random_matrix(rng, 16, d);
    Matrix h_k = dampen(random_spd(rng, d), 0.1);
    KCompressor comp = fit_k_compressor(k, h_k, 2);

    CHECK(max_abs_diff(matmul(transpose(comp.u_r), comp.u_r), Matrix::identity(2)) <= 1e-8);
    CHECK(comp.compression_ratio() == doctest::Approx(1.0 - 2.0 / 5.0).epsilon(1e-14));

    CHECK(frobenius_norm(compress(comp, Matrix(1, d))) == 0.0);
    CHECK(frobenius_norm(reconstruct(comp, Matrix(1, 2))) == 0.0);

    Matrix one_key = random_matrix(rng, 1, d);
    Matrix code = compress(comp, one_key);
    CHECK(frobenius_norm(code) <= frobenius_norm(matmul(one_key, comp.l_k.l)) + 1e-10);

    // Whitened residual is orthogonal to the kept subspace.
    Matrix k_hat = reconstruct(comp, code);
    Matrix residual_white = matmul(one_key - k_hat, comp.l_k.l);
    Matrix overlap = matmul(residual_white, comp.u_r);
    CHECK(frobenius_norm(overlap) <= 1e-8 * (1.0 + frobenius_norm(one_key)));

    CHECK_THROWS_AS(fit_k_compressor(k, h_k, 0), std::invalid_argument);
    CHECK_THROWS_AS(fit_k_compressor(k, h_k, d + 1), std::invalid_argument);
    CHECK_THROWS_AS(fit_k_compressor(Matrix(4, 3), h_k, 2), std::invalid_argument);
    CHECK_THROWS_AS(compress(comp, Matrix(1, 4)), std::invalid_argument);
    CHECK_THROWS_AS(reconstruct(comp, Matrix(1, 3)), std::invalid_argument);
}
