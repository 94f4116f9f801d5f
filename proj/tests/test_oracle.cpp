#include "obd/oracle.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "doctest.h"
#include "obd/covariance.hpp"
#include "obd/decomposer.hpp"
#include "obd/factorizations.hpp"
#include "obd/matrix.hpp"
#include "obd/rng.hpp"
#include "test_support.hpp"

using namespace obd;
using test::random_matrix;
using test::random_spd;
using test::rel_err;

namespace {

CovariancePair random_pair(Rng& rng, std::size_t m, std::size_t n, double dampening = 0.1) {
    return pair_from_matrices(random_spd(rng, n), random_spd(rng, m), dampening);
}

}  // namespace

TEST_CASE("hessian of an identity pair is the identity") {
    CovariancePair pair = pair_from_matrices(Matrix::identity(3), Matrix::identity(2), 0.0);
    ExplicitHessian h = build_hessian(pair);
    CHECK(test::max_abs_diff(h.h, Matrix::identity(6)) == 0.0);
    CHECK(h.m == 2);
    CHECK(h.n == 3);
}

TEST_CASE("hessian of scalar covariances is the product") {
    CovariancePair pair = pair_from_matrices(Matrix{{3.0}}, Matrix{{5.0}}, 0.0);
    ExplicitHessian h = build_hessian(pair);
    CHECK(h.h(0, 0) == doctest::Approx(15.0).epsilon(1e-14));
}

TEST_CASE("hessian orientation is the gradient-covariance-first order") {
    Rng rng(61);
    CovariancePair pair = random_pair(rng, 3, 4);
    ExplicitHessian h = build_hessian(pair);
    CHECK(h.order == KronOrder::cg_cx);
    CHECK(test::max_abs_diff(h.h, kron(pair.c_g, pair.c_x)) == 0.0);
}

TEST_CASE("hessian is symmetric PSD") {
    Rng rng(62);
    CovariancePair pair = random_pair(rng, 3, 3);
    ExplicitHessian h = build_hessian(pair);
    CHECK(is_symmetric(h.h, 1e-10));
    EigResult e = sym_eig(h.h);
    CHECK(e.lambda.back() >= -1e-10);
}

TEST_CASE("hessian scale cap and shape validation") {
    Rng rng(63);
    CovariancePair big = random_pair(rng, 70, 70);
    CHECK_THROWS_AS(build_hessian(big), std::invalid_argument);

    CovariancePair pair = random_pair(rng, 2, 3);
    ExplicitHessian h = build_hessian(pair);
    CHECK_THROWS_AS(quadratic_loss(h, Matrix(3, 2)), std::invalid_argument);
    CHECK_THROWS_AS(trace_form_loss(Matrix(3, 2), pair), std::invalid_argument);
}

TEST_CASE("quadratic loss basics") {
    Rng rng(64);
    CovariancePair identity = pair_from_matrices(Matrix::identity(4), Matrix::identity(3), 0.0);
    ExplicitHessian h = build_hessian(identity);
    CHECK(quadratic_loss(h, Matrix(3, 4)) == 0.0);
    Matrix delta = random_matrix(rng, 3, 4);
    CHECK(rel_err(quadratic_loss(h, delta), frobenius_norm_sq(delta)) <= 1e-12);
}

TEST_CASE("equality chain: quadratic form, trace form, whitened norm") {
    Rng rng(65);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t m = 2 + rng.index(5);
        const std::size_t n = 2 + rng.index(5);
        CovariancePair pair = random_pair(rng, m, n);
        ExplicitHessian h = build_hessian(pair);
        Matrix delta = random_matrix(rng, m, n);
        const double q = quadratic_loss(h, delta);
        const double t = trace_form_loss(delta, pair);
        const double k = kfac_loss(delta, pair);
        CHECK(std::fabs(q - t) <= std::max(1e-10, 1e-8 * std::fabs(t)));
        CHECK(std::fabs(t - k) <= std::max(1e-10, 1e-8 * std::fabs(t)));
    }
}

TEST_CASE("random search competitor sentinel and full-rank sanity") {
    Rng rng(66);
    CovariancePair pair = random_pair(rng, 4, 4);
    Matrix w = random_matrix(rng, 4, 4);
    CHECK(random_search_competitor(w, pair, 2, 0, 7) ==
          std::numeric_limits<double>::infinity());
    CHECK(random_search_competitor(w, pair, 4, 3, 7) <= 1e-10);
    CHECK_THROWS_AS(random_search_competitor(w, pair, 9, 3, 7), std::invalid_argument);
}

TEST_CASE("random search competitor is deterministic in the seed") {
    Rng rng(67);
    CovariancePair pair = random_pair(rng, 5, 4);
    Matrix w = random_matrix(rng, 5, 4);
    const double a = random_search_competitor(w, pair, 2, 10, 1234);
    const double b = random_search_competitor(w, pair, 2, 10, 1234);
    CHECK(a == b);
}

TEST_CASE("refined competitors never beat the decomposer") {
    Rng rng(68);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t m = 3 + rng.index(4);
        const std::size_t n = 3 + rng.index(4);
        const std::size_t r = 1 + rng.index(std::min(m, n) - 1);
        CovariancePair pair = random_pair(rng, m, n);
        Matrix w = random_matrix(rng, m, n);
        CompressionSpec spec;
        spec.rank = r;
        spec.mode = Mode::Obd;
        LowRankFactors best = decompose(w, pair, spec);
        const double competitor = random_search_competitor(w, pair, r, 40, 99 + trial);
        CHECK(competitor >= best.kfac_loss - 1e-10);
    }
}
