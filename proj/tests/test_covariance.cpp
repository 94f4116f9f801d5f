#include "obd/covariance.hpp"

#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "obd/errors.hpp"
#include "obd/factorizations.hpp"
#include "obd/matrix.hpp"
#include "obd/rng.hpp"
#include "obd/warnings.hpp"
#include "test_support.hpp"

using namespace obd;
using test::max_abs_diff;
using test::random_matrix;
using test::rel_err;

TEST_CASE("accumulate identity columns") {
    Rng rng(41);
    CovarianceAccumulator acc("layer", 2, 3);
    accumulate(acc, Matrix::identity(2), random_matrix(rng, 3, 2));
    CHECK(max_abs_diff(acc.sum_xx, Matrix::identity(2)) == 0.0);
    CHECK(acc.tokens_seen == 2);
}

TEST_CASE("accumulate additivity: two calls equal one concatenated call") {
    Rng rng(42);
    Matrix x1 = random_matrix(rng, 3, 4);
    Matrix x2 = random_matrix(rng, 3, 2);
    Matrix g1 = random_matrix(rng, 2, 4);
    Matrix g2 = random_matrix(rng, 2, 2);

    Matrix x_cat(3, 6);
    Matrix g_cat(2, 6);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t t = 0; t < 4; ++t) x_cat(i, t) = x1(i, t);
        for (std::size_t t = 0; t < 2; ++t) x_cat(i, 4 + t) = x2(i, t);
    }
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t t = 0; t < 4; ++t) g_cat(i, t) = g1(i, t);
        for (std::size_t t = 0; t < 2; ++t) g_cat(i, 4 + t) = g2(i, t);
    }

    CovarianceAccumulator split("layer", 3, 2, true);
    accumulate(split, x1, g1);
    accumulate(split, x2, g2);
    CovarianceAccumulator joint("layer", 3, 2, true);
    accumulate(joint, x_cat, g_cat);

    CHECK(split.tokens_seen == joint.tokens_seen);
    CHECK(max_abs_diff(split.sum_xx, joint.sum_xx) <= 1e-12);
    CHECK(max_abs_diff(split.sum_gg, joint.sum_gg) <= 1e-12);
    CHECK(max_abs_diff(*split.sum_xg, *joint.sum_xg) <= 1e-12);
}

TEST_CASE("accumulated sums are symmetric PSD") {
    Rng rng(43);
    CovarianceAccumulator acc("layer", 4, 3);
    for (int batch = 0; batch < 5; ++batch) {
        accumulate(acc, random_matrix(rng, 4, 6), random_matrix(rng, 3, 6));
    }
    CHECK(is_symmetric(acc.sum_xx, 1e-10));
    CHECK(is_symmetric(acc.sum_gg, 1e-10));
    EigResult ex = sym_eig(acc.sum_xx);
    EigResult eg = sym_eig(acc.sum_gg);
    CHECK(ex.lambda.back() >= -1e-10);
    CHECK(eg.lambda.back() >= -1e-10);
}

TEST_CASE("accumulate rejects mismatched batches") {
    CovarianceAccumulator acc("layer", 3, 2);
    CHECK_THROWS_AS(accumulate(acc, Matrix(3, 4), Matrix(2, 5)), std::invalid_argument);
    CHECK_THROWS_AS(accumulate(acc, Matrix(4, 4), Matrix(2, 4)), std::invalid_argument);
}

TEST_CASE("finalize keeps a degenerate covariance without dampening") {
    CovarianceAccumulator acc("layer", 3, 2);
    Matrix x(3, 4);
    for (std::size_t t = 0; t < 4; ++t) x(0, t) = 1.0;  // t copies of e1
    accumulate(acc, x, Matrix(2, 4));

    int warnings = 0;
    auto previous = set_warning_handler([&](const std::string&) { ++warnings; });
    CovariancePair pair = finalize(acc, 0.0);
    set_warning_handler(previous);

    Matrix e1e1(3, 3);
    e1e1(0, 0) = 1.0;
    CHECK(max_abs_diff(pair.c_x, e1e1) <= 1e-12);
    CHECK(pair.tokens == 4);
}

TEST_CASE("finalize normalizes then dampens") {
    CovarianceAccumulator acc("layer", 2, 2);
    // Two tokens whose second moment normalizes to diag(1, 3).
    Matrix x{{std::sqrt(2.0), 0.0}, {0.0, std::sqrt(6.0)}};
    accumulate(acc, x, x);
    CovariancePair pair = finalize(acc, 0.1);
    CHECK(pair.c_x(0, 0) == doctest::Approx(1.2).epsilon(1e-12));
    CHECK(pair.c_x(1, 1) == doctest::Approx(3.2).epsilon(1e-12));
    CHECK(pair.dampening == 0.1);
}

TEST_CASE("finalize on random traces is always factorizable") {
    Rng rng(44);
    for (int trial = 0; trial < 10; ++trial) {
        CovarianceAccumulator acc("layer", 5, 4);
        for (int batch = 0; batch < 3; ++batch) {
            accumulate(acc, random_matrix(rng, 5, 7), random_matrix(rng, 4, 7));
        }
        CovariancePair pair = finalize(acc, 0.1);
        CHECK_NOTHROW(cholesky(pair.c_x));
        CHECK_NOTHROW(cholesky(pair.c_g));
    }
}

TEST_CASE("finalize of an empty accumulator warns and stays factorizable") {
    CovarianceAccumulator acc("layer", 3, 3);
    int warnings = 0;
    auto previous = set_warning_handler([&](const std::string&) { ++warnings; });
    CovariancePair pair = finalize(acc, 0.1);
    set_warning_handler(previous);
    CHECK(warnings > 0);
    CHECK_NOTHROW(cholesky(pair.c_x));
}

TEST_CASE("finalize is invariant to doubling every batch") {
    Rng rng(45);
    Matrix x = random_matrix(rng, 3, 5);
    Matrix g = random_matrix(rng, 2, 5);
    CovarianceAccumulator once("layer", 3, 2);
    accumulate(once, x, g);
    CovarianceAccumulator twice("layer", 3, 2);
    accumulate(twice, x, g);
    accumulate(twice, x, g);
    CovariancePair p1 = finalize(once, 0.1);
    CovariancePair p2 = finalize(twice, 0.1);
    CHECK(max_abs_diff(p1.c_x, p2.c_x) <= 1e-12);
    CHECK(max_abs_diff(p1.c_g, p2.c_g) <= 1e-12);
}

TEST_CASE("accumulation is order-independent up to rounding") {
    Rng rng(46);
    std::vector<Matrix> xs, gs;
    for (int b = 0; b < 4; ++b) {
        xs.push_back(random_matrix(rng, 3, 5));
        gs.push_back(random_matrix(rng, 2, 5));
    }
    CovarianceAccumulator fwd("layer", 3, 2);
    for (int b = 0; b < 4; ++b) accumulate(fwd, xs[b], gs[b]);
    CovarianceAccumulator rev("layer", 3, 2);
    for (int b = 3; b >= 0; --b) accumulate(rev, xs[b], gs[b]);
    CHECK(max_abs_diff(fwd.sum_xx, rev.sum_xx) <= 1e-10 * (1.0 + max_abs(fwd.sum_xx)));
    CHECK(max_abs_diff(fwd.sum_gg, rev.sum_gg) <= 1e-10 * (1.0 + max_abs(fwd.sum_gg)));
}

TEST_CASE("merge sums fields") {
    Rng rng(47);
    CovarianceAccumulator a("layer", 3, 2, true);
    CovarianceAccumulator b("layer", 3, 2, true);
    accumulate(a, random_matrix(rng, 3, 4), random_matrix(rng, 2, 4));
    accumulate(b, random_matrix(rng, 3, 6), random_matrix(rng, 2, 6));
    Matrix expect_xx = a.sum_xx + b.sum_xx;
    merge(a, b);
    CHECK(a.tokens_seen == 10);
    CHECK(max_abs_diff(a.sum_xx, expect_xx) == 0.0);

    CovarianceAccumulator untracked("layer", 3, 2, false);
    CHECK_THROWS_AS(merge(a, untracked), std::invalid_argument);
    CovarianceAccumulator other_shape("layer", 4, 2, true);
    CHECK_THROWS_AS(merge(a, other_shape), std::invalid_argument);
}

TEST_CASE("correlation factor exact cases") {
    // G == X on a square layer: rho is exactly 1.
    Rng rng(48);
    Matrix x = random_matrix(rng, 3, 6);
    CovarianceAccumulator same("layer", 3, 3, true);
    accumulate(same, x, x);
    CHECK(std::fabs(correlation_factor(same) - 1.0) <= 1e-10);

    // X supported on even tokens, G on odd tokens: X·Gᵀ == 0 exactly.
    Matrix x_even(3, 8);
    Matrix g_odd(2, 8);
    Rng rng2(49);
    for (std::size_t t = 0; t < 8; t += 2) {
        for (std::size_t i = 0; i < 3; ++i) x_even(i, t) = rng2.normal();
    }
    for (std::size_t t = 1; t < 8; t += 2) {
        for (std::size_t i = 0; i < 2; ++i) g_odd(i, t) = rng2.normal();
    }
    CovarianceAccumulator disjoint("layer", 3, 2, true);
    accumulate(disjoint, x_even, g_odd);
    CHECK(correlation_factor(disjoint) == 0.0);
}

TEST_CASE("correlation factor matches the direct formula and stays in [0,1]") {
    Rng rng(50);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.index(4);
        const std::size_t m = 2 + rng.index(4);
        const std::size_t t = 3 + rng.index(6);
        Matrix x = random_matrix(rng, n, t);
        Matrix g = random_matrix(rng, m, t);
        CovarianceAccumulator acc("layer", n, m, true);
        accumulate(acc, x, g);
        const double rho = correlation_factor(acc);
        CHECK(rho >= 0.0);
        CHECK(rho <= 1.0 + 1e-12);
        const double direct = frobenius_norm_sq(matmul(x, transpose(g))) /
                              (frobenius_norm(matmul(x, transpose(x))) *
                               frobenius_norm(matmul(g, transpose(g))));
        CHECK(rel_err(rho, direct) <= 1e-12);
    }
}

TEST_CASE("correlation factor error cases") {
    CovarianceAccumulator untracked("layer", 2, 2, false);
    CHECK_THROWS_AS(correlation_factor(untracked), std::invalid_argument);

    CovarianceAccumulator empty("layer", 2, 2, true);
    CHECK_THROWS_AS(correlation_factor(empty), NumericalError);

    CovarianceAccumulator zeros("layer", 2, 2, true);
    accumulate(zeros, Matrix(2, 3), Matrix(2, 3));
    CHECK_THROWS_AS(correlation_factor(zeros), NumericalError);
}
