#include "obd/decomposer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "obd/errors.hpp"
#include "obd/factorizations.hpp"
#include "obd/warnings.hpp"

namespace obd {

namespace {

void require_pair_shape(const Matrix& w, const CovariancePair& pair, const char* op) {
    if (pair.c_g.rows() != w.rows() || pair.c_x.rows() != w.cols()) {
        throw std::invalid_argument(std::string(op) + ": weight shape " +
                                    std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                                    " does not match covariances " +
                                    std::to_string(pair.c_g.rows()) + "/" +
                                    std::to_string(pair.c_x.rows()));
    }
}

bool uses_output_whitening(Mode mode) {
    return mode == Mode::OutputWhiten || mode == Mode::Obd;
}

bool uses_input_whitening(Mode mode) {
    return mode == Mode::InputWhiten || mode == Mode::Obd;
}

}  // namespace

std::string to_string(Mode mode) {
    switch (mode) {
        case Mode::PlainSvd: return "plain-svd";
        case Mode::InputWhiten: return "input-whiten";
        case Mode::OutputWhiten: return "output-whiten";
        case Mode::Obd: return "obd";
    }
    throw std::invalid_argument("unknown mode value");
}

Mode mode_from_string(const std::string& name) {
    if (name == "plain-svd") return Mode::PlainSvd;
    if (name == "input-whiten") return Mode::InputWhiten;
    if (name == "output-whiten") return Mode::OutputWhiten;
    if (name == "obd") return Mode::Obd;
    throw std::invalid_argument("unknown mode \"" + name +
                                "\"; expected plain-svd, input-whiten, output-whiten, or obd");
}

std::size_t CompressionSpec::resolve_rank(std::size_t m, std::size_t n) const {
    if (rank.has_value() == ratio.has_value()) {
        throw std::invalid_argument(
            "compression spec must set exactly one of rank and ratio");
    }
    if (ratio) return rank_for_ratio(m, n, *ratio);
    const std::size_t cap = std::min(m, n);
    std::size_t r = *rank;
    if (r < 1) {
        warn("requested rank 0 clamped to 1");
        r = 1;
    }
    if (r > cap) {
        warn("requested rank " + std::to_string(r) + " clamped to min(m,n) = " +
             std::to_string(cap));
        r = cap;
    }
    return r;
}

std::size_t rank_for_ratio(std::size_t m, std::size_t n, double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw std::invalid_argument("compression ratio must lie in [0,1), got " +
                                    std::to_string(ratio));
    }
    const double mn = static_cast<double>(m) * static_cast<double>(n);
    std::size_t r =
        static_cast<std::size_t>(std::floor((1.0 - ratio) * mn / static_cast<double>(m + n)));
    const std::size_t cap = std::min(m, n);
    if (r < 1) {
        warn("ratio " + std::to_string(ratio) + " leaves no parameters for a rank-1 factor on a " +
             std::to_string(m) + "x" + std::to_string(n) + " layer; clamping rank to 1");
        r = 1;
    }
    if (r > cap) r = cap;
    return r;
}

double achieved_ratio(std::size_t m, std::size_t n, std::size_t r) {
    const double mn = static_cast<double>(m) * static_cast<double>(n);
    return 1.0 - static_cast<double>((m + n) * r) / mn;
}

double kfac_loss(const Matrix& delta_w, const CovariancePair& pair) {
    require_pair_shape(delta_w, pair, "kfac_loss");
    CholeskyFactor l_g = cholesky(pair.c_g, pair.dampening);
    CholeskyFactor l_x = cholesky(pair.c_x, pair.dampening);
    return frobenius_norm_sq(matmul(transpose(l_g.l), matmul(delta_w, l_x.l)));
}

LowRankFactors decompose(const Matrix& w, const CovariancePair& pair,
                         const CompressionSpec& spec) {
    require_pair_shape(w, pair, "decompose");
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    const std::size_t r = spec.resolve_rank(m, n);

    // Identity factors stand in for the sides the mode leaves unwhitened, so
    // every mode flows through the same whiten / truncate / color path.
    CholeskyFactor l_g = uses_output_whitening(spec.mode)
                             ? cholesky(pair.c_g, pair.dampening)
                             : cholesky(Matrix::identity(m));
    CholeskyFactor l_x = uses_input_whitening(spec.mode) ? cholesky(pair.c_x, pair.dampening)
                                                         : cholesky(Matrix::identity(n));

    Matrix w_tilde = matmul(transpose(l_g.l), matmul(w, l_x.l));
    SvdResult factored = svd(w_tilde);

    Matrix b_target(m, r);
    Matrix a_target(r, n);
    for (std::size_t j = 0; j < r; ++j) {
        const double root = std::sqrt(factored.sigma[j]);
        for (std::size_t i = 0; i < m; ++i) b_target(i, j) = factored.u(i, j) * root;
        for (std::size_t c = 0; c < n; ++c) a_target(j, c) = root * factored.v(c, j);
    }

    Matrix b = triangular_solve_lower_left(l_g, b_target);
    Matrix a = triangular_solve_lower_right(l_x, a_target);
    const double loss = kfac_loss(w - matmul(b, a), pair);
    return LowRankFactors{std::move(b), std::move(a), r, spec.mode, loss};
}

LowRankFactors compensate(const Matrix& w, const Matrix& w_hat, const CovariancePair& pair,
                          std::size_t r, Mode mode) {
    if (!w.same_shape(w_hat)) {
        throw std::invalid_argument("compensate: weight shapes differ, " +
                                    std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                                    " vs " + std::to_string(w_hat.rows()) + "x" +
                                    std::to_string(w_hat.cols()));
    }
    CompressionSpec spec;
    spec.rank = r;
    spec.mode = mode;
    spec.dampening = pair.dampening;
    return decompose(w - w_hat, pair, spec);
}

}  // namespace obd
