#include "obd/covariance.hpp"

#include <stdexcept>
#include <string>
#include <utility>

#include "obd/errors.hpp"
#include "obd/factorizations.hpp"
#include "obd/warnings.hpp"

namespace obd {

CovarianceAccumulator::CovarianceAccumulator(std::string layer, std::size_t n, std::size_t m,
                                             bool track_cross)
    : layer_id(std::move(layer)), sum_xx(n, n), sum_gg(m, m) {
    if (track_cross) sum_xg.emplace(n, m);
}

void accumulate(CovarianceAccumulator& acc, const Matrix& x_batch, const Matrix& g_batch) {
    if (x_batch.cols() != g_batch.cols()) {
        throw std::invalid_argument("accumulate: token counts differ, " +
                                    std::to_string(x_batch.cols()) + " vs " +
                                    std::to_string(g_batch.cols()));
    }
    if (x_batch.rows() != acc.input_dim() || g_batch.rows() != acc.output_dim()) {
        throw std::invalid_argument(
            "accumulate: batch dims " + std::to_string(x_batch.rows()) + "/" +
            std::to_string(g_batch.rows()) + " do not match layer " + acc.layer_id + " dims " +
            std::to_string(acc.input_dim()) + "/" + std::to_string(acc.output_dim()));
    }
    acc.sum_xx += matmul(x_batch, transpose(x_batch));
    acc.sum_gg += matmul(g_batch, transpose(g_batch));
    if (acc.sum_xg) *acc.sum_xg += matmul(x_batch, transpose(g_batch));
    acc.tokens_seen += x_batch.cols();
}

void merge(CovarianceAccumulator& acc, const CovarianceAccumulator& other) {
    if (acc.input_dim() != other.input_dim() || acc.output_dim() != other.output_dim()) {
        throw std::invalid_argument("merge: accumulator shapes differ for layer " + acc.layer_id);
    }
    if (acc.sum_xg.has_value() != other.sum_xg.has_value()) {
        throw std::invalid_argument("merge: cross-tracking settings differ for layer " +
                                    acc.layer_id);
    }
    acc.sum_xx += other.sum_xx;
    acc.sum_gg += other.sum_gg;
    if (acc.sum_xg) *acc.sum_xg += *other.sum_xg;
    acc.tokens_seen += other.tokens_seen;
}

CovariancePair finalize(const CovarianceAccumulator& acc, double dampening_fraction) {
    Matrix c_x = acc.sum_xx;
    Matrix c_g = acc.sum_gg;
    if (acc.tokens_seen == 0) {
        warn("finalize: no tokens accumulated for layer " + acc.layer_id +
             "; covariances fall back to the epsilon floor");
    } else {
        const double scale = 1.0 / static_cast<double>(acc.tokens_seen);
        c_x *= scale;
        c_g *= scale;
    }
    return CovariancePair{dampen(c_x, dampening_fraction), dampen(c_g, dampening_fraction),
                          dampening_fraction, acc.tokens_seen};
}

CovariancePair pair_from_matrices(const Matrix& c_x, const Matrix& c_g,
                                  double dampening_fraction) {
    return CovariancePair{dampen(c_x, dampening_fraction), dampen(c_g, dampening_fraction),
                          dampening_fraction, 0};
}

double correlation_factor(const CovarianceAccumulator& acc) {
    if (!acc.sum_xg) {
        throw std::invalid_argument("correlation_factor: accumulator for layer " + acc.layer_id +
                                    " was built without cross-tracking");
    }
    if (acc.tokens_seen == 0) {
        throw NumericalError("correlation_factor undefined: no tokens accumulated for layer " +
                             acc.layer_id);
    }
    const double denom = frobenius_norm(acc.sum_xx) * frobenius_norm(acc.sum_gg);
    if (denom == 0.0) {
        throw NumericalError("correlation_factor undefined: zero-norm trace for layer " +
                             acc.layer_id);
    }
    return frobenius_norm_sq(*acc.sum_xg) / denom;
}

}  // namespace obd
