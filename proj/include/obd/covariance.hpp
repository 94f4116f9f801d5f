#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "obd/matrix.hpp"

namespace obd {

// Streaming second-moment sums for one linear layer with m outputs and n
// inputs. X batches are n×t (activation columns), G batches are m×t
// (output-gradient columns). sum_xg is kept only when the correlation
// diagnostic was requested, since it doubles the accumulation work.
struct CovarianceAccumulator {
    CovarianceAccumulator(std::string layer, std::size_t n, std::size_t m,
                          bool track_cross = false);

    std::string layer_id;
    Matrix sum_xx;
    Matrix sum_gg;
    std::optional<Matrix> sum_xg;
    std::size_t tokens_seen = 0;

    std::size_t input_dim() const { return sum_xx.rows(); }
    std::size_t output_dim() const { return sum_gg.rows(); }
};

// Token-normalized, dampened covariances ready for factorization. The
// matrices already include the dampening recorded in `dampening`.
struct CovariancePair {
    Matrix c_x;
    Matrix c_g;
    double dampening = 0.0;
    std::size_t tokens = 0;
};

// sum_xx += X·Xᵀ, sum_gg += G·Gᵀ, sum_xg += X·Gᵀ (when tracked).
void accumulate(CovarianceAccumulator& acc, const Matrix& x_batch, const Matrix& g_batch);

// Adds the sums and token counts of `other` into `acc`. Both accumulators
// must describe the same layer shape and cross-tracking setting.
void merge(CovarianceAccumulator& acc, const CovarianceAccumulator& other);

// Normalizes the sums by tokens_seen and dampens each covariance. An empty
// accumulator degrades to the epsilon-floor path with a warning instead of
// failing.
CovariancePair finalize(const CovarianceAccumulator& acc, double dampening_fraction);

// Builds a pair directly from covariance matrices, applying dampening. Used
// by tests and by the CLI when covariances come from a manifest.
CovariancePair pair_from_matrices(const Matrix& c_x, const Matrix& c_g,
                                  double dampening_fraction);

// Correlation diagnostic: ||XGᵀ||_F² / (||XXᵀ||_F · ||GGᵀ||_F), in [0,1] by
// Cauchy-Schwarz. Small values support the independence assumption behind
// the Kronecker factorization.
double correlation_factor(const CovarianceAccumulator& acc);

}  // namespace obd
