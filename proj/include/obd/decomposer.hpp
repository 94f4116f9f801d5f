#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "obd/covariance.hpp"
#include "obd/matrix.hpp"

namespace obd {

// Whitening mode: which Cholesky factors wrap the weight before SVD. The
// string forms are the stable names used by the CLI and report files.
enum class Mode { PlainSvd, InputWhiten, OutputWhiten, Obd };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& name);

// Rank-r factorization W ≈ b·a with the K-FAC loss of the residual under the
// full whitened metric, whatever mode produced the factors.
struct LowRankFactors {
    Matrix b;               // m×r
    Matrix a;               // r×n
    std::size_t rank = 0;
    Mode mode = Mode::Obd;
    double kfac_loss = 0.0;
};

// Target for one decomposition: exactly one of rank / ratio is set.
struct CompressionSpec {
    std::optional<std::size_t> rank;
    std::optional<double> ratio;
    Mode mode = Mode::Obd;
    double dampening = 0.1;

    std::size_t resolve_rank(std::size_t m, std::size_t n) const;
};

// r = floor((1 − ratio)·m·n/(m + n)), clamped into [1, min(m,n)] with a
// warning when the request degenerates. The achieved ratio is then at least
// the requested one whenever no clamping occurred.
std::size_t rank_for_ratio(std::size_t m, std::size_t n, double ratio);

// 1 − (m·r + n·r)/(m·n), the parameter reduction of storing factors.
double achieved_ratio(std::size_t m, std::size_t n, std::size_t r);

// ||L_gᵀ · ΔW · L_x||_F² with L factors from the pair's covariances.
double kfac_loss(const Matrix& delta_w, const CovariancePair& pair);

// Whitens W by the mode's factors, truncates the SVD at the resolved rank,
// and colors the factors back through triangular solves.
LowRankFactors decompose(const Matrix& w, const CovariancePair& pair,
                         const CompressionSpec& spec);

// Rank-r adapter for a compressed weight: decomposes the residual w − w_hat
// so that w_hat + b·a approximates w under the curvature metric. The reported
// kfac_loss is for w − w_hat − b·a.
LowRankFactors compensate(const Matrix& w, const Matrix& w_hat, const CovariancePair& pair,
                          std::size_t r, Mode mode = Mode::Obd);

}  // namespace obd
