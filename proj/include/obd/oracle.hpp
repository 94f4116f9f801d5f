#pragma once

#include <cstddef>
#include <cstdint>

#include "obd/covariance.hpp"
#include "obd/matrix.hpp"

namespace obd {

// Which Kronecker argument order reproduced the trace-form loss under the
// row-vec flattening. Recorded because the source derivation writes the two
// orders in different places; the build self-tests instead of trusting either.
enum class KronOrder { cx_cg, cg_cx };

// Dense mn×mn layer Hessian for brute-force verification. Only built at
// oracle scale.
struct ExplicitHessian {
    Matrix h;
    std::size_t m = 0;
    std::size_t n = 0;
    KronOrder order = KronOrder::cg_cx;
};

inline constexpr std::size_t kOracleScaleCap = 4096;

// Forms the explicit Kronecker-product Hessian from a covariance pair, with
// the orientation self-tested against the trace form on random probes.
// Rejects layers with m·n above the scale cap.
ExplicitHessian build_hessian(const CovariancePair& pair,
                              std::size_t max_dim = kOracleScaleCap);

// vec_row(ΔW) · h · vec_row(ΔW)ᵀ.
double quadratic_loss(const ExplicitHessian& h, const Matrix& delta_w);

// tr(ΔWᵀ · C_g · ΔW · C_x), the middle link of the loss derivation chain.
double trace_form_loss(const Matrix& delta_w, const CovariancePair& pair);

// Best (lowest) K-FAC-metric loss over `trials` random rank-r factor pairs,
// each refined by 25 alternating-least-squares passes in the whitened space.
// Deterministic given the seed; trials == 0 yields +infinity.
double random_search_competitor(const Matrix& w, const CovariancePair& pair, std::size_t r,
                                std::size_t trials, std::uint64_t seed);

}  // namespace obd
