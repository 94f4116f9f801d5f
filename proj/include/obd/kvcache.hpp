#pragma once

#include <cstddef>
#include <vector>

#include "obd/decomposer.hpp"
#include "obd/factorizations.hpp"
#include "obd/matrix.hpp"

namespace obd {

// Row partition of a projection weight into attention heads. The full output
// dimension is num_heads · head_dim exactly.
struct HeadPartition {
    std::size_t num_heads = 0;
    std::size_t head_dim = 0;

    std::size_t rows() const { return num_heads * head_dim; }
};

// Key-cache compressor: keys are token rows (1×d), codes are 1×r. u_r spans
// the top-r directions of the whitened scatter; `reconstruct` maps a code
// back to key space in one multiply and is precomputed through a triangular
// solve so no factor is ever explicitly undone entry-wise.
struct KCompressor {
    CholeskyFactor l_k;
    Matrix u_r;                             // d×r
    Matrix reconstruct;                     // r×d
    std::size_t rank = 0;
    std::vector<double> scatter_eigenvalues;  // all d, descending

    std::size_t dim() const { return l_k.dim; }
    double compression_ratio() const {
        return 1.0 - static_cast<double>(rank) / static_cast<double>(dim());
    }
};

// Decomposes each head's row block of w_v in obd mode, sharing c_x across
// heads and pairing it with that head's own gradient covariance. Covariance
// inputs are raw; `dampening` is applied per pair.
std::vector<LowRankFactors> decompose_v_per_head(const Matrix& w_v, const Matrix& c_x,
                                                 const std::vector<Matrix>& per_head_c_g,
                                                 const HeadPartition& part, std::size_t r,
                                                 double dampening = 0.0);

// Fits the compressor on a t×d sample matrix: whiten rows by L_K, take the
// top-r eigenvectors of the whitened d×d scatter. h_k must already be
// dampened SPD.
KCompressor fit_k_compressor(const Matrix& k_samples, const Matrix& h_k, std::size_t r);

// code = (k·L_K)·u_r for each row of k (t×d in, t×r out).
Matrix compress(const KCompressor& comp, const Matrix& k);

// k̂ = code·reconstruct for each row (t×r in, t×d out).
Matrix reconstruct(const KCompressor& comp, const Matrix& code);

}  // namespace obd
