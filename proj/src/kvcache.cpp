#include "obd/kvcache.hpp"

#include <stdexcept>
#include <string>

#include "obd/covariance.hpp"
#include "obd/errors.hpp"

namespace obd {

std::vector<LowRankFactors> decompose_v_per_head(const Matrix& w_v, const Matrix& c_x,
                                                 const std::vector<Matrix>& per_head_c_g,
                                                 const HeadPartition& part, std::size_t r,
                                                 double dampening) {
    if (part.num_heads == 0 || part.head_dim == 0 || part.rows() != w_v.rows()) {
        throw std::invalid_argument("decompose_v_per_head: partition " +
                                    std::to_string(part.num_heads) + "x" +
                                    std::to_string(part.head_dim) + " does not tile " +
                                    std::to_string(w_v.rows()) + " weight rows");
    }
    if (per_head_c_g.size() != part.num_heads) {
        throw std::invalid_argument("decompose_v_per_head: expected " +
                                    std::to_string(part.num_heads) + " head covariances, got " +
                                    std::to_string(per_head_c_g.size()));
    }
    if (c_x.rows() != w_v.cols()) {
        throw std::invalid_argument("decompose_v_per_head: c_x dim " +
                                    std::to_string(c_x.rows()) + " does not match " +
                                    std::to_string(w_v.cols()) + " weight cols");
    }

    std::vector<LowRankFactors> out;
    out.reserve(part.num_heads);
    for (std::size_t head = 0; head < part.num_heads; ++head) {
        const Matrix& c_g = per_head_c_g[head];
        if (c_g.rows() != part.head_dim || c_g.cols() != part.head_dim) {
            throw std::invalid_argument("decompose_v_per_head: head " + std::to_string(head) +
                                        " covariance is " + std::to_string(c_g.rows()) + "x" +
                                        std::to_string(c_g.cols()) + ", expected " +
                                        std::to_string(part.head_dim) + " square");
        }
        Matrix block(part.head_dim, w_v.cols());
        for (std::size_t i = 0; i < part.head_dim; ++i) {
            for (std::size_t j = 0; j < w_v.cols(); ++j) {
                block(i, j) = w_v(head * part.head_dim + i, j);
            }
        }
        CompressionSpec spec;
        spec.rank = r;
        spec.mode = Mode::Obd;
        spec.dampening = dampening;
        out.push_back(decompose(block, pair_from_matrices(c_x, c_g, dampening), spec));
    }
    return out;
}

KCompressor fit_k_compressor(const Matrix& k_samples, const Matrix& h_k, std::size_t r) {
    const std::size_t d = h_k.rows();
    if (k_samples.cols() != d) {
        throw std::invalid_argument("fit_k_compressor: samples have " +
                                    std::to_string(k_samples.cols()) + " columns but h_k is " +
                                    std::to_string(d) + "x" + std::to_string(h_k.cols()));
    }
    if (r < 1 || r > d) {
        throw std::invalid_argument("fit_k_compressor: rank " + std::to_string(r) +
                                    " outside [1, " + std::to_string(d) + "]");
    }
    CholeskyFactor l_k = cholesky(h_k);
    Matrix whitened = matmul(k_samples, l_k.l);
    EigResult scatter = sym_eig(matmul(transpose(whitened), whitened));

    Matrix u_r(d, r);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < r; ++j) u_r(i, j) = scatter.u(i, j);
    }
    // reconstruct·L_K == u_rᵀ, so a code maps back through u_r and then the
    // factor in a single precomputed multiply.
    Matrix rec = triangular_solve_lower_right(l_k, transpose(u_r));
    return KCompressor{std::move(l_k), std::move(u_r), std::move(rec), r,
                       std::move(scatter.lambda)};
}

Matrix compress(const KCompressor& comp, const Matrix& k) {
    if (k.cols() != comp.dim()) {
        throw std::invalid_argument("compress: key width " + std::to_string(k.cols()) +
                                    " does not match compressor dim " +
                                    std::to_string(comp.dim()));
    }
    return matmul(matmul(k, comp.l_k.l), comp.u_r);
}

Matrix reconstruct(const KCompressor& comp, const Matrix& code) {
    if (code.cols() != comp.rank) {
        throw std::invalid_argument("reconstruct: code width " + std::to_string(code.cols()) +
                                    " does not match rank " + std::to_string(comp.rank));
    }
    return matmul(code, comp.reconstruct);
}

}  // namespace obd
