#ifndef VGP_PCA_HPP
#define VGP_PCA_HPP

#include <string>
#include <vector>

#include "vgp/tensor.hpp"

namespace vgp {

enum class RankMode { relative, absolute };

std::string rank_mode_name(RankMode m);

struct EighResult {
    std::vector<double> eigenvalues;  // non-increasing
    Tensor eigenvectors;              // [d x d], orthonormal columns, sign-fixed
};

/// Deterministic cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Fixed sweep order, off-diagonal convergence tolerance 1e-12 (relative to
/// the Frobenius norm). Eigenvector signs are fixed by making the
/// largest-magnitude component of each column positive.
EighResult jacobi_eigh(const Tensor& sym);

/// Singular values of a general [m x n] matrix by one-sided Jacobi
/// (accurate for the small singular values the low-rank checks look at).
std::vector<double> singular_values(const Tensor& a);

struct PcaResult {
    std::vector<double> eigenvalues;  // lambda_1 >= ... >= lambda_d >= 0
    Tensor eigenvectors;              // [d x d]
    Tensor coefficients;              // [N x d] = X . V
    std::size_t est_rank = 0;
    double epsilon = 0.25;
    RankMode mode = RankMode::relative;
    std::string normalization;  // how the caller prepared the rows
};

/// Eigendecomposition of the covariance Sigma = X^T X. Rows are expected to
/// be pre-normalized by the caller; the mode string is only recorded.
/// est_rank counts eigenvalues above epsilon, after dividing by lambda_1
/// when the relative mode is on.
PcaResult pca_analyze(const Tensor& x, double epsilon, RankMode mode = RankMode::relative,
                      std::string normalization = "none");

struct LayerRankProfile {
    std::size_t layer = 0;
    std::size_t est_rank = 0;
    std::vector<double> eigenvalues;
    std::vector<double> mean_abs_coefficient;  // long-tail curve, one per component
};

struct RankProfileReport {
    double epsilon = 0.25;
    RankMode mode = RankMode::relative;
    std::string normalization;
    std::vector<LayerRankProfile> layers;
};

RankProfileReport rank_profile(const std::vector<Tensor>& features_per_layer, double epsilon,
                               RankMode mode, const std::string& normalization);

/// First three coefficient columns min-max scaled to [0, 1] per column;
/// constant columns map to 0.5.
Tensor rgb_map(const Tensor& coefficients);

/// Row preparation used by the analyzer CLI: "none", "l2" (unit rows) or
/// "center" (subtract the column mean).
Tensor normalize_rows(const Tensor& x, const std::string& mode);

}  // namespace vgp

#endif
