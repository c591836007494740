#include "vgp/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vgp {

std::string rank_mode_name(RankMode m) {
    return m == RankMode::relative ? "relative" : "absolute";
}

EighResult jacobi_eigh(const Tensor& sym) {
    if (sym.ndim() != 2 || sym.rows() != sym.cols() || sym.rows() == 0)
        throw ShapeError("jacobi_eigh: expects a non-empty square matrix, got " +
                         shape_str(sym.shape()));
    const std::size_t d = sym.rows();

    double frob = 0.0, asym = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            frob += sym.at(i, j) * sym.at(i, j);
            asym = std::max(asym, std::abs(sym.at(i, j) - sym.at(j, i)));
        }
    frob = std::sqrt(frob);
    if (asym > 1e-9 * std::max(1.0, frob))
        throw std::runtime_error("jacobi_eigh: input is not numerically symmetric");

    std::vector<double> a(sym.data());
    std::vector<double> v(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;

    const double tol = 1e-12 * std::max(1.0, frob);
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (std::sqrt(2.0 * off) <= tol) break;
        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (apq == 0.0) continue;
                const double app = a[p * d + p], aqq = a[q * d + q];
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t i = 0; i < d; ++i) {
                    const double aip = a[i * d + p], aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for (std::size_t j = 0; j < d; ++j) {
                    const double apj = a[p * d + j], aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double vip = v[i * d + p], viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }

    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<double> diag(d);
    for (std::size_t i = 0; i < d; ++i) diag[i] = a[i * d + i];
    std::sort(idx.begin(), idx.end(), [&diag](std::size_t l, std::size_t r) {
        if (diag[l] != diag[r]) return diag[l] > diag[r];
        return l < r;
    });

    EighResult res;
    res.eigenvalues.resize(d);
    std::vector<double> vecs(d * d);
    for (std::size_t col = 0; col < d; ++col) {
        const std::size_t src = idx[col];
        res.eigenvalues[col] = diag[src];
        // sign fix: largest-magnitude component positive
        std::size_t big = 0;
        for (std::size_t i = 1; i < d; ++i)
            if (std::abs(v[i * d + src]) > std::abs(v[big * d + src])) big = i;
        const double sign = v[big * d + src] < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < d; ++i) vecs[i * d + col] = sign * v[i * d + src];
    }
    res.eigenvectors = Tensor::from({d, d}, std::move(vecs));
    return res;
}

std::vector<double> singular_values(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("singular_values: expects 2-D input");
    const std::size_t m = a.rows(), n = a.cols();
    // column-major working copy
    std::vector<std::vector<double>> cols(n, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) cols[j][i] = a.at(i, j);

    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += cols[p][i] * cols[p][i];
                    beta += cols[q][i] * cols[q][i];
                    gamma += cols[p][i] * cols[q][i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t i = 0; i < m; ++i) {
                    const double vp = cols[p][i], vq = cols[q][i];
                    cols[p][i] = c * vp - s * vq;
                    cols[q][i] = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double sq = 0.0;
        for (std::size_t i = 0; i < m; ++i) sq += cols[j][i] * cols[j][i];
        sigma[j] = std::sqrt(sq);
    }
    std::sort(sigma.begin(), sigma.end(), std::greater<double>());
    return sigma;
}

PcaResult pca_analyze(const Tensor& x, double epsilon, RankMode mode,
                      std::string normalization) {
    if (x.ndim() != 2 || x.cols() == 0)
        throw ShapeError("pca_analyze: expects [N x d] with d >= 1, got " +
                         shape_str(x.shape()));
    if (x.rows() == 0) throw ShapeError("pca_analyze: N must be >= 1");
    const std::size_t n = x.rows(), d = x.cols();

    std::vector<double> cov(d * d, 0.0);
    for (std::size_t row = 0; row < n; ++row) {
        const double* xr = x.data().data() + row * d;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i; j < d; ++j) cov[i * d + j] += xr[i] * xr[j];
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j) cov[i * d + j] = cov[j * d + i];
    Tensor sigma = Tensor::from({d, d}, std::move(cov));

    EighResult eig = jacobi_eigh(sigma);
    for (double& lambda : eig.eigenvalues) {
        if (lambda < -1e-10)
            throw std::runtime_error("pca_analyze: covariance produced eigenvalue " +
                                     std::to_string(lambda) + " below the numerical floor");
        if (lambda < 0.0) lambda = 0.0;
    }

    PcaResult res;
    res.eigenvalues = std::move(eig.eigenvalues);
    res.eigenvectors = eig.eigenvectors;
    {
        NoGradGuard ng;
        res.coefficients = matmul(x, res.eigenvectors);
    }
    res.epsilon = epsilon;
    res.mode = mode;
    res.normalization = std::move(normalization);

    const double lead = res.eigenvalues.empty() ? 0.0 : res.eigenvalues[0];
    for (double lambda : res.eigenvalues) {
        const double value = mode == RankMode::relative ? (lead > 0.0 ? lambda / lead : 0.0)
                                                        : lambda;
        if (value > epsilon) ++res.est_rank;
    }
    return res;
}

RankProfileReport rank_profile(const std::vector<Tensor>& features_per_layer, double epsilon,
                               RankMode mode, const std::string& normalization) {
    RankProfileReport report;
    report.epsilon = epsilon;
    report.mode = mode;
    report.normalization = normalization;
    for (std::size_t layer = 0; layer < features_per_layer.size(); ++layer) {
        const Tensor prepared = normalize_rows(features_per_layer[layer], normalization);
        PcaResult pca = pca_analyze(prepared, epsilon, mode, normalization);
        LayerRankProfile prof;
        prof.layer = layer;
        prof.est_rank = pca.est_rank;
        prof.eigenvalues = pca.eigenvalues;
        const std::size_t n = pca.coefficients.rows(), d = pca.coefficients.cols();
        prof.mean_abs_coefficient.assign(d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                prof.mean_abs_coefficient[j] += std::abs(pca.coefficients.at(i, j));
        for (double& v : prof.mean_abs_coefficient) v /= static_cast<double>(n);
        report.layers.push_back(std::move(prof));
    }
    return report;
}

Tensor rgb_map(const Tensor& coefficients) {
    if (coefficients.ndim() != 2 || coefficients.cols() < 3)
        throw ShapeError("rgb_map: needs at least 3 coefficient columns, got " +
                         shape_str(coefficients.shape()));
    const std::size_t n = coefficients.rows();
    std::vector<double> out(n * 3);
    for (std::size_t j = 0; j < 3; ++j) {
        double lo = coefficients.at(0, j), hi = lo;
        for (std::size_t i = 1; i < n; ++i) {
            lo = std::min(lo, coefficients.at(i, j));
            hi = std::max(hi, coefficients.at(i, j));
        }
        const double span = hi - lo;
        for (std::size_t i = 0; i < n; ++i)
            out[i * 3 + j] = span == 0.0 ? 0.5 : (coefficients.at(i, j) - lo) / span;
    }
    return Tensor::from({n, 3}, std::move(out));
}

Tensor normalize_rows(const Tensor& x, const std::string& mode) {
    if (mode == "none") return x;
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> out(x.data());
    if (mode == "l2") {
        for (std::size_t i = 0; i < n; ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < d; ++j) sq += out[i * d + j] * out[i * d + j];
            const double norm = std::sqrt(sq);
            if (norm > 0.0)
                for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norm;
        }
    } else if (mode == "center") {
        for (std::size_t j = 0; j < d; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += out[i * d + j];
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) out[i * d + j] -= mean;
        }
    } else {
        throw ConfigError("normalize_rows: unknown mode '" + mode + "'");
    }
    return Tensor::from({n, d}, std::move(out));
}

}  // namespace vgp
