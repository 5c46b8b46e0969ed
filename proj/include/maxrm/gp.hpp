#pragma once

// Gaussian-process sample paths with a squared-exponential kernel, used by
// the simulation generators. Function values are drawn jointly at all
// requested points via a dense Cholesky factor with escalating diagonal
// jitter.

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "maxrm/errors.hpp"
#include "maxrm/log.hpp"
#include "maxrm/rng.hpp"

namespace maxrm {

/// k(x, x') = exp(-||x - x'||^2 / (2 l^2)); symmetric with unit diagonal.
/// `points` is row-major n x p.
inline Eigen::MatrixXd gp_kernel_matrix(const std::vector<double>& points, int n, int p,
                                        double lengthscale) {
    if (lengthscale <= 0.0) throw ConfigError("gp: lengthscale must be positive");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        X(points.data(), n, p);
    Eigen::MatrixXd K = X * X.transpose();  // Gram matrix, transformed in place below
    const Eigen::VectorXd sq = K.diagonal();
    const double inv_two_l2 = 1.0 / (2.0 * lengthscale * lengthscale);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const double d2 = std::max(0.0, sq[i] + sq[j] - 2.0 * K(i, j));
            K(i, j) = -d2 * inv_two_l2;
        }
    K = K.array().exp().matrix();
    K.diagonal().setOnes();
    return K;
}

/// One joint draw f ~ N(0, K(points)) returned as a flat vector. The same
/// standard-normal stream is used regardless of how much jitter the Cholesky
/// needs, so the draw is a deterministic function of (points, seed).
inline std::vector<double> sample_gp_values(const std::vector<double>& points, int n, int p,
                                            double lengthscale, std::uint64_t seed) {
    Eigen::VectorXd z(n);
    Rng rng(seed);
    for (int i = 0; i < n; ++i) z[i] = rng.normal();

    const Eigen::MatrixXd K = gp_kernel_matrix(points, n, p, lengthscale);
    for (double jitter = 1e-10; jitter <= 1e-6 * (1.0 + 1e-12); jitter *= 10.0) {
        Eigen::MatrixXd M = K;
        M.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(std::move(M));
        if (llt.info() == Eigen::Success) {
            if (jitter > 1e-10)
                log_debug("gp: kernel Cholesky needed jitter " + std::to_string(jitter));
            const Eigen::VectorXd f = llt.matrixL() * z;
            return {f.data(), f.data() + n};
        }
    }
    throw SolverError("gp: kernel Cholesky failed even with jitter 1e-6 (" +
                      std::to_string(n) + " points)");
}

}  // namespace maxrm
