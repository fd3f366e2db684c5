#pragma once

#include <algorithm>
#include <memory>

#include <Eigen/Dense>

#include "convmap/dataio.hpp"
#include "convmap/scoring.hpp"

namespace convmap {

struct PureSvdOptions {
    /// Matrices with at most this many cells are decomposed densely.
    std::size_t dense_cell_limit = 4'000'000;
    Index oversampling = 10;
    Index power_iterations = 6;
    std::uint64_t seed = 0;
};

namespace detail {

inline Matrix dense_interactions(const InteractionMatrix& m) {
    Matrix r = Matrix::Zero(m.n_users(), m.n_items());
    for (const auto& e : m.entries()) r(e.user, e.item) = e.value;
    return r;
}

/// R * X for sparse R.
inline Eigen::MatrixXd sparse_times(const InteractionMatrix& r, const Eigen::MatrixXd& x) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(r.n_users(), x.cols());
    for (const auto& e : r.entries()) out.row(e.user) += e.value * x.row(e.item);
    return out;
}

/// R^T * X for sparse R.
inline Eigen::MatrixXd sparse_transpose_times(const InteractionMatrix& r, const Eigen::MatrixXd& x) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(r.n_items(), x.cols());
    for (const auto& e : r.entries()) out.row(e.item) += e.value * x.row(e.user);
    return out;
}

inline Eigen::MatrixXd orthonormal_basis(const Eigen::MatrixXd& a) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    return qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
}

}  // namespace detail

/// Truncated SVD R ~ U_k S_k V_k^T stored as user factors U_k S_k and item
/// factors V_k. Dense decomposition for small matrices, randomized subspace
/// iteration otherwise.
inline EmbeddingPair truncated_svd_factors(const InteractionMatrix& train, Index rank, const PureSvdOptions& opt = {}) {
    const Index lim = std::min(train.n_users(), train.n_items());
    if (rank < 1 || rank > lim)
        throw Error("puresvd: rank " + std::to_string(rank) + " outside [1, " + std::to_string(lim) + "]");
    EmbeddingPair f;
    if (static_cast<std::size_t>(train.n_users()) * train.n_items() <= opt.dense_cell_limit) {
        const Eigen::MatrixXd r = detail::dense_interactions(train);
        Eigen::BDCSVD<Eigen::MatrixXd> svd(r, Eigen::ComputeThinU | Eigen::ComputeThinV);
        f.P = svd.matrixU().leftCols(rank) * svd.singularValues().head(rank).asDiagonal();
        f.Q = svd.matrixV().leftCols(rank);
        return f;
    }
    const Index width = std::min<Index>(rank + opt.oversampling, lim);
    Eigen::MatrixXd omega(train.n_items(), width);
    Rng rng(opt.seed);
    for (Eigen::Index k = 0; k < omega.size(); ++k) omega.data()[k] = rng.normal();
    Eigen::MatrixXd q = detail::orthonormal_basis(detail::sparse_times(train, omega));
    for (Index it = 0; it < opt.power_iterations; ++it) {
        const Eigen::MatrixXd z = detail::orthonormal_basis(detail::sparse_transpose_times(train, q));
        q = detail::orthonormal_basis(detail::sparse_times(train, z));
    }
    const Eigen::MatrixXd b = detail::sparse_transpose_times(train, q).transpose();  // width x N
    Eigen::BDCSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
    f.P = (q * svd.matrixU()).leftCols(rank) * svd.singularValues().head(rank).asDiagonal();
    f.Q = svd.matrixV().leftCols(rank);
    return f;
}

inline std::unique_ptr<FactorModel> fit_puresvd(const InteractionMatrix& train, Index rank,
                                                const PureSvdOptions& opt = {}) {
    return std::make_unique<FactorModel>("puresvd", truncated_svd_factors(train, rank, opt));
}

}  // namespace convmap
