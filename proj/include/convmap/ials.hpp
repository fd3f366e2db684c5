#pragma once

// Implicit alternating least squares with confidence weighting c = 1 + alpha * r.

#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "convmap/dataio.hpp"
#include "convmap/scoring.hpp"

namespace convmap {

struct IalsOptions {
    Index factors = 64;
    double alpha = 1.0;
    double reg = 1e-2;
    std::size_t iterations = 15;
    std::uint64_t seed = 0;
    double init_scale = 0.01;
};

/// Solves (Y^T C_u Y + reg I) x = Y^T C_u p_u for one row, where `row` holds
/// the observed entries of that user (or item, for the item half-step).
inline Vector ials_solve_row(const Matrix& Y, const Eigen::MatrixXd& YtY, std::span<const Interaction> row,
                             double alpha, double reg) {
    if (!(reg > 0.0)) throw Error("ials: reg must be positive, the normal equations are singular otherwise");
    const auto k = Y.cols();
    Eigen::MatrixXd a = YtY;
    a.diagonal().array() += reg;
    Vector b = Vector::Zero(k);
    for (const auto& e : row) {
        const double c = 1.0 + alpha * e.value;
        const auto y = Y.row(e.item).transpose();
        a.noalias() += (c - 1.0) * y * y.transpose();
        if (e.value > 0.0) b.noalias() += c * y;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw Error("ials: normal equations are not positive definite; increase reg");
    return ldlt.solve(b);
}

/// Recomputes every row of X given fixed Y; `m` rows index X and columns index Y.
inline void ials_half_step(const InteractionMatrix& m, Matrix& X, const Matrix& Y, double alpha, double reg) {
    const Eigen::MatrixXd yty = Y.transpose() * Y;
    for (Index r = 0; r < m.n_users(); ++r) X.row(r) = ials_solve_row(Y, yty, m.row(r), alpha, reg).transpose();
}

/// sum_{u,i} c_ui (p_ui - x_u . y_i)^2 + reg (|X|^2 + |Y|^2) over all pairs.
inline double ials_objective(const InteractionMatrix& train, const Matrix& X, const Matrix& Y, double alpha, double reg) {
    const Eigen::MatrixXd xtx = X.transpose() * X, yty = Y.transpose() * Y;
    double total = xtx.cwiseProduct(yty).sum();  // sum of all squared predictions
    for (const auto& e : train.entries()) {
        const double s = X.row(e.user).dot(Y.row(e.item));
        const double c = 1.0 + alpha * e.value;
        const double p = e.value > 0.0 ? 1.0 : 0.0;
        total += c * (p - s) * (p - s) - s * s;
    }
    return total + reg * (X.squaredNorm() + Y.squaredNorm());
}

struct IalsFit {
    EmbeddingPair factors;
    std::vector<double> objective;  // after each full sweep, when tracked
};

inline IalsFit train_ials(const InteractionMatrix& train, const IalsOptions& opt, bool track_objective = false) {
    if (opt.factors < 1) throw Error("ials: factors must be at least 1");
    if (!(opt.reg > 0.0)) throw Error("ials: reg must be positive, the normal equations are singular otherwise");
    IalsFit fit{EmbeddingPair::random(train.n_users(), train.n_items(), opt.factors, opt.init_scale, opt.seed), {}};
    const InteractionMatrix item_users = train.transpose();
    for (std::size_t it = 0; it < opt.iterations; ++it) {
        ials_half_step(train, fit.factors.P, fit.factors.Q, opt.alpha, opt.reg);
        ials_half_step(item_users, fit.factors.Q, fit.factors.P, opt.alpha, opt.reg);
        if (track_objective) fit.objective.push_back(ials_objective(train, fit.factors.P, fit.factors.Q, opt.alpha, opt.reg));
    }
    return fit;
}

inline std::unique_ptr<FactorModel> fit_ials(const InteractionMatrix& train, const IalsOptions& opt) {
    return std::make_unique<FactorModel>("ials", train_ials(train, opt).factors);
}

}  // namespace convmap
