#pragma once

// SLIM: per-item non-negative elastic-net regression of an item column on the
// other item columns, solved by covariance coordinate descent.
//
// Column j minimizes
//     0.5 * |x_j - X w|^2 + l1 * sum(w) + 0.5 * l2 * |w|^2,   w >= 0, w_j = 0.
//
// With w >= 0 and a non-negative Gram matrix, a coordinate k whose Gram entry
// with j is zero can never leave zero, so only co-occurring items are visited.

#include <cmath>
#include <memory>
#include <vector>

#include "convmap/dataio.hpp"
#include "convmap/knn.hpp"
#include "convmap/scoring.hpp"

namespace convmap {

struct SlimOptions {
    double l1 = 1e-3;
    double l2 = 1e-3;
    std::size_t top_k = 100;
    std::size_t max_iterations = 1000;
    double tolerance = 1e-10;
};

struct SlimColumn {
    std::vector<SimilarityMatrix::Entry> weights;  // (source item, weight)
    bool converged = true;
    std::size_t iterations = 0;
};

class SlimSolver {
public:
    explicit SlimSolver(const InteractionMatrix& train) : n_items_(train.n_items()) {
        const InteractionMatrix item_users = train.transpose();
        detail::SimRows rows(n_items_);
        std::vector<double> acc(n_items_, 0.0);
        std::vector<char> seen(n_items_, 0);
        std::vector<Index> touched;
        for (Index a = 0; a < n_items_; ++a) {
            for (const auto& e : item_users.row(a))
                for (const auto& f : train.row(e.item)) {
                    if (!seen[f.item]) {
                        seen[f.item] = 1;
                        touched.push_back(f.item);
                    }
                    acc[f.item] += e.value * f.value;
                }
            for (Index b : touched) {
                if (acc[b] != 0.0) rows[a].emplace_back(b, acc[b]);
                acc[b] = 0.0;
                seen[b] = 0;
            }
            touched.clear();
        }
        gram_ = SimilarityMatrix::from_rows(n_items_, rows);
        diag_.resize(n_items_);
        for (Index a = 0; a < n_items_; ++a) diag_[a] = gram_.at(a, a);
    }

    Index n_items() const noexcept { return n_items_; }

    SlimColumn fit_column(Index target, const SlimOptions& opt) const {
        if (target >= n_items_) throw Error("slim: target item out of range");
        if (!(opt.l1 >= 0.0) || !(opt.l2 >= 0.0)) throw Error("slim: l1 and l2 must be non-negative");
        // candidates: items co-occurring with the target
        std::vector<Index> cand;
        std::vector<double> c;
        for (std::size_t k = 0; k < gram_.row_cols(target).size(); ++k) {
            const Index i = gram_.row_cols(target)[k];
            if (i == target) continue;
            cand.push_back(i);
            c.push_back(gram_.row_vals(target)[k]);
        }
        std::vector<double> w(n_items_, 0.0), q(n_items_, 0.0);
        SlimColumn out;
        out.converged = false;
        for (std::size_t it = 0; it < opt.max_iterations; ++it) {
            double max_delta = 0.0;
            for (std::size_t k = 0; k < cand.size(); ++k) {
                const Index i = cand[k];
                const double denom = diag_[i] + opt.l2;
                if (denom <= 0.0) continue;
                const double num = c[k] - (q[i] - diag_[i] * w[i]) - opt.l1;
                const double updated = num > 0.0 ? num / denom : 0.0;
                const double delta = updated - w[i];
                if (delta == 0.0) continue;
                w[i] = updated;
                const auto cols = gram_.row_cols(i);
                const auto vals = gram_.row_vals(i);
                for (std::size_t m = 0; m < cols.size(); ++m) q[cols[m]] += vals[m] * delta;
                max_delta = std::max(max_delta, std::abs(delta));
            }
            out.iterations = it + 1;
            if (max_delta <= opt.tolerance) {
                out.converged = true;
                break;
            }
        }
        for (Index i : cand)
            if (w[i] > 0.0) out.weights.emplace_back(i, w[i]);
        truncate_top_k(out.weights, opt.top_k);
        std::sort(out.weights.begin(), out.weights.end());
        return out;
    }

private:
    Index n_items_;
    SimilarityMatrix gram_;
    std::vector<double> diag_;
};

inline SlimColumn slim_fit_column(const InteractionMatrix& train, Index target, const SlimOptions& opt) {
    return SlimSolver(train).fit_column(target, opt);
}

/// Fits every column independently. W(i, j) is the weight of source item i
/// for target item j, so scores are profile x W.
inline std::unique_ptr<SimilarityModel> fit_slim(std::shared_ptr<const InteractionMatrix> train, const SlimOptions& opt,
                                                 std::size_t* unconverged = nullptr) {
    const SlimSolver solver(*train);
    detail::SimRows rows(train->n_items());
    std::size_t bad = 0;
    for (Index j = 0; j < train->n_items(); ++j) {
        const auto col = solver.fit_column(j, opt);
        if (!col.converged) ++bad;
        for (const auto& [i, w] : col.weights) rows[i].emplace_back(j, w);
    }
    if (unconverged) *unconverged = bad;
    auto w = SimilarityMatrix::from_rows(train->n_items(), rows);
    return std::make_unique<SimilarityModel>("slim", std::move(w), std::move(train));
}

}  // namespace convmap
