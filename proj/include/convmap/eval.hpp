#pragma once

// Leave-one-out ranking evaluation: the held-out positive is ranked against
// sampled negatives (or the whole catalog) and scored with HR@c and NDCG@c.

#include <cmath>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "convmap/common.hpp"
#include "convmap/dataio.hpp"
#include "convmap/io.hpp"
#include "convmap/scoring.hpp"

namespace convmap {

/// 1 / log2(rank + 1) when the positive is within the cutoff.
inline double ndcg_at(std::size_t rank, std::size_t cutoff) {
    if (rank < 1) throw Error("rank is 1-based");
    return rank <= cutoff ? 1.0 / std::log2(double(rank) + 1.0) : 0.0;
}

inline double hit_at(std::size_t rank, std::size_t cutoff) {
    if (rank < 1) throw Error("rank is 1-based");
    return rank <= cutoff ? 1.0 : 0.0;
}

/// 1-based rank of the positive. Negatives ranked ahead: strictly higher
/// scores, and equal scores with a lower item index.
inline std::size_t rank_of_positive(double pos_score, Index pos_item, std::span<const double> neg_scores,
                                    std::span<const Index> neg_items) {
    if (std::isnan(pos_score)) pos_score = kNegInf;
    std::size_t rank = 1;
    for (std::size_t k = 0; k < neg_scores.size(); ++k) {
        const double s = std::isnan(neg_scores[k]) ? kNegInf : neg_scores[k];
        if (s > pos_score || (s == pos_score && neg_items[k] < pos_item)) ++rank;
    }
    return rank;
}

enum class EvalTarget { test, validation };

struct EvalConfig {
    /// Sampled negatives per user; 0 ranks against every non-excluded item.
    std::size_t n_negatives = 99;
    std::vector<std::size_t> cutoffs{1, 5, 10, 20};
    std::uint64_t seed = 0;
    EvalTarget target = EvalTarget::test;
    unsigned threads = 1;
};

struct UserEvaluation {
    Index user = 0;
    Index item = 0;
    std::size_t rank = 0;
    std::vector<double> hr, ndcg;  // one per cutoff
};

struct EvaluationResult {
    std::vector<std::size_t> cutoffs;
    std::vector<UserEvaluation> users;
    std::vector<double> hr, ndcg;  // means per cutoff
    std::size_t n_evaluated = 0;
    std::size_t n_skipped = 0;
    std::size_t n_negatives = 0;
    std::uint64_t seed = 0;

    std::size_t cutoff_index(std::size_t cutoff) const {
        for (std::size_t c = 0; c < cutoffs.size(); ++c)
            if (cutoffs[c] == cutoff) return c;
        throw Error("cutoff " + std::to_string(cutoff) + " was not evaluated");
    }

    /// metric is "hr" or "ndcg" (case-insensitive).
    double metric(std::string_view name, std::size_t cutoff) const {
        const auto c = cutoff_index(cutoff);
        if (name == "hr" || name == "HR") return hr[c];
        if (name == "ndcg" || name == "NDCG") return ndcg[c];
        throw Error("unknown metric '" + std::string(name) + "'");
    }

    /// Per-user values of one metric, in user order.
    std::vector<double> per_user(std::string_view name, std::size_t cutoff) const {
        const auto c = cutoff_index(cutoff);
        const bool is_hr = name == "hr" || name == "HR";
        if (!is_hr && name != "ndcg" && name != "NDCG") throw Error("unknown metric '" + std::string(name) + "'");
        std::vector<double> out;
        out.reserve(users.size());
        for (const auto& u : users) out.push_back(is_hr ? u.hr[c] : u.ndcg[c]);
        return out;
    }

    std::string to_csv() const {
        std::string out = "user,item,rank";
        for (auto c : cutoffs) out += ",HR@" + std::to_string(c) + ",NDCG@" + std::to_string(c);
        out += '\n';
        for (const auto& u : users) {
            out += std::to_string(u.user) + ',' + std::to_string(u.item) + ',' + std::to_string(u.rank);
            for (std::size_t c = 0; c < cutoffs.size(); ++c)
                out += ',' + io::format_double(u.hr[c]) + ',' + io::format_double(u.ndcg[c]);
            out += '\n';
        }
        return out;
    }

    Json summary() const {
        Json j;
        j["n_evaluated"] = n_evaluated;
        j["n_skipped"] = n_skipped;
        j["n_negatives"] = n_negatives == 0 ? Json("all") : Json(n_negatives);
        j["seed"] = seed;
        j["cutoffs"] = cutoffs;
        Json m;
        for (std::size_t c = 0; c < cutoffs.size(); ++c) {
            m["HR@" + std::to_string(cutoffs[c])] = hr[c];
            m["NDCG@" + std::to_string(cutoffs[c])] = ndcg[c];
        }
        j["metrics"] = m;
        return j;
    }

    void save(const std::filesystem::path& dir, const std::string& stem = "evaluation") const {
        io::write_file(dir / (stem + ".csv"), to_csv());
        io::write_file(dir / (stem + ".json"), summary().dump(2) + "\n");
    }
};

/// Ranks each held-out positive of the target partition against negatives.
///
/// Test target: negatives exclude the user's train and validation items.
/// Validation target: negatives exclude train items only, so tuning never
/// reads the test partition. Users without a held-out item are skipped.
inline EvaluationResult evaluate_loo(const ScoringModel& model, const SplitTriple& split, const EvalConfig& cfg) {
    if (cfg.cutoffs.empty()) throw Error("evaluate_loo: no cutoffs");
    const InteractionMatrix& target = cfg.target == EvalTarget::test ? split.test : split.validation;
    if (target.nnz() == 0) throw Error("evaluate_loo: the target partition is empty");
    std::vector<const InteractionMatrix*> exclude{&split.train};
    if (cfg.target == EvalTarget::test) exclude.push_back(&split.validation);

    EvaluationResult res;
    res.cutoffs = cfg.cutoffs;
    res.seed = cfg.seed;
    res.n_negatives = cfg.n_negatives;

    std::vector<Index> users;
    for (Index u = 0; u < target.n_users(); ++u) {
        if (target.row_size(u) > 0) users.push_back(u);
        else ++res.n_skipped;
    }
    res.users.resize(users.size());
    const Index n_items = target.n_items();

    parallel_for(users.size(), cfg.threads, [&](std::size_t k) {
        const Index u = users[k];
        const Index pos = target.row(u).front().item;
        std::vector<Index> candidates;
        if (cfg.n_negatives > 0) {
            std::vector<const InteractionMatrix*> ex = exclude;
            ex.push_back(&target);
            candidates = sample_negatives(ex, u, cfg.n_negatives, cfg.seed);
        } else {
            for (Index i = 0; i < n_items; ++i) {
                if (i == pos) continue;
                bool excluded = false;
                for (const auto* m : exclude) excluded = excluded || m->contains(u, i);
                if (!excluded) candidates.push_back(i);
            }
        }
        candidates.push_back(pos);
        std::vector<double> scores(candidates.size());
        model.score_items(u, candidates, scores);
        const double pos_score = scores.back();
        const std::size_t n = candidates.size() - 1;
        const std::size_t rank = rank_of_positive(pos_score, pos, std::span<const double>(scores).first(n),
                                                  std::span<const Index>(candidates).first(n));
        auto& rec = res.users[k];
        rec.user = u;
        rec.item = pos;
        rec.rank = rank;
        for (auto c : cfg.cutoffs) {
            rec.hr.push_back(hit_at(rank, c));
            rec.ndcg.push_back(ndcg_at(rank, c));
        }
    });

    res.n_evaluated = res.users.size();
    res.hr.assign(cfg.cutoffs.size(), 0.0);
    res.ndcg.assign(cfg.cutoffs.size(), 0.0);
    for (const auto& rec : res.users)
        for (std::size_t c = 0; c < cfg.cutoffs.size(); ++c) {
            res.hr[c] += rec.hr[c];
            res.ndcg[c] += rec.ndcg[c];
        }
    if (res.n_evaluated > 0)
        for (std::size_t c = 0; c < cfg.cutoffs.size(); ++c) {
            res.hr[c] /= double(res.n_evaluated);
            res.ndcg[c] /= double(res.n_evaluated);
        }
    return res;
}

}  // namespace convmap
