#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include <Eigen/Dense>

#include "convmap/bpr.hpp"
#include "convmap/ials.hpp"
#include "convmap/knn.hpp"
#include "convmap/puresvd.hpp"
#include "convmap/scoring.hpp"
#include "convmap/slim.hpp"
#include "test_util.hpp"

using namespace convmap;

namespace {

Matrix dense(const InteractionMatrix& m) {
    Matrix d = Matrix::Zero(m.n_users(), m.n_items());
    for (const auto& e : m.entries()) d(e.user, e.item) = e.value;
    return d;
}

InteractionMatrix from_dense(const Matrix& d) {
    std::vector<Interaction> e;
    for (Index u = 0; u < d.rows(); ++u)
        for (Index i = 0; i < d.cols(); ++i)
            if (d(u, i) != 0.0) e.push_back({u, i, d(u, i), 0});
    return InteractionMatrix::from_entries(Index(d.rows()), Index(d.cols()), std::move(e));
}

}  // namespace

// TopPopular ----------------------------------------------------------------

TEST(TopPopular, RanksByCount) {
    std::vector<Interaction> e;
    const int counts[] = {5, 2, 9};
    for (Index i = 0; i < 3; ++i)
        for (int u = 0; u < counts[i]; ++u) e.push_back({Index(u), i});
    const auto m = InteractionMatrix::from_entries(10, 3, e);
    const auto model = fit_top_popular(m);
    for (Index u = 0; u < 10; ++u) EXPECT_EQ(top_n(model->score(u), 3), (std::vector<Index>{2, 0, 1}));
}

TEST(TopPopular, EmptyAndTies) {
    const auto empty = fit_top_popular(InteractionMatrix::empty(3, 4));
    EXPECT_EQ(empty->score(0), std::vector<double>(4, 0.0));
    const auto m = InteractionMatrix::from_entries(2, 3, {{0, 1}, {0, 2}, {1, 2}, {1, 0}});
    // items 0 and 1 both have one interaction: lower index first
    EXPECT_EQ(top_n(fit_top_popular(m)->score(0), 3), (std::vector<Index>{2, 0, 1}));
}

// Cosine KNN ----------------------------------------------------------------

TEST(Cosine, IdenticalColumnsWithAndWithoutShrink) {
    // two items with the same single user -> unit columns
    const auto m = InteractionMatrix::from_entries(1, 2, {{0, 0}, {0, 1}});
    EXPECT_DOUBLE_EQ(cosine_similarity_shrunk(m, 0.0, 10).at(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(cosine_similarity_shrunk(m, 1.0, 10).at(0, 1), 0.5);
    EXPECT_EQ(cosine_similarity_shrunk(m, 0.0, 10).at(0, 0), 0.0);
}

TEST(Cosine, MatchesDenseDoubleLoop) {
    const auto m = testing_util::random_matrix(6, 5, 0.5, 31, false);
    const Matrix r = dense(m);
    for (double h : {0.0, 2.5}) {
        const auto s = cosine_similarity_shrunk(m, h, 5).to_dense();
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) {
                double dot = 0, ni = 0, nj = 0;
                for (int u = 0; u < 6; ++u) {
                    dot += r(u, i) * r(u, j);
                    ni += r(u, i) * r(u, i);
                    nj += r(u, j) * r(u, j);
                }
                const double denom = std::sqrt(ni) * std::sqrt(nj) + h;
                const double expected = (i == j || denom == 0.0) ? 0.0 : dot / denom;
                EXPECT_NEAR(s(i, j), expected, 1e-12);
            }
        const auto users = cosine_similarity_shrunk(m, h, 6, KnnAxis::user).to_dense();
        for (int a = 0; a < 6; ++a)
            for (int b = 0; b < 6; ++b) {
                const double denom = r.row(a).norm() * r.row(b).norm() + h;
                const double expected = a == b ? 0.0 : r.row(a).dot(r.row(b)) / denom;
                EXPECT_NEAR(users(a, b), expected, 1e-12);
            }
    }
}

TEST(Cosine, SymmetricWithoutShrinkAndTopK) {
    const auto m = testing_util::random_matrix(50, 40, 0.15, 32, false);
    const auto s = cosine_similarity_shrunk(m, 0.0, 40).to_dense();
    EXPECT_EQ(s, s.transpose());
    const auto t = cosine_similarity_shrunk(m, 0.0, 3);
    for (Index r = 0; r < t.n_rows(); ++r) EXPECT_LE(t.row_cols(r).size(), 3u);
    for (double v : cosine_similarity_shrunk(m, 5.0, 40).to_dense().reshaped()) EXPECT_GE(v, 0.0);
}

TEST(KnnScores, OneHotEmptyAndSummation) {
    const auto m = testing_util::random_matrix(8, 6, 0.4, 33, false);
    const auto s = cosine_similarity_shrunk(m, 1.0, 6);
    // one-hot profile
    const auto one = InteractionMatrix::from_entries(2, 6, {{0, 3}});
    const auto sc = knn_scores(s, one, 0);
    const auto d = s.to_dense();
    for (Index j = 0; j < 6; ++j) EXPECT_EQ(sc[j], d(3, j));
    EXPECT_EQ(knn_scores(s, one, 1), std::vector<double>(6, 0.0));
    // explicit summation, item and user axis
    const Matrix r = dense(m);
    const auto su = cosine_similarity_shrunk(m, 1.0, 8, KnnAxis::user).to_dense();
    for (Index u = 0; u < 8; ++u) {
        const auto item_scores = knn_scores(s, m, u, KnnAxis::item);
        const auto user_scores = knn_scores(cosine_similarity_shrunk(m, 1.0, 8, KnnAxis::user), m, u, KnnAxis::user);
        for (Index j = 0; j < 6; ++j) {
            double a = 0, b = 0;
            for (Index i = 0; i < 6; ++i) a += r(u, i) * d(i, j);
            for (Index v = 0; v < 8; ++v) b += su(u, v) * r(v, j);
            EXPECT_NEAR(item_scores[j], a, 1e-12);
            EXPECT_NEAR(user_scores[j], b, 1e-12);
        }
    }
}

// Random walks ----------------------------------------------------------------

TEST(P3alpha, DisconnectedItemsHaveZeroSimilarity) {
    const auto m = InteractionMatrix::from_entries(2, 2, {{0, 0}, {1, 1}});
    EXPECT_EQ(p3alpha_similarity(m, 1.0, 10).at(0, 1), 0.0);
}

TEST(P3alpha, SingleUserWalkEnumeration) {
    const auto m = InteractionMatrix::from_entries(1, 2, {{0, 0}, {0, 1}});
    // walk i0 -> u0 (prob 1) -> i1 (prob 1/2)
    const double walk = 1.0 * 0.5;
    EXPECT_DOUBLE_EQ(p3alpha_similarity(m, 1.0, 10).at(0, 1), walk);
    EXPECT_DOUBLE_EQ(p3alpha_similarity(m, 1.0, 10).at(1, 0), walk);
}

TEST(P3alpha, AlphaZeroCountsSharedUsers) {
    const auto m = testing_util::random_matrix(30, 12, 0.3, 34, false);
    const auto s = p3alpha_similarity(m, 0.0, 12).to_dense();
    const Matrix r = dense(m);
    const Matrix co = r.transpose() * r;
    for (int i = 0; i < 12; ++i)
        for (int j = 0; j < 12; ++j) EXPECT_DOUBLE_EQ(s(i, j), i == j ? 0.0 : co(i, j));
}

TEST(P3alpha, MatchesThreeStepWalkProbabilities) {
    const auto m = testing_util::random_matrix(15, 10, 0.3, 35, false);
    const Matrix r = dense(m);
    const double alpha = 0.7;
    Matrix piu = Matrix::Zero(10, 15), pui = Matrix::Zero(15, 10);
    for (int i = 0; i < 10; ++i)
        for (int u = 0; u < 15; ++u) {
            if (r(u, i) == 0) continue;
            piu(i, u) = std::pow(r(u, i) / r.col(i).sum(), alpha);
            pui(u, i) = std::pow(r(u, i) / r.row(u).sum(), alpha);
        }
    Matrix expected = piu * pui;
    expected.diagonal().setZero();
    EXPECT_LT((p3alpha_similarity(m, alpha, 10).to_dense() - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RP3beta, RerankCases) {
    const auto s = SimilarityMatrix::from_rows(2, {{{1, 2.0}}, {{0, 3.0}}});
    const std::vector<double> pop{0.0, 4.0};
    const auto b0 = rp3beta_rerank(s, pop, 0.0);
    EXPECT_EQ(b0.at(0, 1), 2.0);
    EXPECT_EQ(b0.at(1, 0), 0.0);  // zero-popularity column
    EXPECT_EQ(rp3beta_rerank(s, pop, 1.0).at(0, 1), 0.5);

    const auto m = testing_util::random_matrix(20, 9, 0.35, 36, false);
    const auto p3 = p3alpha_similarity(m, 1.0, 9);
    const auto identity = rp3beta_rerank(p3, m.item_counts(), 0.0);
    EXPECT_EQ(identity.to_dense(), p3.to_dense());
    const auto counts = m.item_counts();
    const Matrix reranked = rp3beta_rerank(p3, counts, 0.6).to_dense();
    const Matrix base = p3.to_dense();
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) EXPECT_NEAR(reranked(i, j), base(i, j) / std::pow(counts[j], 0.6), 1e-15);
}

// PureSVD -------------------------------------------------------------------

TEST(PureSvd, FullRankReconstruction) {
    const auto m = testing_util::random_matrix(7, 5, 0.6, 37, false);
    const auto f = truncated_svd_factors(m, 5);
    EXPECT_LT((Matrix(f.P * f.Q.transpose()) - dense(m)).norm(), 1e-8);
    EXPECT_THROW(truncated_svd_factors(m, 6), Error);
    EXPECT_THROW(truncated_svd_factors(m, 0), Error);
}

TEST(PureSvd, RankOneIsExact) {
    Matrix r = Matrix::Zero(6, 4);
    for (int u : {0, 2, 3, 5})
        for (int i : {1, 2}) r(u, i) = 1.0;
    const auto f = truncated_svd_factors(from_dense(r), 1);
    EXPECT_LT((Matrix(f.P * f.Q.transpose()) - r).norm(), 1e-12);
}

TEST(PureSvd, RankTwoMatchesReferenceTruncation) {
    const auto m = testing_util::random_matrix(6, 5, 0.5, 38, false);
    const Eigen::MatrixXd r = dense(m);
    Eigen::JacobiSVD<Eigen::MatrixXd> ref(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::MatrixXd approx =
        ref.matrixU().leftCols(2) * ref.singularValues().head(2).asDiagonal() * ref.matrixV().leftCols(2).transpose();
    const auto f = truncated_svd_factors(m, 2);
    const Eigen::MatrixXd ours = f.P * f.Q.transpose();
    EXPECT_NEAR((ours - r).norm(), (approx - r).norm(), 1e-8);
    EXPECT_LT((ours - approx).norm(), 1e-8);
}

TEST(PureSvd, RandomizedPathAgreesWithDense) {
    const auto m = testing_util::random_matrix(80, 60, 0.2, 39, false);
    PureSvdOptions randomized;
    randomized.dense_cell_limit = 0;
    randomized.power_iterations = 30;
    randomized.oversampling = 40;
    const auto a = truncated_svd_factors(m, 5);
    const auto b = truncated_svd_factors(m, 5, randomized);
    EXPECT_LT((Matrix(a.P * a.Q.transpose()) - Matrix(b.P * b.Q.transpose())).norm(), 1e-6);
}

// SLIM ----------------------------------------------------------------------

namespace {

double slim_objective(const Eigen::MatrixXd& x, Index j, const Eigen::VectorXd& w, double l1, double l2) {
    const Eigen::VectorXd resid = x.col(j) - x * w;
    return 0.5 * resid.squaredNorm() + l1 * w.sum() + 0.5 * l2 * w.squaredNorm();
}

/// Accelerated projected gradient on {w >= 0, w_j = 0}.
Eigen::VectorXd projected_gradient_slim(const Eigen::MatrixXd& x, Index j, double l1, double l2) {
    const Eigen::MatrixXd g = x.transpose() * x;
    const double lipschitz = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(g).eigenvalues().maxCoeff() + l2;
    const Eigen::VectorXd c = x.transpose() * x.col(j);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols()), y = w;
    double t = 1.0;
    for (int it = 0; it < 200000; ++it) {
        Eigen::VectorXd grad = g * y - c + l2 * y;
        grad.array() += l1;
        Eigen::VectorXd next = (y - grad / lipschitz).cwiseMax(0.0);
        next[j] = 0.0;
        const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        y = next + ((t - 1.0) / tn) * (next - w);
        w = next;
        t = tn;
    }
    return w;
}

}  // namespace

TEST(Slim, HugeL1ZeroesColumn) {
    const auto m = testing_util::random_matrix(20, 8, 0.4, 40, false);
    SlimOptions opt;
    opt.l1 = 1e6;
    EXPECT_TRUE(slim_fit_column(m, 0, opt).weights.empty());
}

TEST(Slim, DuplicatedColumnGetsUnitWeight) {
    Matrix x(4, 3);
    x << 1, 1, 0,
         0, 0, 1,
         1, 1, 1,
         1, 1, 0;
    SlimOptions opt;
    opt.l1 = 0;
    opt.l2 = 0;
    const auto col = slim_fit_column(from_dense(x), 0, opt);
    ASSERT_EQ(col.weights.size(), 1u);
    EXPECT_EQ(col.weights[0].first, 1u);
    EXPECT_NEAR(col.weights[0].second, 1.0, 1e-12);
}

TEST(Slim, MatchesProjectedGradientObjective) {
    const auto m = testing_util::random_matrix(30, 8, 0.4, 41, false);
    const Eigen::MatrixXd x = dense(m);
    SlimOptions opt;
    opt.l1 = 0.1;
    opt.l2 = 0.5;
    opt.top_k = 8;
    for (Index j = 0; j < 8; ++j) {
        const auto col = slim_fit_column(m, j, opt);
        EXPECT_TRUE(col.converged);
        Eigen::VectorXd w = Eigen::VectorXd::Zero(8);
        for (const auto& [i, v] : col.weights) {
            EXPECT_GT(v, 0.0);
            EXPECT_NE(i, j);
            w[i] = v;
        }
        const auto oracle = projected_gradient_slim(x, j, opt.l1, opt.l2);
        EXPECT_NEAR(slim_objective(x, j, w, opt.l1, opt.l2), slim_objective(x, j, oracle, opt.l1, opt.l2), 1e-6);
    }
}

TEST(Slim, FullModelHasNonNegativeZeroDiagonalWeights) {
    auto m = std::make_shared<const InteractionMatrix>(testing_util::random_matrix(40, 15, 0.3, 42, false));
    SlimOptions opt;
    opt.top_k = 5;
    const auto model = fit_slim(m, opt);
    const auto w = model->similarity().to_dense();
    for (int i = 0; i < 15; ++i) EXPECT_EQ(w(i, i), 0.0);
    EXPECT_GE(w.minCoeff(), 0.0);
    for (int j = 0; j < 15; ++j) EXPECT_LE((w.col(j).array() > 0).count(), 5);
}

// iALS ----------------------------------------------------------------------

TEST(Ials, HalfStepEqualsDenseWeightedSolve) {
    const auto m = testing_util::random_matrix(10, 12, 0.3, 43, false);
    Rng rng(5);
    Matrix y(12, 4);
    for (Eigen::Index k = 0; k < y.size(); ++k) y.data()[k] = rng.uniform(-1, 1);
    const double alpha = 3.0, reg = 0.2;
    const Eigen::MatrixXd yty = y.transpose() * y;
    for (Index u = 0; u < 10; ++u) {
        const Vector x = ials_solve_row(y, yty, m.row(u), alpha, reg);
        Eigen::MatrixXd c = Eigen::MatrixXd::Identity(12, 12);
        Eigen::VectorXd p = Eigen::VectorXd::Zero(12);
        for (const auto& e : m.row(u)) {
            c(e.item, e.item) = 1.0 + alpha * e.value;
            p[e.item] = 1.0;
        }
        const Eigen::MatrixXd a = y.transpose() * c * y + reg * Eigen::MatrixXd::Identity(4, 4);
        const Eigen::VectorXd expected = a.colPivHouseholderQr().solve(y.transpose() * c * p);
        EXPECT_LT((x - expected).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Ials, UserWithoutInteractionsShrinksToZero) {
    const auto m = InteractionMatrix::from_entries(2, 5, {{0, 1}, {0, 2}});
    Matrix y = Matrix::Ones(5, 3);
    const Eigen::MatrixXd yty = y.transpose() * y;
    EXPECT_EQ(ials_solve_row(y, yty, m.row(1), 10.0, 0.5).norm(), 0.0);
    const double small = ials_solve_row(y, yty, m.row(0), 1.0, 100.0).norm();
    const double large = ials_solve_row(y, yty, m.row(0), 1.0, 0.01).norm();
    EXPECT_LT(small, large);
    EXPECT_THROW(ials_solve_row(y, yty, m.row(0), 1.0, 0.0), Error);
}

TEST(Ials, ObjectiveNonIncreasingAcrossSweeps) {
    const auto m = testing_util::random_matrix(20, 15, 0.25, 44, false);
    IalsOptions opt;
    opt.factors = 4;
    opt.alpha = 5.0;
    opt.reg = 0.1;
    opt.iterations = 12;
    opt.seed = 3;
    const auto fit = train_ials(m, opt, true);
    ASSERT_EQ(fit.objective.size(), 12u);
    for (std::size_t k = 1; k < fit.objective.size(); ++k) EXPECT_LE(fit.objective[k], fit.objective[k - 1] * (1 + 1e-12));
}

TEST(Ials, ObjectiveMatchesBruteForce) {
    const auto m = testing_util::random_matrix(6, 5, 0.4, 45, false);
    const auto e = EmbeddingPair::random(6, 5, 3, 1.0, 2);
    double brute = 0.0;
    for (Index u = 0; u < 6; ++u)
        for (Index i = 0; i < 5; ++i) {
            const double r = m.contains(u, i) ? 1.0 : 0.0;
            const double c = 1.0 + 2.0 * r;
            const double s = e.P.row(u).dot(e.Q.row(i));
            brute += c * (r - s) * (r - s);
        }
    brute += 0.3 * (e.P.squaredNorm() + e.Q.squaredNorm());
    EXPECT_NEAR(ials_objective(m, e.P, e.Q, 2.0, 0.3), brute, 1e-10);
}

// BPR -----------------------------------------------------------------------

TEST(Bpr, SymmetricScoresGiveHalfCoefficient) {
    EmbeddingPair e{Matrix(1, 2), Matrix(2, 2)};
    e.P << 1.0, 2.0;
    e.Q << 0.5, 0.5, 0.5, 0.5;
    const auto next = bpr_stepped(e, 0, 0, 1, 1.0, 0.0);
    // coefficient (1 - sigmoid(0)) = 0.5; q_i - q_j = 0 so p_u is unchanged
    EXPECT_EQ(next.P, e.P);
    EXPECT_DOUBLE_EQ(next.Q(0, 0), 0.5 + 0.5 * 1.0);
    EXPECT_DOUBLE_EQ(next.Q(1, 1), 0.5 - 0.5 * 2.0);
    EXPECT_EQ(sigmoid(0.0), 0.5);
}

TEST(Bpr, ZeroLearningRateIsNoOp) {
    const auto e = EmbeddingPair::random(3, 4, 5, 0.5, 1);
    EXPECT_EQ(bpr_stepped(e, 1, 2, 3, 0.0, 0.1), e);
}

TEST(Bpr, GradientMatchesFiniteDifferences) {
    const auto e = EmbeddingPair::random(2, 3, 4, 0.8, 17);
    const double reg = 0.05, h = 1e-6;
    const Index u = 1, i = 0, j = 2;
    // the step direction divided by lr is the analytic gradient
    const double lr = 1e-3;
    const auto stepped = bpr_stepped(e, u, i, j, lr, reg);
    auto check = [&](bool user_side, Index row) {
        for (Index k = 0; k < 4; ++k) {
            auto plus = e, minus = e;
            (user_side ? plus.P : plus.Q)(row, k) += h;
            (user_side ? minus.P : minus.Q)(row, k) -= h;
            const double fd =
                (bpr_triple_objective(plus, u, i, j, reg) - bpr_triple_objective(minus, u, i, j, reg)) / (2 * h);
            const double analytic = ((user_side ? stepped.P : stepped.Q)(row, k) - (user_side ? e.P : e.Q)(row, k)) / lr;
            EXPECT_LT(std::abs(analytic - fd) / std::max(1e-8, std::abs(fd)), 1e-4);
        }
    };
    check(true, u);
    check(false, i);
    check(false, j);
}

TEST(Bpr, SmallStepIncreasesTripleObjective) {
    const auto e = EmbeddingPair::random(2, 3, 4, 0.8, 18);
    const auto next = bpr_stepped(e, 0, 1, 2, 1e-3, 0.01);
    EXPECT_GT(bpr_triple_objective(next, 0, 1, 2, 0.01), bpr_triple_objective(e, 0, 1, 2, 0.01));
}

TEST(Bpr, TrainingIsDeterministicAndLearns) {
    const auto m = testing_util::random_matrix(30, 20, 0.2, 46, false);
    BprOptions opt;
    opt.factors = 4;
    opt.epochs = 20;
    opt.seed = 4;
    opt.lr = 0.1;
    const auto a = train_mf_bpr(m, opt);
    EXPECT_EQ(a, train_mf_bpr(m, opt));
    // positives score above the average item after training
    double pos = 0, all = 0;
    for (const auto& x : m.entries()) pos += dot_prediction(a.user(x.user), a.item(x.item));
    for (Index u = 0; u < 30; ++u)
        for (Index i = 0; i < 20; ++i) all += dot_prediction(a.user(u), a.item(i));
    EXPECT_GT(pos / double(m.nnz()), all / 600.0);
}

// Checkpoints ----------------------------------------------------------------

TEST(ModelCheckpoint, RoundTripScores) {
    auto train = std::make_shared<const InteractionMatrix>(testing_util::random_matrix(12, 10, 0.3, 47, false));
    std::vector<std::unique_ptr<ScoringModel>> models;
    models.push_back(fit_top_popular(*train));
    models.push_back(fit_item_knn(train, 2.0, 5));
    models.push_back(fit_user_knn(train, 2.0, 5));
    models.push_back(fit_puresvd(*train, 3));
    for (const auto& m : models) {
        m->set_hyperparameters({{"x", 1}});
        const auto dir = testing_util::temp_dir("ckpt_" + m->algorithm());
        m->save(dir);
        const auto back = load_scoring_model(dir, train);
        EXPECT_EQ(back->algorithm(), m->algorithm());
        EXPECT_EQ(back->hyperparameters(), m->hyperparameters());
        for (Index u = 0; u < 12; ++u) EXPECT_EQ(back->score(u), m->score(u));
    }
}

TEST(ScoreExcluding, MarksTrainItems) {
    const auto m = testing_util::random_matrix(5, 6, 0.3, 48, false);
    const auto model = fit_top_popular(m);
    const auto s = score_excluding(*model, 2, m);
    for (Index i = 0; i < 6; ++i) EXPECT_EQ(std::isinf(s[i]), m.contains(2, i));
}
