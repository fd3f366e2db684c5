#include <gtest/gtest.h>

#include <cmath>

#include "convmap/hpo.hpp"
#include "test_util.hpp"

using namespace convmap;
using namespace convmap::hpo;

namespace {

HyperparameterSpace mixed_space() {
    return HyperparameterSpace({Dimension::real("r", -1.0, 3.0), Dimension::log_real("lr", 1e-4, 1.0),
                                Dimension::integer("k", 2, 9), Dimension::log_integer("f", 16, 512),
                                Dimension::categorical("c", {"a", "b", 7})});
}

/// Items: 0 = anchor, 1 = popular, 2 = niche. Evaluated users hold the anchor
/// in train and the popular item in validation. Plain cosine prefers the
/// niche item; a shrink above about 12.3 flips the order (see the algebra in
/// the test body).
SplitTriple shrink_split() {
    const Index targets = 20, with_popular = 30, with_niche = 2, solo = 2000;
    const Index users = targets + with_popular + with_niche + solo;
    std::vector<Interaction> train, val, test;
    Index u = 0;
    for (; u < targets; ++u) {
        train.push_back({u, 0});
        val.push_back({u, 1});
        test.push_back({u, 3});
    }
    for (Index k = 0; k < with_popular; ++k, ++u) {
        train.push_back({u, 0});
        train.push_back({u, 1});
    }
    for (Index k = 0; k < with_niche; ++k, ++u) {
        train.push_back({u, 0});
        train.push_back({u, 2});
    }
    for (Index k = 0; k < solo; ++k, ++u) train.push_back({u, 1});
    SplitTriple s;
    s.train = InteractionMatrix::from_entries(users, 4, train, false, kTagTrain);
    s.validation = InteractionMatrix::from_entries(users, 4, val, false, kTagValidation);
    s.test = InteractionMatrix::from_entries(users, 4, test, false, kTagTest);
    return s;
}

}  // namespace

TEST(Space, EncodeDecodeRoundTrip) {
    const auto space = mixed_space();
    EXPECT_EQ(space.width(), 7u);
    Rng rng(1);
    for (int n = 0; n < 200; ++n) {
        const auto c = space.sample(rng);
        ASSERT_TRUE(space.contains(c)) << c.dump();
        const auto u = space.encode(c);
        for (double v : u) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        const auto back = space.decode(u);
        EXPECT_EQ(back["k"], c["k"]);
        EXPECT_EQ(back["f"], c["f"]);
        EXPECT_EQ(back["c"], c["c"]);
        EXPECT_NEAR(back["r"].get<double>(), c["r"].get<double>(), 1e-12);
        EXPECT_NEAR(back["lr"].get<double>(), c["lr"].get<double>(), 1e-12 * c["lr"].get<double>());
    }
    // every integer is reachable and the unit interval maps onto the bounds
    const auto ints = Dimension::integer("k", 2, 9);
    std::vector<double> u{0.0};
    EXPECT_EQ(ints.decode(u), 2);
    u[0] = 1.0;
    EXPECT_EQ(ints.decode(u), 9);
    u[0] = 0.5;
    EXPECT_EQ(ints.decode(u), 6);
}

TEST(Space, ValidationAndJson) {
    EXPECT_THROW(HyperparameterSpace({Dimension::real("x", 1, 1)}), ConfigError);
    EXPECT_THROW(HyperparameterSpace({Dimension::log_real("x", 0, 1)}), ConfigError);
    EXPECT_THROW(HyperparameterSpace({Dimension::integer("x", 0.5, 3)}), ConfigError);
    EXPECT_THROW(HyperparameterSpace({Dimension::categorical("x", {})}), ConfigError);
    EXPECT_THROW(HyperparameterSpace({Dimension::real("x", 0, 1), Dimension::real("x", 0, 2)}), ConfigError);
    EXPECT_THROW(HyperparameterSpace({Dimension::real("x", 0, INFINITY)}), ConfigError);
    const auto space = mixed_space();
    const auto back = HyperparameterSpace::from_json(space.to_json());
    EXPECT_EQ(back.to_json(), space.to_json());
    EXPECT_THROW(HyperparameterSpace::from_json(Json::parse(R"([{"name":"x","kind":"real","low":0,"high":1,"step":2}])")),
                 ConfigError);
    for (const auto& name : baseline_names()) EXPECT_NO_THROW(default_space(name)) << name;
}

TEST(BayesianSearch, FindsQuadraticOptimumForTenSeeds) {
    const HyperparameterSpace space({Dimension::real("x", 0.0, 1.0)});
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SearchOptions opt;
        opt.seed = seed;
        const auto trace = bayesian_search(
            space, [](const Configuration& c) { return -std::pow(c["x"].get<double>() - 0.3, 2); }, opt);
        ASSERT_EQ(trace.trials.size(), 50u);
        EXPECT_NEAR(trace.best_config()["x"].get<double>(), 0.3, 0.05) << "seed " << seed;
    }
}

TEST(BayesianSearch, TraceContract) {
    const auto space = mixed_space();
    SearchOptions opt;
    opt.seed = 7;
    opt.n_calls = 30;
    opt.n_random_init = 10;
    const Objective f = [](const Configuration& c) {
        return -std::abs(c["r"].get<double>() - 1.0) - std::abs(std::log(c["lr"].get<double>()) + 3.0) +
               (c["c"] == "b" ? 1.0 : 0.0) - 0.1 * c["k"].get<double>();
    };
    const auto a = bayesian_search(space, f, opt);
    const auto b = bayesian_search(space, f, opt);
    EXPECT_EQ(a.to_csv(), b.to_csv());
    EXPECT_EQ(a.to_json(), b.to_json());
    std::size_t random_count = 0;
    double best = kNegInf;
    for (const auto& t : a.trials) {
        random_count += t.phase == Phase::random_init;
        EXPECT_TRUE(space.contains(t.config)) << t.config.dump();
        best = std::max(best, t.value);
    }
    EXPECT_EQ(random_count, 10u);
    EXPECT_EQ(a.best_value(), best);
    for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(a.trials[k].phase, Phase::random_init);
}

TEST(BayesianSearch, ConstantObjectiveAndFailures) {
    const HyperparameterSpace space({Dimension::real("x", 0.0, 1.0)});
    SearchOptions opt;
    const auto flat = bayesian_search(space, [](const Configuration&) { return 1.0; }, opt);
    EXPECT_EQ(flat.trials.size(), 50u);
    EXPECT_EQ(flat.best_value(), 1.0);
    EXPECT_EQ(flat.best_index(), 0u);

    int calls = 0;
    const auto mixed = bayesian_search(
        space,
        [&](const Configuration& c) {
            ++calls;
            if (calls % 3 == 0) throw std::runtime_error("boom");
            if (calls % 3 == 1) return std::nan("");
            return c["x"].get<double>();
        },
        opt);
    EXPECT_EQ(mixed.trials.size(), 50u);
    EXPECT_EQ(calls, 50);
    for (std::size_t k = 0; k < 50; ++k) {
        if (k % 3 != 1) {
            EXPECT_EQ(mixed.trials[k].value, kNegInf);
            EXPECT_FALSE(mixed.trials[k].error.empty());
        }
    }
    EXPECT_TRUE(std::isfinite(mixed.best_value()));
    EXPECT_NE(mixed.to_csv().find("-inf"), std::string::npos);

    opt.n_random_init = 60;
    EXPECT_THROW(bayesian_search(space, [](const Configuration&) { return 0.0; }, opt), ConfigError);
}

TEST(RandomSearch, AllTrialsRandomAndSeeded) {
    const auto space = mixed_space();
    SearchOptions opt;
    opt.n_calls = 12;
    opt.seed = 3;
    const auto a = random_search(space, [](const Configuration& c) { return c["r"].get<double>(); }, opt);
    EXPECT_EQ(a.strategy, "random");
    for (const auto& t : a.trials) EXPECT_EQ(t.phase, Phase::random_init);
    opt.seed = 4;
    const auto b = random_search(space, [](const Configuration& c) { return c["r"].get<double>(); }, opt);
    EXPECT_NE(a.to_csv(), b.to_csv());
}

TEST(TuneAndRetrain, SelectsShrinkRegionOnCraftedData) {
    // With |anchor| = sqrt(52), |popular| = sqrt(2030), |niche| = sqrt(2):
    // s(popular) = 30 / (sqrt(52 * 2030) + h), s(niche) = 2 / (sqrt(104) + h),
    // so the popular item wins exactly when 28 h > 2 sqrt(105560) - 30 sqrt(104).
    const double threshold = (2.0 * std::sqrt(52.0 * 2030.0) - 30.0 * std::sqrt(104.0)) / 28.0;
    ASSERT_NEAR(threshold, 12.28, 0.01);
    const auto split = shrink_split();
    const HyperparameterSpace space({Dimension::log_integer("shrink", 1, 1000)});
    TuneOptions opt;
    opt.metric = "hr";
    opt.cutoff = 1;
    opt.eval.n_negatives = 0;
    opt.eval.cutoffs = {1};
    opt.search.n_calls = 8;
    opt.search.n_random_init = 4;
    opt.search.seed = 2;
    const auto r = tune_and_retrain("itemknn", {{"top_k", 10}}, space, split, opt);
    for (const auto& t : r.trace.trials) {
        const double h = t.config["shrink"].get<double>();
        EXPECT_EQ(t.value, h > threshold ? 1.0 : 0.0) << "shrink " << h;
    }
    EXPECT_GT(r.best["shrink"].get<double>(), threshold);
    EXPECT_EQ(r.validation_value, 1.0);
    EXPECT_EQ(r.model->algorithm(), "itemknn");
    EXPECT_EQ(r.model->hyperparameters()["shrink"], r.best["shrink"]);
    EXPECT_EQ(r.test.n_evaluated, 20u);

    const auto again = tune_and_retrain("itemknn", {{"top_k", 10}}, space, split, opt);
    EXPECT_EQ(again.test.to_csv(), r.test.to_csv());
    EXPECT_EQ(again.trace.to_csv(), r.trace.to_csv());
}

TEST(TuneAndRetrain, MinimalBudgetAndProvenance) {
    const auto m = testing_util::random_matrix(40, 30, 0.2, 5, false);
    auto split = leave_one_out_split(m, SplitPolicy::random, 6);
    TuneOptions opt;
    opt.search.n_calls = 1;
    opt.eval.n_negatives = 10;
    const auto r = tune_and_retrain("p3alpha", {}, default_space("p3alpha"), split, opt);
    EXPECT_EQ(r.trace.trials.size(), 1u);
    EXPECT_EQ(r.trace.trials[0].phase, Phase::random_init);
    ASSERT_TRUE(r.model);

    const auto pop = tune_and_retrain("toppop", {}, default_space("toppop"), split, opt);
    EXPECT_EQ(pop.trace.trials.size(), 1u);

    auto leaky = split;
    leaky.train = merge(split.train, split.test);
    EXPECT_THROW(tune_and_retrain("toppop", {}, {}, leaky, opt), Error);
}

TEST(Registry, UnknownNamesAndParameters) {
    const auto train = std::make_shared<const InteractionMatrix>(testing_util::random_matrix(10, 8, 0.3, 1, false));
    EXPECT_THROW(fit_baseline("nope", {}, train), ConfigError);
    EXPECT_THROW(fit_baseline("itemknn", {{"shrnk", 3}}, train), ConfigError);
    EXPECT_THROW(fit_baseline("itemknn", {{"top_k", 0}}, train), ConfigError);
    for (const auto& name : baseline_names()) {
        Json p = Json::object();
        if (name == "puresvd" || name == "ials" || name == "mfbpr") p["factors"] = 4;
        const auto model = fit_baseline(name, p, train, 3);
        EXPECT_EQ(model->n_items(), 8u) << name;
        EXPECT_EQ(model->score(0).size(), 8u) << name;
    }
}
