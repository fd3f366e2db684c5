#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "convmap/stats.hpp"

using namespace convmap;
using namespace convmap::stats;

namespace {

// Reference values were produced with scipy.stats.shapiro, ttest_rel,
// wilcoxon and statsmodels' lilliefors(pvalmethod="approx").
struct SwCase {
    const char* name;
    std::vector<double> x;
    double w, p;
};

std::vector<double> normal_quantiles(int n) {
    std::vector<double> v;
    const boost::math::normal z;
    for (int i = 1; i <= n; ++i) v.push_back(boost::math::quantile(z, (i - 0.375) / (n + 0.25)));
    return v;
}

std::vector<double> exponential_quantiles(int n) {
    std::vector<double> v;
    for (int i = 1; i <= n; ++i) v.push_back(-std::log(1.0 - (i - 0.5) / n));
    return v;
}

std::vector<SwCase> sw_cases() {
    return {
        {"three", {1.0, 2.0, 4.0}, 0.9642857142857142, 0.6368868450289689},
        {"four", {2.1, 3.3, 3.4, 7.9}, 0.8196515993999044, 0.14238821845931127},
        {"five", {0.5, 1.5, 1.7, 2.9, 8.0}, 0.8055936917897513, 0.08993242417342985},
        {"seven", {3.1, 2.4, 5.6, 4.4, 3.9, 4.1, 2.8}, 0.9617125209590711, 0.8332860637196213},
        {"eleven", {12.0, 14.5, 11.2, 13.3, 15.9, 12.8, 13.1, 14.0, 19.5, 12.2, 13.7}, 0.8613062961362026,
         0.05987172607719312},
        {"twelve", {0.1, 0.4, 0.35, 0.8, 0.45, 0.5, 0.62, 0.3, 0.55, 0.49, 0.52, 0.47}, 0.9635535344116862,
         0.8330947025908202},
        {"quantiles20", normal_quantiles(20), 0.997179693088336, 0.9999999754926056},
        {"expq50", exponential_quantiles(50), 0.8375865215648726, 7.255412098708938e-06},
        {"expq150", exponential_quantiles(150), 0.8256709764986131, 4.443387608889701e-12},
    };
}

/// Exact two-sided signed-rank p by enumerating every sign assignment.
double enumerate_wilcoxon(const std::vector<double>& d) {
    std::vector<double> nz;
    for (double v : d)
        if (v != 0.0) nz.push_back(v);
    const std::size_t n = nz.size();
    std::vector<double> rank(n);
    for (std::size_t a = 0; a < n; ++a) {
        double less = 0, equal = 0;
        for (std::size_t b = 0; b < n; ++b) {
            less += std::abs(nz[b]) < std::abs(nz[a]);
            equal += std::abs(nz[b]) == std::abs(nz[a]);
        }
        rank[a] = less + (equal + 1) / 2.0;
    }
    double observed = 0;
    for (std::size_t a = 0; a < n; ++a)
        if (nz[a] > 0) observed += rank[a];
    double le = 0, ge = 0;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        double w = 0;
        for (std::size_t a = 0; a < n; ++a)
            if (mask >> a & 1) w += rank[a];
        le += w <= observed + 1e-9;
        ge += w >= observed - 1e-9;
    }
    return std::min(1.0, 2.0 * std::min(le, ge) / std::ldexp(1.0, int(n)));
}

PairedSamples against_zero(const std::vector<double>& d) {
    return {d, std::vector<double>(d.size(), 0.0)};
}

}  // namespace

TEST(ShapiroWilk, MatchesReferenceValues) {
    for (const auto& c : sw_cases()) {
        const auto r = shapiro_wilk(c.x);
        EXPECT_NEAR(r.statistic, c.w, 1e-6) << c.name;
        EXPECT_NEAR(r.p, c.p, std::max(1e-6, 1e-4 * c.p)) << c.name;
        EXPECT_GT(r.statistic, 0.0);
        EXPECT_LE(r.statistic, 1.0);
    }
}

TEST(ShapiroWilk, ShapeExamplesAndPreconditions) {
    EXPECT_GT(shapiro_wilk(normal_quantiles(20)).statistic, 0.95);
    EXPECT_LT(shapiro_wilk(exponential_quantiles(50)).p, 0.05);
    EXPECT_THROW(shapiro_wilk(std::vector<double>{1.0, 2.0}), Error);
    EXPECT_THROW(shapiro_wilk(std::vector<double>(10, 3.0)), ZeroVariance);
    EXPECT_THROW(shapiro_wilk(std::vector<double>(5001, 1.0)), Error);
    // location and scale invariance
    auto x = sw_cases()[4].x;
    const double w = shapiro_wilk(x).statistic;
    for (double& v : x) v = 3.0 * v - 100.0;
    EXPECT_NEAR(shapiro_wilk(x).statistic, w, 1e-12);
}

TEST(KsNormality, StatisticAgainstReference) {
    const std::vector<std::pair<std::size_t, double>> ref{
        {1, 0.36928765629954047}, {2, 0.30269087131253053}, {3, 0.15515821134186253}, {4, 0.20340345839244278},
        {5, 0.13908093156913237}, {6, 0.030072121840475363}, {7, 0.15636442028317965}, {8, 0.15731978905839294}};
    const auto cases = sw_cases();
    for (const auto& [k, d] : ref) EXPECT_NEAR(ks_normality(cases[k].x).statistic, d, 1e-12) << cases[k].name;
}

TEST(KsNormality, PValueBranches) {
    // Dallal-Wilkinson region (p < 0.1) matches the reference exactly.
    EXPECT_NEAR(ks_normality(sw_cases()[1].x).p, 0.059717394599795755, 1e-12);
    EXPECT_NEAR(ks_normality(exponential_quantiles(50)).p, 0.0037093577453081957, 1e-12);
    EXPECT_NEAR(ks_normality(exponential_quantiles(150)).p, 1.0024634228301883e-09, 1e-18);
    // Above 0.1 the polynomial approximation tracks the reference table.
    const std::vector<std::pair<std::size_t, double>> table{
        {2, 0.15920724149391738}, {3, 0.8810790872911121}, {4, 0.23333948747818498}, {5, 0.7468233468750923}};
    const auto cases = sw_cases();
    for (const auto& [k, p] : table) EXPECT_NEAR(ks_normality(cases[k].x).p, p, 0.025) << cases[k].name;
    EXPECT_GT(ks_normality(normal_quantiles(20)).p, 0.2);
    EXPECT_THROW(ks_normality(std::vector<double>(4, 1.5)), ZeroVariance);
}

TEST(KsNormality, UniformGridMatchesHandComputedSup) {
    std::vector<double> x;
    for (int i = 0; i < 10; ++i) x.push_back(i / 9.0);
    double m = 0;
    for (double v : x) m += v;
    m /= 10;
    double ss = 0;
    for (double v : x) ss += (v - m) * (v - m);
    const double sd = std::sqrt(ss / 9);
    double d = 0;
    for (int i = 0; i < 10; ++i) {
        const double f = 0.5 * std::erfc(-(x[i] - m) / (sd * std::sqrt(2.0)));
        d = std::max({d, (i + 1) / 10.0 - f, f - i / 10.0});
    }
    EXPECT_NEAR(ks_normality(x).statistic, d, 1e-10);
}

TEST(KsNormality, PValueIsMonotoneInStatistic) {
    for (std::size_t n : {5u, 20u, 100u, 400u}) {
        double prev = 1.0;
        for (double d = 0.0; d <= 1.0; d += 0.001) {
            const double p = lilliefors_p_value(d, n);
            EXPECT_GE(p, 0.0);
            EXPECT_LE(p, 1.0);
            EXPECT_LE(p, prev + 0.01) << "n=" << n << " d=" << d;
            prev = p;
        }
    }
}

TEST(PairedT, TextbookFormulaAndReference) {
    const auto r = paired_t_test(against_zero({1, 2, 3, 4, 5}));
    const double sd = std::sqrt(2.5);
    EXPECT_NEAR(r.statistic, 3.0 / (sd / std::sqrt(5.0)), 1e-12);
    EXPECT_NEAR(r.statistic, 4.242640687119285, 1e-12);
    EXPECT_NEAR(r.p, 0.013235599563682695, 1e-12);

    const PairedSamples s{{0.31, 0.42, 0.25, 0.51, 0.38, 0.44, 0.29, 0.47}, {0.28, 0.40, 0.27, 0.45, 0.33, 0.41, 0.30, 0.40}};
    const auto t = paired_t_test(s);
    EXPECT_NEAR(t.statistic, 2.5555555555555545, 1e-10);
    EXPECT_NEAR(t.p, 0.03779591268984533, 1e-10);
}

TEST(PairedT, DegenerateAndAntisymmetric) {
    const std::vector<double> x{1, 2, 3, 4};
    EXPECT_THROW(paired_t_test({x, x}), ZeroVariance);
    EXPECT_THROW(paired_t_test({{1, 2}, {0, 0}}), Error);
    const PairedSamples s{{1.0, 2.5, 3.1, 4.7}, {0.5, 2.0, 3.3, 3.9}};
    const PairedSamples swapped{s.y, s.x};
    EXPECT_DOUBLE_EQ(paired_t_test(swapped).statistic, -paired_t_test(s).statistic);
    EXPECT_DOUBLE_EQ(paired_t_test(swapped).p, paired_t_test(s).p);
}

TEST(Wilcoxon, AllPositiveFive) {
    const auto r = wilcoxon_signed_rank(against_zero({0.5, 1.0, 2.0, 3.0, 4.0}));
    EXPECT_TRUE(r.exact);
    EXPECT_EQ(r.w_minus, 0.0);
    EXPECT_EQ(r.statistic, 0.0);
    EXPECT_DOUBLE_EQ(r.p, 0.0625);
}

TEST(Wilcoxon, ExactMatchesSignEnumeration) {
    const std::vector<std::vector<double>> cases{
        {1, 1, -2, 2, 3, -3, 3, 4, 0, 5},
        {0.03, 0.02, -0.02, 0.06, 0.05, 0.03, -0.01, 0.07},
        {2.5, -1.0, 0.7, 0.7, -0.7, 3.1, 4.0, -0.2, 1.1, 1.2, -1.3, 0.9},
        {-1, -2, -3},
    };
    for (const auto& d : cases) {
        const auto r = wilcoxon_signed_rank(against_zero(d));
        EXPECT_NEAR(r.p, enumerate_wilcoxon(d), 1e-12);
        // without ties the p-value is a multiple of 2^-n
        bool ties = false;
        for (std::size_t a = 0; a < d.size(); ++a)
            for (std::size_t b = a + 1; b < d.size(); ++b) ties = ties || std::abs(d[a]) == std::abs(d[b]);
        if (!ties) {
            const double scaled = std::ldexp(r.p, int(r.n_used));
            EXPECT_NEAR(scaled, std::round(scaled), 1e-9);
        }
    }
    const PairedSamples s{{0.31, 0.42, 0.25, 0.51, 0.38, 0.44, 0.29, 0.47}, {0.28, 0.40, 0.27, 0.45, 0.33, 0.41, 0.30, 0.40}};
    const auto r = wilcoxon_signed_rank(s);
    EXPECT_EQ(r.statistic, 4.0);
    EXPECT_NEAR(r.p, 0.0546875, 1e-15);
}

TEST(Wilcoxon, NormalApproximationWithTies) {
    const std::vector<double> d{0.6, 1.1, 0.6, -1.0, 1.2, 0.7, -0.2, 0.9, 0.7, 0.6, 0.3, 0.8, -0.4, 0.1, -0.2,
                                0.9, 0.3, 0.0, -0.5, 0.0, 0.3, 0.0, 1.6, 1.3, -2.4, -1.6, 0.1, -0.1, 0.5, 0.5};
    const auto r = wilcoxon_signed_rank(against_zero(d));
    EXPECT_FALSE(r.exact);
    EXPECT_EQ(r.n_used, 27u);
    EXPECT_EQ(r.statistic, 104.5);
    EXPECT_NEAR(r.p, 0.0421963217240086, 1e-12);
}

TEST(Wilcoxon, ApproximationCloseToExactAtTwenty) {
    std::vector<double> d;
    Rng rng(3);
    for (int k = 0; k < 20; ++k) d.push_back(rng.normal() + 0.3);
    const auto s = against_zero(d);
    const double exact = wilcoxon_signed_rank(s, WilcoxonMethod::exact).p;
    const double approx = wilcoxon_signed_rank(s, WilcoxonMethod::normal).p;
    EXPECT_NEAR(approx, exact, 0.02);
    EXPECT_NEAR(exact, enumerate_wilcoxon(d), 1e-12);
}

TEST(Wilcoxon, SymmetricPairsAndDegenerate) {
    const auto r = wilcoxon_signed_rank(against_zero({1, -1, 2, -2, 3, -3}));
    EXPECT_EQ(r.w_plus, r.w_minus);
    EXPECT_DOUBLE_EQ(r.p, 1.0);
    EXPECT_THROW(wilcoxon_signed_rank(against_zero({0, 0, 0})), ZeroVariance);
}

TEST(Wilcoxon, AgreesWithTTestInDirection) {
    std::vector<double> x, y;
    Rng rng(4);
    for (int k = 0; k < 15; ++k) {
        x.push_back(rng.normal() + 5.0);
        y.push_back(rng.normal());
    }
    const PairedSamples s{x, y};
    const auto w = wilcoxon_signed_rank(s);
    EXPECT_GT(paired_t_test(s).statistic, 0.0);
    EXPECT_GT(w.w_plus, w.w_minus);
    EXPECT_LT(w.p, 0.001);
}

TEST(Pipeline, SelectsTestByNormality) {
    const auto normal = significance_pipeline(against_zero(normal_quantiles(20)));
    EXPECT_EQ(normal.test_used, "paired_t");
    ASSERT_TRUE(normal.shapiro && normal.ks);
    EXPECT_GE(normal.shapiro->p, 0.05);
    EXPECT_FALSE(normal.significant);

    const auto skewed = significance_pipeline(against_zero(exponential_quantiles(50)));
    EXPECT_EQ(skewed.test_used, "wilcoxon");
    EXPECT_TRUE(skewed.significant);
    EXPECT_NE(skewed.reason.find("rejects"), std::string::npos);
    EXPECT_EQ(skewed.to_json()["test_used"], "wilcoxon");

    const std::vector<double> same{0.2, 0.3, 0.4};
    const auto na = significance_pipeline({same, same});
    EXPECT_EQ(na.test_used, "not_applicable");
    EXPECT_FALSE(na.significant);
    EXPECT_TRUE(na.to_json()["p"].is_null());
}

TEST(Pipeline, DecisionIsDeterministicAndExplained) {
    const PairedSamples s{{0.31, 0.42, 0.25, 0.51, 0.38, 0.44, 0.29, 0.47}, {0.28, 0.40, 0.27, 0.45, 0.33, 0.41, 0.30, 0.40}};
    const auto a = significance_pipeline(s, 0.05), b = significance_pipeline(s, 0.05);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    const auto j = a.to_json();
    for (const char* key : {"test_used", "reason", "p", "significant", "shapiro_wilk", "ks_lilliefors", "alpha"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_GE(a.p, 0.0);
    EXPECT_LE(a.p, 1.0);
    EXPECT_THROW(significance_pipeline(s, 1.5), Error);
}
