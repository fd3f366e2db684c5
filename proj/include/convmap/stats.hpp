#pragma once

// Normality tests and the paired significance pipeline.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "convmap/common.hpp"

namespace convmap::stats {

class ZeroVariance : public Error {
public:
    using Error::Error;
};

struct PairedSamples {
    std::vector<double> x, y;
    std::string label_x = "x", label_y = "y";

    void validate() const {
        if (x.size() != y.size()) throw Error("paired samples have different lengths");
        if (x.size() < 3) throw Error("paired samples need at least 3 pairs");
        for (std::size_t k = 0; k < x.size(); ++k)
            if (!std::isfinite(x[k]) || !std::isfinite(y[k])) throw Error("paired samples contain a non-finite value");
    }

    std::vector<double> differences() const {
        std::vector<double> d(x.size());
        for (std::size_t k = 0; k < d.size(); ++k) d[k] = x[k] - y[k];
        return d;
    }
};

struct TestResult {
    double statistic = 0.0;
    double p = 1.0;
};

inline double mean(std::span<const double> v) {
    if (v.empty()) throw Error("mean of an empty sample");
    long double s = 0;
    for (double x : v) s += x;
    return double(s / v.size());
}

/// Sample standard deviation (n - 1 denominator).
inline double sample_sd(std::span<const double> v) {
    if (v.size() < 2) throw Error("standard deviation needs at least 2 values");
    const double m = mean(v);
    long double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(double(s / (v.size() - 1)));
}

namespace detail {

inline double poly(std::initializer_list<double> c, double x) {
    double r = 0.0, p = 1.0;
    for (double v : c) {
        r += v * p;
        p *= x;
    }
    return r;
}

inline bool is_constant(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

}  // namespace detail

/// Shapiro-Wilk W with Royston's normalizing approximation for the p-value.
inline TestResult shapiro_wilk(std::span<const double> sample) {
    const std::size_t n = sample.size();
    if (n < 3 || n > 5000) throw Error("shapiro_wilk needs 3 <= n <= 5000, got n = " + std::to_string(n));
    std::vector<double> x(sample.begin(), sample.end());
    std::sort(x.begin(), x.end());
    const double range = x.back() - x.front();
    if (!(range > 0.0)) throw ZeroVariance("shapiro_wilk: sample has zero variance");

    const boost::math::normal std_normal;
    const std::size_t half = n / 2;
    const double an = double(n);
    std::vector<double> a(half);
    if (n == 3) {
        a[0] = std::sqrt(0.5);
    } else {
        std::vector<double> m(half);
        double summ2 = 0.0;
        for (std::size_t i = 0; i < half; ++i) {
            m[i] = boost::math::quantile(std_normal, (double(i + 1) - 0.375) / (an + 0.25));
            summ2 += m[i] * m[i];
        }
        summ2 *= 2.0;
        const double ssumm2 = std::sqrt(summ2), rsn = 1.0 / std::sqrt(an);
        const double a1 = detail::poly({0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056}, rsn) - m[0] / ssumm2;
        std::size_t first;
        double fac;
        if (n > 5) {
            first = 2;
            const double a2 = -m[1] / ssumm2 + detail::poly({0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633}, rsn);
            fac = std::sqrt((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
            a[1] = a2;
        } else {
            first = 1;
            fac = std::sqrt((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1));
        }
        a[0] = a1;
        for (std::size_t i = first; i < half; ++i) a[i] = -m[i] / fac;
    }

    // scale by the range to keep the sums well conditioned
    double num = 0.0;
    for (std::size_t i = 0; i < half; ++i) num += a[i] * (x[n - 1 - i] - x[i]) / range;
    const double xm = mean(x) / range;
    double ssq = 0.0;
    for (double v : x) ssq += (v / range - xm) * (v / range - xm);
    double w = std::min(1.0, num * num / ssq);

    TestResult r;
    r.statistic = w;
    if (n == 3) {
        const double pi6 = 6.0 / M_PI, stqr = M_PI / 3.0;
        r.p = std::clamp(pi6 * (std::asin(std::sqrt(w)) - stqr), 0.0, 1.0);
        return r;
    }
    double w1 = std::log(1.0 - w);
    double mu, sigma;
    if (n <= 11) {
        const double gamma = detail::poly({-2.273, 0.459}, an);
        if (w1 >= gamma) {
            r.p = 1e-99;
            return r;
        }
        w1 = -std::log(gamma - w1);
        mu = detail::poly({0.544, -0.39978, 0.025054, -6.714e-4}, an);
        sigma = std::exp(detail::poly({1.3822, -0.77857, 0.062767, -0.0020322}, an));
    } else {
        const double lx = std::log(an);
        mu = detail::poly({-1.5861, -0.31082, -0.083751, 0.0038915}, lx);
        sigma = std::exp(detail::poly({-0.4803, -0.082676, 0.0030302}, lx));
    }
    r.p = boost::math::cdf(boost::math::complement(boost::math::normal(mu, sigma), w1));
    return r;
}

/// Kolmogorov-Smirnov distance to the normal fitted by sample mean and
/// standard deviation.
inline double lilliefors_statistic(std::span<const double> sample) {
    const std::size_t n = sample.size();
    std::vector<double> x(sample.begin(), sample.end());
    std::sort(x.begin(), x.end());
    const boost::math::normal fitted(mean(x), sample_sd(x));
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double f = boost::math::cdf(fitted, x[i]);
        d = std::max({d, double(i + 1) / double(n) - f, f - double(i) / double(n)});
    }
    return d;
}

/// Lilliefors p-value: the Dallal-Wilkinson approximation for small p,
/// Stephens' modified-statistic polynomials above 0.1.
inline double lilliefors_p_value(double d, std::size_t n) {
    double kd = d, nd = double(n);
    if (n > 100) {
        kd = d * std::pow(nd / 100.0, 0.49);
        nd = 100.0;
    }
    double p = std::exp(-7.01256 * kd * kd * (nd + 2.78019) + 2.99587 * kd * std::sqrt(nd + 2.78019) - 0.122119 +
                        0.974598 / std::sqrt(nd) + 1.67997 / nd);
    if (p > 0.1) {
        const double sn = std::sqrt(double(n));
        const double kk = (sn - 0.01 + 0.85 / sn) * d;
        if (kk <= 0.302) p = 1.0;
        else if (kk <= 0.5) p = detail::poly({2.76773, -19.828315, 80.709644, -138.55152, 81.218052}, kk);
        else if (kk <= 0.9) p = detail::poly({-4.901232, 40.662806, -97.490286, 94.029866, -32.355711}, kk);
        else if (kk <= 1.31) p = detail::poly({6.198765, -19.23243, 23.27455, -11.981069, 2.134435}, kk);
        else p = 0.0;
    }
    return std::clamp(p, 0.0, 1.0);
}

inline TestResult ks_normality(std::span<const double> sample) {
    if (sample.size() < 3) throw Error("ks_normality needs at least 3 values");
    if (detail::is_constant(sample)) throw ZeroVariance("ks_normality: sample has zero variance");
    TestResult r;
    r.statistic = lilliefors_statistic(sample);
    r.p = lilliefors_p_value(r.statistic, sample.size());
    return r;
}

/// Two-sided paired t-test on x - y.
inline TestResult paired_t_test(const PairedSamples& s) {
    s.validate();
    const auto d = s.differences();
    if (detail::is_constant(d)) throw ZeroVariance("paired_t_test: differences have zero variance");
    const double n = double(d.size());
    TestResult r;
    r.statistic = mean(d) / (sample_sd(d) / std::sqrt(n));
    const boost::math::students_t dist(n - 1.0);
    r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.statistic))));
    return r;
}

enum class WilcoxonMethod { automatic, exact, normal };

struct WilcoxonResult {
    double statistic = 0.0;  // min(W+, W-)
    double w_plus = 0.0, w_minus = 0.0;
    double p = 1.0;
    std::size_t n_used = 0;  // nonzero differences
    bool exact = false;
};

inline constexpr std::size_t kWilcoxonExactLimit = 25;

/// Signed-rank test on x - y. Zero differences are dropped and tied absolute
/// values get average ranks.
inline WilcoxonResult wilcoxon_signed_rank(const PairedSamples& s, WilcoxonMethod method = WilcoxonMethod::automatic) {
    if (s.x.size() != s.y.size()) throw Error("paired samples have different lengths");
    std::vector<double> d;
    for (double v : s.differences()) {
        if (!std::isfinite(v)) throw Error("paired samples contain a non-finite value");
        if (v != 0.0) d.push_back(v);
    }
    const std::size_t n = d.size();
    if (n == 0) throw ZeroVariance("wilcoxon_signed_rank: all differences are zero");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(d[a]) < std::abs(d[b]); });
    // doubled ranks stay integral under averaging
    std::vector<std::size_t> rank2(n);
    double tie_term = 0.0;
    for (std::size_t k = 0; k < n;) {
        std::size_t e = k;
        while (e + 1 < n && std::abs(d[order[e + 1]]) == std::abs(d[order[k]])) ++e;
        const std::size_t t = e - k + 1;
        for (std::size_t m = k; m <= e; ++m) rank2[order[m]] = k + e + 2;
        tie_term += double(t) * double(t) * double(t) - double(t);
        k = e + 1;
    }
    WilcoxonResult r;
    r.n_used = n;
    std::size_t plus2 = 0, total2 = 0;
    for (std::size_t k = 0; k < n; ++k) {
        total2 += rank2[k];
        if (d[k] > 0) plus2 += rank2[k];
    }
    r.w_plus = plus2 / 2.0;
    r.w_minus = (total2 - plus2) / 2.0;
    r.statistic = std::min(r.w_plus, r.w_minus);

    r.exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::automatic && n <= kWilcoxonExactLimit);
    if (r.exact) {
        // count[s] = number of sign assignments whose doubled W+ equals s
        std::vector<long double> count(total2 + 1, 0.0L);
        count[0] = 1.0L;
        std::size_t reach = 0;
        for (std::size_t k = 0; k < n; ++k) {
            reach += rank2[k];
            for (std::size_t v = reach; v >= rank2[k]; --v) count[v] += count[v - rank2[k]];
        }
        long double lower = 0, upper = 0;
        for (std::size_t v = 0; v <= total2; ++v) {
            if (v <= plus2) lower += count[v];
            if (v >= plus2) upper += count[v];
        }
        const long double total = std::ldexp(1.0L, int(n));
        r.p = double(std::min<long double>(1.0L, 2.0L * std::min(lower, upper) / total));
    } else {
        const double nn = double(n);
        const double mu = nn * (nn + 1.0) / 4.0;
        const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
        if (!(var > 0.0)) throw ZeroVariance("wilcoxon_signed_rank: degenerate rank variance");
        const double z = (r.statistic - mu) / std::sqrt(var);
        r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::normal(), -std::abs(z)));
    }
    return r;
}

/// Outcome of the normality-gated significance test.
struct Decision {
    std::string test_used;  // "paired_t", "wilcoxon" or "not_applicable"
    std::string reason;
    double alpha = 0.05;
    double p = 1.0;
    double statistic = 0.0;
    bool significant = false;
    std::size_t n = 0;
    double mean_difference = 0.0;
    std::optional<TestResult> shapiro, ks;
    std::string label_x, label_y;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["x"] = label_x;
        j["y"] = label_y;
        j["n"] = n;
        j["mean_difference"] = mean_difference;
        j["alpha"] = alpha;
        auto test = [](const std::optional<TestResult>& t) {
            return t ? nlohmann::ordered_json{{"statistic", t->statistic}, {"p", t->p}} : nlohmann::ordered_json();
        };
        j["shapiro_wilk"] = test(shapiro);
        j["ks_lilliefors"] = test(ks);
        j["test_used"] = test_used;
        j["reason"] = reason;
        if (test_used == "not_applicable") {
            j["statistic"] = nullptr;
            j["p"] = nullptr;
        } else {
            j["statistic"] = statistic;
            j["p"] = p;
        }
        j["significant"] = significant;
        return j;
    }
};

/// Paired t-test when neither Shapiro-Wilk nor Lilliefors-KS rejects
/// normality of the differences at alpha, Wilcoxon otherwise.
inline Decision significance_pipeline(const PairedSamples& s, double alpha = 0.05) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must be in (0, 1)");
    s.validate();
    const auto d = s.differences();
    Decision dec;
    dec.alpha = alpha;
    dec.n = d.size();
    dec.label_x = s.label_x;
    dec.label_y = s.label_y;
    dec.mean_difference = mean(d);
    if (detail::is_constant(d)) {
        dec.test_used = "not_applicable";
        dec.reason = "differences have zero variance";
        return dec;
    }
    dec.ks = ks_normality(d);
    bool normal = dec.ks->p >= alpha;
    std::string why;
    if (d.size() > 5000) {
        normal = false;
        why = "n > 5000 is outside the Shapiro-Wilk approximation; treated as non-normal";
    } else {
        dec.shapiro = shapiro_wilk(d);
        normal = normal && dec.shapiro->p >= alpha;
        why = normal ? "neither Shapiro-Wilk nor KS rejects normality at alpha"
                     : std::string(dec.shapiro->p < alpha ? "Shapiro-Wilk" : "") +
                           (dec.shapiro->p < alpha && dec.ks->p < alpha ? " and " : "") +
                           (dec.ks->p < alpha ? "KS" : "") + " rejects normality at alpha";
    }
    dec.reason = why;
    if (normal) {
        const auto t = paired_t_test(s);
        dec.test_used = "paired_t";
        dec.statistic = t.statistic;
        dec.p = t.p;
    } else {
        const auto w = wilcoxon_signed_rank(s);
        dec.test_used = "wilcoxon";
        dec.statistic = w.statistic;
        dec.p = w.p;
    }
    dec.significant = dec.p < alpha;
    return dec;
}

}  // namespace convmap::stats
