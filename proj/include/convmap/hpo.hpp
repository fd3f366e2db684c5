#pragma once

// Hyperparameter search: Gaussian-process expected improvement over a unit
// hypercube encoding of the space, plus plain random search.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "convmap/algorithms.hpp"
#include "convmap/common.hpp"
#include "convmap/eval.hpp"
#include "convmap/io.hpp"

namespace convmap::hpo {

using Configuration = Json;

enum class DimKind { real, log_real, integer, log_integer, categorical };

inline std::string to_string(DimKind k) {
    switch (k) {
        case DimKind::real: return "real";
        case DimKind::log_real: return "log_real";
        case DimKind::integer: return "integer";
        case DimKind::log_integer: return "log_integer";
        case DimKind::categorical: return "categorical";
    }
    return "?";
}

inline DimKind parse_dim_kind(std::string_view s) {
    if (s == "real") return DimKind::real;
    if (s == "log_real") return DimKind::log_real;
    if (s == "integer") return DimKind::integer;
    if (s == "log_integer") return DimKind::log_integer;
    if (s == "categorical") return DimKind::categorical;
    throw ConfigError("unknown dimension kind '" + std::string(s) + "'");
}

struct Dimension {
    std::string name;
    DimKind kind = DimKind::real;
    double lo = 0.0, hi = 1.0;
    std::vector<Json> choices;

    static Dimension real(std::string name, double lo, double hi) { return {std::move(name), DimKind::real, lo, hi, {}}; }
    static Dimension log_real(std::string name, double lo, double hi) {
        return {std::move(name), DimKind::log_real, lo, hi, {}};
    }
    static Dimension integer(std::string name, double lo, double hi) {
        return {std::move(name), DimKind::integer, lo, hi, {}};
    }
    static Dimension log_integer(std::string name, double lo, double hi) {
        return {std::move(name), DimKind::log_integer, lo, hi, {}};
    }
    static Dimension categorical(std::string name, std::vector<Json> choices) {
        return {std::move(name), DimKind::categorical, 0, 0, std::move(choices)};
    }

    bool is_log() const noexcept { return kind == DimKind::log_real || kind == DimKind::log_integer; }
    bool is_integer() const noexcept { return kind == DimKind::integer || kind == DimKind::log_integer; }

    void validate() const {
        if (name.empty()) throw ConfigError("dimension without a name");
        if (kind == DimKind::categorical) {
            if (choices.empty()) throw ConfigError(name + ": categorical dimension needs at least one choice");
            return;
        }
        if (!std::isfinite(lo) || !std::isfinite(hi)) throw ConfigError(name + ": bounds must be finite");
        if (is_integer() ? lo > hi : lo >= hi) throw ConfigError(name + ": bounds must be ordered");
        if (is_integer() && (lo != std::floor(lo) || hi != std::floor(hi)))
            throw ConfigError(name + ": integer bounds must be integers");
        if (is_log() && lo <= 0.0) throw ConfigError(name + ": log-scaled bounds must be strictly positive");
    }

    std::size_t width() const noexcept { return kind == DimKind::categorical ? choices.size() : 1; }

    /// Maps a unit coordinate (or one-hot block) to a value of the dimension.
    Json decode(std::span<const double> u) const {
        if (kind == DimKind::categorical) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < u.size(); ++c)
                if (u[c] > u[best]) best = c;
            return choices[best];
        }
        const double t = std::clamp(u[0], 0.0, 1.0);
        switch (kind) {
            case DimKind::real: return lo + t * (hi - lo);
            case DimKind::log_real: return std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
            case DimKind::integer: {
                const double n = hi - lo + 1.0;
                return static_cast<std::int64_t>(std::min(hi, lo + std::floor(t * n)));
            }
            case DimKind::log_integer: {
                // equal log-width bins around each integer
                const double a = std::log(lo - 0.5), b = std::log(hi + 0.5);
                const double v = std::round(std::exp(a + t * (b - a)));
                return static_cast<std::int64_t>(std::clamp(v, lo, hi));
            }
            default: break;
        }
        throw Error("unreachable");
    }

    void encode(const Json& value, std::span<double> out) const {
        if (kind == DimKind::categorical) {
            bool found = false;
            for (std::size_t c = 0; c < choices.size(); ++c) {
                out[c] = !found && choices[c] == value ? 1.0 : 0.0;
                found = found || out[c] == 1.0;
            }
            if (!found) throw ConfigError(name + ": value " + value.dump() + " is not a declared choice");
            return;
        }
        if (!value.is_number()) throw ConfigError(name + ": expected a number, got " + value.dump());
        const double x = value.get<double>();
        if (!(x >= lo && x <= hi)) throw ConfigError(name + ": value " + value.dump() + " outside bounds");
        switch (kind) {
            case DimKind::real: out[0] = (x - lo) / (hi - lo); break;
            case DimKind::log_real: out[0] = (std::log(x) - std::log(lo)) / (std::log(hi) - std::log(lo)); break;
            case DimKind::integer: out[0] = (x - lo + 0.5) / (hi - lo + 1.0); break;
            case DimKind::log_integer: {
                const double a = std::log(lo - 0.5), b = std::log(hi + 0.5);
                out[0] = (std::log(x) - a) / (b - a);
                break;
            }
            default: break;
        }
    }

    bool contains(const Json& value) const {
        if (kind == DimKind::categorical) return std::find(choices.begin(), choices.end(), value) != choices.end();
        if (!value.is_number()) return false;
        const double x = value.get<double>();
        if (!(x >= lo && x <= hi)) return false;
        return !is_integer() || x == std::floor(x);
    }

    Json sample(Rng& rng) const {
        switch (kind) {
            case DimKind::real: return rng.uniform(lo, hi);
            case DimKind::log_real: return std::exp(rng.uniform(std::log(lo), std::log(hi)));
            case DimKind::integer: return static_cast<std::int64_t>(lo) + static_cast<std::int64_t>(rng.below(std::uint64_t(hi - lo + 1)));
            case DimKind::log_integer: {
                const double v = std::round(std::exp(rng.uniform(std::log(lo), std::log(hi))));
                return static_cast<std::int64_t>(std::clamp(v, lo, hi));
            }
            case DimKind::categorical: return choices[rng.below(choices.size())];
        }
        throw Error("unreachable");
    }

    Json to_json() const {
        Json j{{"name", name}, {"kind", to_string(kind)}};
        if (kind == DimKind::categorical) j["choices"] = choices;
        else {
            j["low"] = lo;
            j["high"] = hi;
        }
        return j;
    }
};

class HyperparameterSpace {
public:
    HyperparameterSpace() = default;
    explicit HyperparameterSpace(std::vector<Dimension> dims) : dims_(std::move(dims)) { validate(); }

    void validate() const {
        for (std::size_t a = 0; a < dims_.size(); ++a) {
            dims_[a].validate();
            for (std::size_t b = 0; b < a; ++b)
                if (dims_[a].name == dims_[b].name) throw ConfigError("duplicate dimension '" + dims_[a].name + "'");
        }
    }

    const std::vector<Dimension>& dimensions() const noexcept { return dims_; }
    bool empty() const noexcept { return dims_.empty(); }

    std::size_t width() const noexcept {
        std::size_t w = 0;
        for (const auto& d : dims_) w += d.width();
        return w;
    }

    Configuration decode(std::span<const double> u) const {
        Configuration c = Json::object();
        std::size_t off = 0;
        for (const auto& d : dims_) {
            c[d.name] = d.decode(u.subspan(off, d.width()));
            off += d.width();
        }
        return c;
    }

    std::vector<double> encode(const Configuration& c) const {
        std::vector<double> u(width());
        std::size_t off = 0;
        for (const auto& d : dims_) {
            if (!c.contains(d.name)) throw ConfigError("configuration lacks '" + d.name + "'");
            d.encode(c.at(d.name), std::span<double>(u).subspan(off, d.width()));
            off += d.width();
        }
        return u;
    }

    bool contains(const Configuration& c) const {
        if (!c.is_object() || c.size() != dims_.size()) return false;
        for (const auto& d : dims_)
            if (!c.contains(d.name) || !d.contains(c.at(d.name))) return false;
        return true;
    }

    Configuration sample(Rng& rng) const {
        Configuration c = Json::object();
        for (const auto& d : dims_) c[d.name] = d.sample(rng);
        return c;
    }

    Json to_json() const {
        Json j = Json::array();
        for (const auto& d : dims_) j.push_back(d.to_json());
        return j;
    }

    /// Reads [{"name", "kind", "low"/"high" or "choices"}, ...].
    static HyperparameterSpace from_json(const Json& j) {
        if (!j.is_array()) throw ConfigError("a hyperparameter space must be a JSON array");
        std::vector<Dimension> dims;
        for (const auto& e : j) {
            if (!e.is_object()) throw ConfigError("each dimension must be a JSON object");
            for (const auto& [k, v] : e.items())
                if (k != "name" && k != "kind" && k != "low" && k != "high" && k != "choices")
                    throw ConfigError("unknown key '" + k + "' in dimension");
            Dimension d;
            d.name = e.at("name").get<std::string>();
            d.kind = parse_dim_kind(e.at("kind").get<std::string>());
            if (d.kind == DimKind::categorical) {
                for (const auto& c : e.at("choices")) d.choices.push_back(c);
            } else {
                d.lo = e.at("low").get<double>();
                d.hi = e.at("high").get<double>();
            }
            dims.push_back(std::move(d));
        }
        return HyperparameterSpace(std::move(dims));
    }

private:
    std::vector<Dimension> dims_;
};

/// Reconstructed default search ranges per baseline.
inline HyperparameterSpace default_space(const std::string& algorithm) {
    using D = Dimension;
    if (algorithm == "toppop") return {};
    if (algorithm == "itemknn" || algorithm == "userknn")
        return HyperparameterSpace({D::integer("shrink", 0, 1000), D::integer("top_k", 5, 800)});
    if (algorithm == "p3alpha") return HyperparameterSpace({D::real("alpha", 0, 2), D::integer("top_k", 5, 800)});
    if (algorithm == "rp3beta")
        return HyperparameterSpace({D::real("alpha", 0, 2), D::real("beta", 0, 2), D::integer("top_k", 5, 800)});
    if (algorithm == "puresvd") return HyperparameterSpace({D::log_integer("factors", 16, 512)});
    if (algorithm == "slim")
        return HyperparameterSpace({D::log_real("l1", 1e-5, 1.0), D::log_real("l2", 1e-5, 1.0), D::integer("top_k", 5, 800)});
    if (algorithm == "ials")
        return HyperparameterSpace({D::log_integer("factors", 16, 512), D::log_real("alpha", 0.1, 100.0),
                                    D::log_real("reg", 1e-4, 10.0)});
    if (algorithm == "mfbpr")
        return HyperparameterSpace({D::log_integer("factors", 16, 512), D::log_real("lr", 1e-3, 0.5),
                                    D::log_real("reg", 1e-6, 0.1), D::integer("epochs", 5, 100)});
    throw ConfigError("unknown algorithm '" + algorithm + "'");
}

enum class Phase { random_init, model_based };

inline std::string to_string(Phase p) { return p == Phase::random_init ? "random_init" : "model_based"; }

struct Trial {
    Configuration config;
    double value = kNegInf;  // failed or non-finite trials keep -inf
    Phase phase = Phase::random_init;
    std::string error;
};

struct SearchTrace {
    std::vector<Trial> trials;
    std::uint64_t seed = 0;
    std::string strategy = "bayesian";

    /// First trial reaching the maximum value.
    std::size_t best_index() const {
        if (trials.empty()) throw Error("empty search trace");
        std::size_t best = 0;
        for (std::size_t k = 1; k < trials.size(); ++k)
            if (trials[k].value > trials[best].value) best = k;
        return best;
    }
    const Configuration& best_config() const { return trials[best_index()].config; }
    double best_value() const { return trials[best_index()].value; }

    std::string to_csv() const {
        std::string out = "trial,phase,value,error,config\n";
        for (std::size_t k = 0; k < trials.size(); ++k) {
            const auto& t = trials[k];
            std::string cfg = t.config.dump();
            std::string quoted = "\"";
            for (char c : cfg) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
            quoted += '"';
            std::string err = t.error;
            std::replace(err.begin(), err.end(), ',', ';');
            std::replace(err.begin(), err.end(), '\n', ' ');
            out += std::to_string(k) + ',' + to_string(t.phase) + ',' +
                   (std::isfinite(t.value) ? io::format_double(t.value) : std::string("-inf")) + ',' + err + ',' +
                   quoted + '\n';
        }
        return out;
    }

    Json to_json() const {
        Json j;
        j["strategy"] = strategy;
        j["seed"] = seed;
        j["n_trials"] = trials.size();
        if (!trials.empty()) {
            j["best_index"] = best_index();
            j["best_value"] = std::isfinite(best_value()) ? Json(best_value()) : Json(nullptr);
            j["best_config"] = best_config();
        }
        Json arr = Json::array();
        for (const auto& t : trials) {
            Json e{{"phase", to_string(t.phase)}, {"config", t.config}};
            e["value"] = std::isfinite(t.value) ? Json(t.value) : Json(nullptr);
            if (!t.error.empty()) e["error"] = t.error;
            arr.push_back(e);
        }
        j["trials"] = arr;
        return j;
    }

    void save(const std::filesystem::path& dir, const std::string& stem = "search") const {
        io::write_file(dir / (stem + ".csv"), to_csv());
        io::write_file(dir / (stem + ".json"), to_json().dump(2) + "\n");
    }
};

enum class Strategy { bayesian, random };

struct SearchOptions {
    std::size_t n_calls = 50;
    std::size_t n_random_init = 15;
    std::uint64_t seed = 0;
    Strategy strategy = Strategy::bayesian;
    std::size_t n_candidates = 2000;
    double xi = 0.01;  // exploration margin in standardized units

    void validate() const {
        if (n_calls < 1) throw ConfigError("n_calls must be at least 1");
        if (n_random_init > n_calls) throw ConfigError("n_random_init must not exceed n_calls");
    }
};

using Objective = std::function<double(const Configuration&)>;

namespace detail {

/// GP regression with a Matern 5/2 kernel on unit-cube inputs.
class GaussianProcess {
public:
    void fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
        x_ = x;
        mean_ = y.mean();
        const double var = (y.array() - mean_).square().sum() / std::max<double>(1.0, double(y.size()));
        scale_ = var > 0.0 ? std::sqrt(var) : 1.0;
        const Eigen::VectorXd z = (y.array() - mean_) / scale_;
        const double dims = std::sqrt(double(std::max<Eigen::Index>(1, x.cols())));
        double best = -std::numeric_limits<double>::infinity();
        for (double ls : {0.05, 0.1, 0.2, 0.35, 0.5, 0.8, 1.2, 2.0})
            for (double noise : {1e-6, 1e-4, 1e-2, 1e-1}) {
                const double l = ls * dims;
                Eigen::MatrixXd k = gram(x, x, l);
                k.diagonal().array() += noise;
                Eigen::LLT<Eigen::MatrixXd> llt(k);
                if (llt.info() != Eigen::Success) continue;
                const Eigen::VectorXd alpha = llt.solve(z);
                const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
                const double lml = -0.5 * z.dot(alpha) - 0.5 * logdet;
                if (lml > best) {
                    best = lml;
                    length_ = l;
                    alpha_ = alpha;
                    llt_ = llt;
                }
            }
        if (!std::isfinite(best)) throw Error("gaussian process: kernel matrix is not positive definite");
    }

    /// Posterior mean and standard deviation in the original units.
    std::pair<double, double> predict(const Eigen::RowVectorXd& x) const {
        const Eigen::VectorXd k = gram(x, x_, length_).transpose();
        const double mu = k.dot(alpha_);
        const Eigen::VectorXd v = llt_.matrixL().solve(k);
        const double var = std::max(0.0, 1.0 - v.squaredNorm());
        return {mean_ + scale_ * mu, scale_ * std::sqrt(var)};
    }

private:
    static Eigen::MatrixXd gram(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double length) {
        Eigen::MatrixXd k(a.rows(), b.rows());
        const double s5 = std::sqrt(5.0);
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            for (Eigen::Index j = 0; j < b.rows(); ++j) {
                const double r = (a.row(i) - b.row(j)).norm() / length;
                k(i, j) = (1.0 + s5 * r + 5.0 * r * r / 3.0) * std::exp(-s5 * r);
            }
        return k;
    }

    Eigen::MatrixXd x_;
    Eigen::VectorXd alpha_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    double mean_ = 0.0, scale_ = 1.0, length_ = 1.0;
};

inline double expected_improvement(double mu, double sigma, double best, double xi) {
    const double imp = mu - best - xi;
    if (sigma < 1e-12) return std::max(imp, 0.0);
    const double z = imp / sigma;
    const boost::math::normal n;
    return imp * boost::math::cdf(n, z) + sigma * boost::math::pdf(n, z);
}

inline double run_trial(const Objective& objective, const Configuration& c, std::string& error) {
    try {
        const double v = objective(c);
        if (!std::isfinite(v)) {
            error = "non-finite objective";
            return kNegInf;
        }
        return v;
    } catch (const std::exception& e) {
        error = e.what();
        return kNegInf;
    }
}

}  // namespace detail

/// Maximizes `objective`. The first n_random_init configurations are drawn
/// uniformly from the space; the rest maximize expected improvement under a
/// GP fitted to all finished trials (failed trials count as the worst seen).
inline SearchTrace bayesian_search(const HyperparameterSpace& space, const Objective& objective,
                                   const SearchOptions& opt) {
    opt.validate();
    space.validate();
    SearchTrace trace;
    trace.seed = opt.seed;
    trace.strategy = opt.strategy == Strategy::bayesian ? "bayesian" : "random";
    Rng init_rng(derive_seed(opt.seed, 0));
    const std::size_t w = space.width();

    for (std::size_t call = 0; call < opt.n_calls; ++call) {
        Trial t;
        const bool random_phase = opt.strategy == Strategy::random || call < opt.n_random_init || space.empty();
        if (random_phase) {
            t.phase = Phase::random_init;
            t.config = space.sample(init_rng);
        } else {
            t.phase = Phase::model_based;
            Rng rng(derive_seed(opt.seed, call + 1));
            // surrogate targets: failures become the worst finite value
            double worst = std::numeric_limits<double>::infinity();
            for (const auto& p : trace.trials)
                if (std::isfinite(p.value)) worst = std::min(worst, p.value);
            if (!std::isfinite(worst)) worst = 0.0;
            Eigen::MatrixXd x(trace.trials.size(), w);
            Eigen::VectorXd y(trace.trials.size());
            for (std::size_t k = 0; k < trace.trials.size(); ++k) {
                const auto u = space.encode(trace.trials[k].config);
                for (std::size_t c = 0; c < w; ++c) x(k, c) = u[c];
                y[k] = std::isfinite(trace.trials[k].value) ? trace.trials[k].value : worst;
            }
            detail::GaussianProcess gp;
            gp.fit(x, y);
            const double best_y = y.maxCoeff();
            const auto incumbent = space.encode(trace.best_config());

            double best_ei = -1.0;
            Configuration chosen;
            bool chosen_is_new = false;
            std::vector<double> u(w);
            for (std::size_t n = 0; n < opt.n_candidates; ++n) {
                if (n % 2 == 0) {
                    for (double& v : u) v = rng.uniform();
                } else {
                    for (std::size_t c = 0; c < w; ++c) u[c] = std::clamp(incumbent[c] + 0.1 * rng.normal(), 0.0, 1.0);
                }
                // snap to the grid of representable configurations
                const Configuration cand = space.decode(u);
                const auto snapped = space.encode(cand);
                Eigen::RowVectorXd row(w);
                for (std::size_t c = 0; c < w; ++c) row[c] = snapped[c];
                const auto [mu, sigma] = gp.predict(row);
                const double ei = detail::expected_improvement(mu, sigma, best_y, opt.xi * (y.maxCoeff() - y.minCoeff() + 1e-12));
                bool is_new = true;
                for (const auto& p : trace.trials) is_new = is_new && p.config != cand;
                // prefer unseen configurations, then larger EI
                if ((is_new && !chosen_is_new) || (is_new == chosen_is_new && ei > best_ei)) {
                    best_ei = ei;
                    chosen = cand;
                    chosen_is_new = is_new;
                }
            }
            t.config = chosen;
        }
        t.value = detail::run_trial(objective, t.config, t.error);
        trace.trials.push_back(std::move(t));
    }
    return trace;
}

inline SearchTrace random_search(const HyperparameterSpace& space, const Objective& objective, SearchOptions opt) {
    opt.strategy = Strategy::random;
    opt.n_random_init = opt.n_calls;
    return bayesian_search(space, objective, opt);
}

/// Throws if `m` carries any interaction from the test partition.
inline void require_no_test(const InteractionMatrix& m, const char* where) {
    if (m.tags() & kTagTest) throw Error(std::string(where) + ": matrix contains test-partition interactions");
}

struct TuneOptions {
    std::string metric = "ndcg";
    std::size_t cutoff = 10;
    SearchOptions search;
    EvalConfig eval;
    /// Seed handed to stochastic algorithms for every fit.
    std::uint64_t model_seed = 0;
};

struct TuneResult {
    std::unique_ptr<ScoringModel> model;  // refit on train + validation
    SearchTrace trace;
    Configuration best;
    double validation_value = kNegInf;
    EvaluationResult test;
};

/// Searches on (train -> validation), refits the best configuration on
/// train + validation, and evaluates that model on test.
inline TuneResult tune_and_retrain(const std::string& algorithm, const Json& fixed, const HyperparameterSpace& space,
                                   const SplitTriple& split, const TuneOptions& opt) {
    if (split.validation.nnz() == 0) throw Error("tune_and_retrain: split has no validation partition");
    require_no_test(split.train, "tune_and_retrain");
    require_no_test(split.validation, "tune_and_retrain");
    const auto train = std::make_shared<const InteractionMatrix>(split.train);
    auto params_for = [&](const Configuration& c) {
        Json p = fixed.is_null() ? Json::object() : fixed;
        for (const auto& [k, v] : c.items()) p[k] = v;
        return p;
    };
    EvalConfig val_cfg = opt.eval;
    val_cfg.target = EvalTarget::validation;
    const Objective objective = [&](const Configuration& c) {
        const auto model = fit_baseline(algorithm, params_for(c), train, opt.model_seed);
        return evaluate_loo(*model, split, val_cfg).metric(opt.metric, opt.cutoff);
    };
    SearchOptions sopt = opt.search;
    if (space.empty()) sopt.n_calls = 1;  // nothing to tune
    sopt.n_random_init = std::min(sopt.n_random_init, sopt.n_calls);

    TuneResult r;
    r.trace = bayesian_search(space, objective, sopt);
    r.best = r.trace.best_config();
    r.validation_value = r.trace.best_value();
    const auto merged = std::make_shared<const InteractionMatrix>(merge(split.train, split.validation));
    require_no_test(*merged, "tune_and_retrain");
    r.model = fit_baseline(algorithm, params_for(r.best), merged, opt.model_seed);
    EvalConfig test_cfg = opt.eval;
    test_cfg.target = EvalTarget::test;
    r.test = evaluate_loo(*r.model, split, test_cfg);
    return r;
}

}  // namespace convmap::hpo
