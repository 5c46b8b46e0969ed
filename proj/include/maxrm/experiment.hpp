#pragma once

// Benchmark runner: JSON experiment configuration, repetition loop with
// per-cell failure capture, result tables with Student-t confidence
// intervals, CSV serialization, and the three special analyses
// (bias-variance decomposition, leaf-indeterminacy study, posthoc
// consistency probe).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

#include "maxrm/baselines.hpp"
#include "maxrm/cart.hpp"
#include "maxrm/csv.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/dgp.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/log.hpp"
#include "maxrm/metrics.hpp"
#include "maxrm/minimax.hpp"
#include "maxrm/parallel.hpp"
#include "maxrm/risk.hpp"
#include "maxrm/rng.hpp"
#include "maxrm/strategies.hpp"

namespace maxrm {

// ============================================================================
// Student-t quantile (for 95% confidence intervals)
// ============================================================================

namespace detail {

inline double log_beta_fn(double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

/// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double inc_beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-14, kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

inline double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt =
        std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta_fn(a, b));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * inc_beta_cf(a, b, x) / a;
    return 1.0 - bt * inc_beta_cf(b, a, 1.0 - x) / b;
}

/// Upper 97.5% quantile of Student's t with df degrees of freedom, via
/// bisection on the two-sided tail P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2).
inline double student_t_q975(int df) {
    if (df < 1) throw ConfigError("t quantile: degrees of freedom must be >= 1");
    const auto tail = [df](double t) {
        return reg_inc_beta(0.5 * df, 0.5, df / (df + t * t));
    };
    double lo = 0.5, hi = 64.0;  // covers df = 1 (12.71) through the normal limit
    for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        (tail(mid) > 0.05 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// ============================================================================
// Method specification
// ============================================================================

struct MethodSpec {
    std::string name;            ///< display name; defaults to kind
    std::string kind;            ///< rf | magging | a strategy name (posthoc, ..., with -w)
    RiskKind risk = RiskKind::Mse;
    TreeHyperparams hp;          ///< seed is overwritten per fit
    int n_trees = 100;
    SolverConfig solver;
    bool scale_min_leaf = false;      ///< magging: divide min leaf size by K
    double holdout_fraction = 0.3;    ///< reweighting strategies

    bool is_rf() const { return kind == "rf"; }
    bool is_magging() const { return kind == "magging"; }

    void validate(int p) const {
        if (name.empty()) throw ConfigError("method: empty name");
        if (n_trees < 1) throw ConfigError("method '" + name + "': n_trees must be >= 1");
        hp.validate(p);
        solver.validate();
        if (scale_min_leaf && !is_magging())
            throw ConfigError("method '" + name + "': scale_min_leaf applies to magging only");
        if (!is_rf() && !is_magging()) {
            StrategySpec s = parse_strategy(kind);
            s.holdout_fraction = holdout_fraction;
            s.validate();
        }
    }
};

/// A fitted method of any family, with uniform prediction access.
using FittedMethod = std::variant<Forest, MaggingModel, MaxRmForest>;

inline std::vector<double> method_predictions(const FittedMethod& model, const EnvDataset& ds) {
    return std::visit([&](const auto& m) { return predict_all(m, ds); }, model);
}

inline FittedMethod fit_method(const MethodSpec& m, const EnvDataset& train, std::uint64_t seed,
                               int workers = 1) {
    TreeHyperparams hp = m.hp;
    hp.seed = seed;
    if (m.is_rf()) return fit_standard_forest(train, hp, m.n_trees, seed, workers);
    const RiskSpec spec = risk_offsets(train, m.risk, hp);
    if (m.is_magging())
        return fit_magging(train, spec, hp, m.n_trees, seed, m.solver, m.scale_min_leaf,
                           workers);
    StrategySpec strat = parse_strategy(m.kind);
    strat.holdout_fraction = m.holdout_fraction;
    return fit_maxrm_forest(train, strat, spec, m.solver, hp, m.n_trees, seed, workers);
}

/// The underlying forest of a fitted method, when it has a single one.
inline const Forest* method_forest(const FittedMethod& model) {
    if (const auto* f = std::get_if<Forest>(&model)) return f;
    if (const auto* m = std::get_if<MaxRmForest>(&model)) return &m->forest;
    return nullptr;
}

// ============================================================================
// Experiment configuration (JSON)
// ============================================================================

enum class AnalysisKind { Methods, BiasVariance, Indeterminacy, Consistency };

struct ConsistencySettings {
    std::vector<std::int64_t> n_grid{500, 2000, 8000};
    int reps = 20;
    std::int64_t partition_n = 2000;       ///< per-env rows for the partition fit
    std::int64_t partition_min_leaf = 15;
    std::int64_t n_reference = 100000;     ///< per-env rows of the population proxy
};

struct ExperimentConfig {
    AnalysisKind analysis = AnalysisKind::Methods;
    DgpConfig dgp;
    std::vector<MethodSpec> methods;
    int repetitions = 20;
    std::vector<std::string> metrics{"max_mse", "pooled_mse"};
    std::uint64_t seed = 1;
    int workers = 1;
    std::string out_dir;  ///< optional default output directory
    std::string note;
    ConsistencySettings consistency;
    double indeterminacy_threshold = 1e-12;

    bool wants_metric(const std::string& name) const {
        return std::find(metrics.begin(), metrics.end(), name) != metrics.end();
    }

    /// Risk kinds implied by the requested max_* metrics.
    std::vector<RiskKind> risk_kinds() const {
        std::vector<RiskKind> kinds;
        for (const auto& m : metrics) {
            if (!m.starts_with("max_")) continue;
            kinds.push_back(parse_risk_kind(m.substr(4)));
        }
        return kinds;
    }

    void validate() const {
        dgp.validate();
        if (repetitions < 1) throw ConfigError("config: repetitions must be >= 1");
        if (workers < 1) throw ConfigError("config: workers must be >= 1");
        if (analysis != AnalysisKind::Consistency && methods.empty())
            throw ConfigError("config: at least one method is required");
        for (const auto& m : methods) m.validate(dgp.p);
        for (const auto& m : metrics) {
            if (m == "pooled_mse" || m == "mise" || m == "fit_seconds") continue;
            if (m.starts_with("max_")) {
                parse_risk_kind(m.substr(4));
                continue;
            }
            throw ConfigError("config: unknown metric '" + m + "'");
        }
        const bool analytic = dgp.setting == DgpSetting::PiecewiseLinear ||
                              dgp.setting == DgpSetting::MixtureUniform;
        if (wants_metric("mise") && !analytic)
            throw ConfigError("config: mise needs a setting with an analytic oracle "
                              "(pwl or mixture)");
        if (analysis == AnalysisKind::BiasVariance) {
            if (!analytic)
                throw ConfigError("config: bias-variance analysis needs an analytic oracle "
                                  "(pwl or mixture)");
            if (methods[0].is_magging())
                throw ConfigError("config: bias-variance analysis needs a forest method");
        }
        if (analysis == AnalysisKind::Consistency) {
            if (consistency.n_grid.empty() || consistency.reps < 1)
                throw ConfigError("config: consistency needs a sample grid and reps >= 1");
        }
    }
};

namespace detail {

inline void require_keys(const nlohmann::json& obj,
                         std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError("config: " + where + " must be a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
T get_or(const nlohmann::json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

inline SolverConfig parse_solver_json(const nlohmann::json& obj, const std::string& where) {
    require_keys(obj, {"method", "gamma", "t_max", "delta", "patience", "block_size"}, where);
    SolverConfig base;
    if (obj.contains("method"))
        base = SolverConfig::defaults_for(parse_solver_method(obj.at("method").get<std::string>()));
    base.gamma = get_or(obj, "gamma", base.gamma);
    base.t_max = get_or(obj, "t_max", base.t_max);
    base.delta = get_or(obj, "delta", base.delta);
    base.patience = get_or(obj, "patience", base.patience);
    base.block_size = get_or(obj, "block_size", base.block_size);
    return base;
}

inline MethodSpec parse_method_json(const nlohmann::json& obj, int index) {
    const std::string where = "methods[" + std::to_string(index) + "]";
    require_keys(obj,
                 {"name", "kind", "risk", "n_trees", "min_leaf", "max_depth", "m_try", "solver",
                  "scale_min_leaf", "holdout_fraction"},
                 where);
    MethodSpec m;
    if (!obj.contains("kind")) throw ConfigError("config: " + where + " needs a 'kind'");
    m.kind = obj.at("kind").get<std::string>();
    m.name = get_or<std::string>(obj, "name", m.kind);
    if (obj.contains("risk")) m.risk = parse_risk_kind(obj.at("risk").get<std::string>());
    m.n_trees = get_or(obj, "n_trees", m.n_trees);
    m.hp.min_leaf_size = get_or<std::int64_t>(obj, "min_leaf", m.hp.min_leaf_size);
    m.hp.max_depth = get_or(obj, "max_depth", m.hp.max_depth);
    m.hp.m_try = get_or(obj, "m_try", m.hp.m_try);
    if (obj.contains("solver")) m.solver = parse_solver_json(obj.at("solver"), where + ".solver");
    m.scale_min_leaf = get_or(obj, "scale_min_leaf", m.scale_min_leaf);
    m.holdout_fraction = get_or(obj, "holdout_fraction", m.holdout_fraction);
    return m;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& root) {
    detail::require_keys(root,
                         {"_note", "analysis", "dgp", "methods", "repetitions", "metrics",
                          "seed", "workers", "out", "consistency", "indeterminacy_threshold"},
                         "config");
    ExperimentConfig cfg;
    cfg.note = detail::get_or<std::string>(root, "_note", "");

    const std::string analysis = detail::get_or<std::string>(root, "analysis", "methods");
    if (analysis == "methods") cfg.analysis = AnalysisKind::Methods;
    else if (analysis == "bias-variance") cfg.analysis = AnalysisKind::BiasVariance;
    else if (analysis == "indeterminacy") cfg.analysis = AnalysisKind::Indeterminacy;
    else if (analysis == "consistency") cfg.analysis = AnalysisKind::Consistency;
    else
        throw ConfigError("config: unknown analysis '" + analysis +
                          "' (expected methods|bias-variance|indeterminacy|consistency)");

    if (!root.contains("dgp")) throw ConfigError("config: missing 'dgp' block");
    const auto& dgp = root.at("dgp");
    detail::require_keys(
        dgp, {"setting", "n_per_env", "n_envs", "p", "noise_sd", "gp_lengthscale", "param_seed"},
        "dgp");
    if (!dgp.contains("setting")) throw ConfigError("config: dgp needs a 'setting'");
    cfg.dgp = DgpConfig::defaults_for(parse_dgp_setting(dgp.at("setting").get<std::string>()));
    cfg.dgp.n_per_env = detail::get_or<std::int64_t>(dgp, "n_per_env", cfg.dgp.n_per_env);
    cfg.dgp.n_envs = detail::get_or(dgp, "n_envs", cfg.dgp.n_envs);
    cfg.dgp.p = detail::get_or(dgp, "p", cfg.dgp.p);
    cfg.dgp.noise_sd = detail::get_or(dgp, "noise_sd", cfg.dgp.noise_sd);
    cfg.dgp.gp_lengthscale = detail::get_or(dgp, "gp_lengthscale", cfg.dgp.gp_lengthscale);
    cfg.dgp.param_seed = detail::get_or<std::uint64_t>(dgp, "param_seed", cfg.dgp.param_seed);

    if (root.contains("methods")) {
        const auto& methods = root.at("methods");
        if (!methods.is_array()) throw ConfigError("config: 'methods' must be an array");
        for (std::size_t i = 0; i < methods.size(); ++i)
            cfg.methods.push_back(detail::parse_method_json(methods[i], static_cast<int>(i)));
    }

    cfg.repetitions = detail::get_or(root, "repetitions", cfg.repetitions);
    if (root.contains("metrics"))
        cfg.metrics = root.at("metrics").get<std::vector<std::string>>();
    cfg.seed = detail::get_or<std::uint64_t>(root, "seed", cfg.seed);
    cfg.workers = detail::get_or(root, "workers", cfg.workers);
    cfg.out_dir = detail::get_or<std::string>(root, "out", cfg.out_dir);
    cfg.indeterminacy_threshold =
        detail::get_or(root, "indeterminacy_threshold", cfg.indeterminacy_threshold);

    if (root.contains("consistency")) {
        const auto& c = root.at("consistency");
        detail::require_keys(
            c, {"n_grid", "reps", "partition_n", "partition_min_leaf", "n_reference"},
            "consistency");
        if (c.contains("n_grid"))
            cfg.consistency.n_grid = c.at("n_grid").get<std::vector<std::int64_t>>();
        cfg.consistency.reps = detail::get_or(c, "reps", cfg.consistency.reps);
        cfg.consistency.partition_n =
            detail::get_or<std::int64_t>(c, "partition_n", cfg.consistency.partition_n);
        cfg.consistency.partition_min_leaf = detail::get_or<std::int64_t>(
            c, "partition_min_leaf", cfg.consistency.partition_min_leaf);
        cfg.consistency.n_reference =
            detail::get_or<std::int64_t>(c, "n_reference", cfg.consistency.n_reference);
    }

    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: invalid JSON in '" + path + "': " + e.what());
    }
    return parse_experiment_config(root);
}

// ============================================================================
// Result table
// ============================================================================

struct ResultRow {
    std::string method;
    int rep = 0;
    std::string metric;
    double value = 0.0;
};

struct CellError {
    std::string method;
    int rep = 0;
    std::string message;
};

struct AggregateRow {
    std::string method;
    std::string metric;
    double mean = 0.0;
    std::optional<double> ci_half;  ///< absent when only one repetition
    int count = 0;
};

struct ResultTable {
    std::vector<ResultRow> rows;
    std::vector<CellError> errors;
    /// Largest (exact max env risk - claimed worst-case risk) over every
    /// tree of every worst-case-risk fit in the run.
    double worst_feasibility_gap = -std::numeric_limits<double>::infinity();

    std::vector<AggregateRow> aggregate() const {
        std::vector<AggregateRow> out;
        const auto slot = [&](const std::string& method,
                              const std::string& metric) -> AggregateRow& {
            for (auto& a : out)
                if (a.method == method && a.metric == metric) return a;
            out.push_back({method, metric, 0.0, std::nullopt, 0});
            return out.back();
        };
        // two passes: means, then spread
        for (const auto& r : rows) {
            AggregateRow& a = slot(r.method, r.metric);
            a.mean += r.value;
            ++a.count;
        }
        for (auto& a : out) a.mean /= a.count;
        std::vector<double> ss;  // per-slot sum of squared deviations
        ss.assign(out.size(), 0.0);
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < out.size(); ++i) {
                if (out[i].method == r.method && out[i].metric == r.metric) {
                    const double d = r.value - out[i].mean;
                    ss[i] += d * d;
                    break;
                }
            }
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (out[i].count < 2) continue;
            const double sd = std::sqrt(ss[i] / (out[i].count - 1));
            out[i].ci_half = detail::student_t_q975(out[i].count - 1) * sd /
                             std::sqrt(static_cast<double>(out[i].count));
        }
        return out;
    }

    std::vector<double> values(const std::string& method, const std::string& metric) const {
        std::vector<double> v;
        for (const auto& r : rows)
            if (r.method == method && r.metric == metric) v.push_back(r.value);
        return v;
    }
};

inline void write_rows_csv(const ResultTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("results: cannot write '" + path + "'");
    out << "method,rep,metric,value\n";
    for (const auto& r : table.rows)
        out << r.method << ',' << r.rep << ',' << r.metric << ',' << format_double(r.value)
            << '\n';
    if (!out) throw DataError("results: write failure on '" + path + "'");
}

inline void write_aggregate_csv(const ResultTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("results: cannot write '" + path + "'");
    out << "method,metric,mean,ci_half\n";
    for (const auto& a : table.aggregate()) {
        out << a.method << ',' << a.metric << ',' << format_double(a.mean) << ',';
        if (a.ci_half) out << format_double(*a.ci_half);
        out << '\n';
    }
    if (!out) throw DataError("results: write failure on '" + path + "'");
}

// ============================================================================
// Repetition runner
// ============================================================================

inline ResultTable run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    DgpConfig dgp = cfg.dgp;
    if (dgp.param_seed == 0) dgp.param_seed = derive_seed(cfg.seed, kTagDgpParams);
    const std::vector<RiskKind> kinds = cfg.risk_kinds();
    const bool want_mise = cfg.wants_metric("mise");
    const bool want_pooled = cfg.wants_metric("pooled_mse");
    const bool want_seconds = cfg.wants_metric("fit_seconds");

    struct RepOutcome {
        std::vector<ResultRow> rows;
        std::vector<CellError> errors;
        double feasibility_gap = -std::numeric_limits<double>::infinity();
    };
    std::vector<RepOutcome> outcomes(cfg.repetitions);

    parallel_for(cfg.repetitions, cfg.workers, [&](int rep) {
        RepOutcome& res = outcomes[rep];
        const std::uint64_t rep_seed =
            derive_seed(cfg.seed, kTagRepetition, static_cast<std::uint64_t>(rep));
        DgpConfig rd = dgp;
        rd.seed = rep_seed;
        const SimData sim = gen_dataset(rd);

        std::vector<double> mise_x;
        if (want_mise)
            mise_x = sample_covariates(rd, 10000, derive_seed(rep_seed, kTagMise), nullptr);

        for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
            const MethodSpec& m = cfg.methods[mi];
            const std::uint64_t method_seed =
                derive_seed(rep_seed, kTagMethod, static_cast<std::uint64_t>(mi));
            try {
                const auto t0 = std::chrono::steady_clock::now();
                const FittedMethod model = fit_method(m, sim.train, method_seed, 1);
                const double secs =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                        .count();

                if (const auto* mrf = std::get_if<MaxRmForest>(&model))
                    for (int b = 0; b < mrf->forest.n_trees(); ++b)
                        res.feasibility_gap =
                            std::max(res.feasibility_gap,
                                     mrf->tree_max_risk[b] - mrf->tree_claimed_risk[b]);

                TreeHyperparams eval_hp = m.hp;
                eval_hp.seed = derive_seed(method_seed, kTagOffsets);
                const std::vector<double> preds = method_predictions(model, sim.test);
                const Metrics mets = evaluate(preds, sim.test, kinds, eval_hp);

                for (const auto& set : mets.risks)
                    res.rows.push_back({m.name, rep,
                                        std::string("max_") + risk_kind_name(set.kind),
                                        set.max});
                if (want_pooled)
                    res.rows.push_back({m.name, rep, "pooled_mse", mets.pooled_mse});
                if (want_mise && sim.maxmse_oracle) {
                    const auto predict = [&](std::span<const double> x) {
                        return std::visit([&](const auto& f) { return f.predict(x); }, model);
                    };
                    res.rows.push_back(
                        {m.name, rep, "mise",
                         mise(predict, *sim.maxmse_oracle, mise_x, rd.p)});
                }
                if (want_seconds) res.rows.push_back({m.name, rep, "fit_seconds", secs});
            } catch (const std::exception& e) {
                res.errors.push_back({m.name, rep, e.what()});
                log_warn(std::string("rep ") + std::to_string(rep) + ", method '" + m.name +
                         "' failed: " + e.what());
            }
        }
    });

    ResultTable table;
    for (const auto& res : outcomes) {
        table.rows.insert(table.rows.end(), res.rows.begin(), res.rows.end());
        table.errors.insert(table.errors.end(), res.errors.begin(), res.errors.end());
        table.worst_feasibility_gap = std::max(table.worst_feasibility_gap, res.feasibility_gap);
    }
    return table;
}

// ============================================================================
// Bias-variance decomposition
// ============================================================================

struct BiasVarianceReport {
    double tree_bias2 = 0.0, tree_variance = 0.0, tree_mse = 0.0;
    double forest_bias2 = 0.0, forest_variance = 0.0, forest_mse = 0.0;
    int reps = 0;
    int n_eval = 0;
};

/// Decompose the first configured method's error against the analytic
/// worst-case oracle over repeated fits: the "tree" estimator is the first
/// tree of each repetition's forest, the "forest" estimator is the whole
/// forest; bias and variance are averaged over a fixed covariate grid.
inline BiasVarianceReport run_bias_variance(const ExperimentConfig& cfg, int n_eval = 200) {
    cfg.validate();
    if (cfg.analysis != AnalysisKind::BiasVariance)
        throw ConfigError("bias-variance: config has a different analysis kind");
    const MethodSpec& m = cfg.methods[0];
    DgpConfig dgp = cfg.dgp;
    if (dgp.param_seed == 0) dgp.param_seed = derive_seed(cfg.seed, kTagDgpParams);

    const std::vector<double> grid =
        sample_covariates(dgp, n_eval, derive_seed(cfg.seed, kTagMise), nullptr);
    const int R = cfg.repetitions;

    std::vector<double> tree_preds(static_cast<std::size_t>(R) * n_eval);
    std::vector<double> forest_preds(static_cast<std::size_t>(R) * n_eval);
    std::optional<OracleFn> oracle;

    parallel_for(R, cfg.workers, [&](int rep) {
        const std::uint64_t rep_seed =
            derive_seed(cfg.seed, kTagRepetition, static_cast<std::uint64_t>(rep));
        DgpConfig rd = dgp;
        rd.seed = rep_seed;
        const SimData sim = gen_dataset(rd);
        if (rep == 0) oracle = sim.maxmse_oracle;
        const FittedMethod model =
            fit_method(m, sim.train, derive_seed(rep_seed, kTagMethod, 0), 1);
        const Forest* forest = method_forest(model);
        if (!forest) throw ConfigError("bias-variance: method has no forest");
        for (int i = 0; i < n_eval; ++i) {
            const std::span<const double> x(grid.data() + static_cast<std::size_t>(i) * dgp.p,
                                            static_cast<std::size_t>(dgp.p));
            tree_preds[static_cast<std::size_t>(rep) * n_eval + i] = forest->trees[0].predict(x);
            forest_preds[static_cast<std::size_t>(rep) * n_eval + i] = forest->predict(x);
        }
    });
    if (!oracle) throw ConfigError("bias-variance: setting has no analytic oracle");

    BiasVarianceReport rep;
    rep.reps = R;
    rep.n_eval = n_eval;
    const auto accumulate = [&](const std::vector<double>& preds, double* bias2, double* var,
                                double* mse) {
        double b_acc = 0.0, v_acc = 0.0, m_acc = 0.0;
        for (int i = 0; i < n_eval; ++i) {
            const std::span<const double> x(grid.data() + static_cast<std::size_t>(i) * dgp.p,
                                            static_cast<std::size_t>(dgp.p));
            const double target = (*oracle)(x);
            double mean = 0.0;
            for (int r = 0; r < R; ++r) mean += preds[static_cast<std::size_t>(r) * n_eval + i];
            mean /= R;
            double sq = 0.0, err = 0.0;
            for (int r = 0; r < R; ++r) {
                const double v = preds[static_cast<std::size_t>(r) * n_eval + i];
                sq += (v - mean) * (v - mean);
                err += (v - target) * (v - target);
            }
            b_acc += (mean - target) * (mean - target);
            v_acc += sq / std::max(R - 1, 1);
            m_acc += err / R;
        }
        *bias2 = b_acc / n_eval;
        *var = v_acc / n_eval;
        *mse = m_acc / n_eval;
    };
    accumulate(tree_preds, &rep.tree_bias2, &rep.tree_variance, &rep.tree_mse);
    accumulate(forest_preds, &rep.forest_bias2, &rep.forest_variance, &rep.forest_mse);
    return rep;
}

inline void write_bias_variance_csv(const BiasVarianceReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("results: cannot write '" + path + "'");
    out << "component,bias2,variance,mse\n";
    out << "tree," << format_double(rep.tree_bias2) << ',' << format_double(rep.tree_variance)
        << ',' << format_double(rep.tree_mse) << '\n';
    out << "forest," << format_double(rep.forest_bias2) << ','
        << format_double(rep.forest_variance) << ',' << format_double(rep.forest_mse) << '\n';
    if (!out) throw DataError("results: write failure on '" + path + "'");
}

// ============================================================================
// Leaf-indeterminacy study
// ============================================================================

struct IndeterminacyReport {
    std::vector<double> rel_change;              ///< per rep: |max MSE change| / max MSE
    std::vector<double> indeterminate_fraction;  ///< per rep, over all (tree, leaf)
    double mean_rel_change = 0.0;
    double mean_fraction = 0.0;
};

/// Posthoc solves can leave leaves indeterminate: when the final adversarial
/// environment weights put no mass on any environment with rows in a leaf,
/// that leaf's value does not affect the worst-case objective. This study
/// refits the first configured method's posthoc forest, reverts every
/// indeterminate leaf to its plain RF mean, and measures how much the max
/// test MSE moves.
inline IndeterminacyReport run_indeterminacy(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.analysis != AnalysisKind::Indeterminacy)
        throw ConfigError("indeterminacy: config has a different analysis kind");
    const MethodSpec& m = cfg.methods[0];
    DgpConfig dgp = cfg.dgp;
    if (dgp.param_seed == 0) dgp.param_seed = derive_seed(cfg.seed, kTagDgpParams);

    IndeterminacyReport report;
    report.rel_change.resize(cfg.repetitions);
    report.indeterminate_fraction.resize(cfg.repetitions);

    parallel_for(cfg.repetitions, cfg.workers, [&](int rep) {
        const std::uint64_t rep_seed =
            derive_seed(cfg.seed, kTagRepetition, static_cast<std::uint64_t>(rep));
        DgpConfig rd = dgp;
        rd.seed = rep_seed;
        const SimData sim = gen_dataset(rd);
        const std::uint64_t seed = derive_seed(rep_seed, kTagMethod, 0);
        TreeHyperparams hp = m.hp;
        const RiskSpec spec = risk_offsets(sim.train, m.risk, hp);

        Forest solved, reverted;
        solved.trees.resize(m.n_trees);
        solved.weights.assign(m.n_trees, 1.0 / m.n_trees);
        reverted = solved;
        std::int64_t leaves_total = 0, leaves_indet = 0;
        for (int b = 0; b < m.n_trees; ++b) {
            const EnvDataset boot = bootstrap_sample(
                sim.train, derive_seed(seed, kTagBootstrap, static_cast<std::uint64_t>(b)));
            hp.seed = derive_seed(seed, kTagTreeGrowth, static_cast<std::uint64_t>(b));
            Tree tree = fit_cart_tree(boot, hp);
            const std::vector<double> rf_values = tree.leaf_values;
            const SolverResult res = posthoc_adjust(&tree, spec, m.solver);
            Tree rev = tree;
            for (int t = 0; t < tree.n_leaves(); ++t) {
                double mass = 0.0;
                for (int e = 0; e < tree.stats.n_envs; ++e) {
                    if (tree.stats.env_rows[e] <= 0.0) continue;
                    mass += res.p[e] * tree.stats.count[tree.stats.idx(e, t)] /
                            tree.stats.env_rows[e];
                }
                ++leaves_total;
                if (mass <= cfg.indeterminacy_threshold) {
                    ++leaves_indet;
                    rev.leaf_values[t] = rf_values[t];
                }
            }
            solved.trees[b] = std::move(tree);
            reverted.trees[b] = std::move(rev);
        }

        const RiskSpec mse_spec = RiskSpec::mse(sim.test.n_envs);
        const double max_solved =
            prediction_risks(sim.test, predict_all(solved, sim.test), mse_spec).z;
        const double max_reverted =
            prediction_risks(sim.test, predict_all(reverted, sim.test), mse_spec).z;
        report.rel_change[rep] =
            std::abs(max_reverted - max_solved) / std::max(std::abs(max_solved), 1e-12);
        report.indeterminate_fraction[rep] =
            static_cast<double>(leaves_indet) / std::max<std::int64_t>(leaves_total, 1);
    });

    for (int r = 0; r < cfg.repetitions; ++r) {
        report.mean_rel_change += report.rel_change[r];
        report.mean_fraction += report.indeterminate_fraction[r];
    }
    report.mean_rel_change /= cfg.repetitions;
    report.mean_fraction /= cfg.repetitions;
    return report;
}

inline void write_indeterminacy_csv(const IndeterminacyReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("results: cannot write '" + path + "'");
    out << "rep,rel_change,indeterminate_fraction\n";
    for (std::size_t r = 0; r < rep.rel_change.size(); ++r)
        out << r << ',' << format_double(rep.rel_change[r]) << ','
            << format_double(rep.indeterminate_fraction[r]) << '\n';
    if (!out) throw DataError("results: write failure on '" + path + "'");
}

// ============================================================================
// Consistency probe wrapper
// ============================================================================

inline ConsistencyReport run_consistency(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.analysis != AnalysisKind::Consistency)
        throw ConfigError("consistency: config has a different analysis kind");
    DgpConfig part_cfg = cfg.dgp;
    part_cfg.n_per_env = cfg.consistency.partition_n;
    part_cfg.seed = derive_seed(cfg.seed, kTagProbe, 1);
    TreeHyperparams hp;
    hp.min_leaf_size = cfg.consistency.partition_min_leaf;
    hp.seed = part_cfg.seed;
    const Tree partition = fit_cart_tree(gen_dataset(part_cfg).train, hp);
    const RiskKind kind = cfg.methods.empty() ? RiskKind::Mse : cfg.methods[0].risk;
    const SolverConfig solver = cfg.methods.empty() ? SolverConfig{} : cfg.methods[0].solver;
    return consistency_probe(partition, cfg.dgp, kind, solver, cfg.consistency.n_grid,
                             cfg.consistency.reps, cfg.seed, cfg.consistency.n_reference);
}

inline void write_consistency_csv(const ConsistencyReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("results: cannot write '" + path + "'");
    out << "n,median_excess\n";
    for (std::size_t i = 0; i < rep.n_grid.size(); ++i)
        out << rep.n_grid[i] << ',' << format_double(rep.median_excess[i]) << '\n';
    if (!out) throw DataError("results: write failure on '" + path + "'");
}

}  // namespace maxrm
