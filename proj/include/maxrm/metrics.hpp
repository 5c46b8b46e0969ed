#pragma once

// Evaluation harness: test-set metrics, MISE against an oracle regression
// function, a paired sign-flip permutation test, and the two property probes
// (worst case over distribution mixtures, and posthoc consistency on a fixed
// partition as the sample grows).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maxrm/cart.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/dgp.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/minimax.hpp"
#include "maxrm/risk.hpp"
#include "maxrm/rng.hpp"

namespace maxrm {

// ============================================================================
// Test-set metrics
// ============================================================================

struct EnvRiskSet {
    RiskKind kind = RiskKind::Mse;
    std::vector<double> env_risks;  ///< NaN for environments with no test rows
    double max = 0.0;               ///< over nonempty environments
};

struct Metrics {
    std::vector<EnvRiskSet> risks;  ///< one entry per requested kind
    double pooled_mse = 0.0;        ///< environment-size-weighted mean of env MSEs
    std::optional<double> mise;
    std::vector<std::string> warnings;

    const EnvRiskSet& risk(RiskKind kind) const {
        for (const auto& r : risks)
            if (r.kind == kind) return r;
        throw ConfigError(std::string("metrics: risk kind '") + risk_kind_name(kind) +
                          "' was not evaluated");
    }
    double max_risk(RiskKind kind) const { return risk(kind).max; }
};

/// Evaluate predictions on a test set for each requested risk kind. Offsets
/// are recomputed on the test data per kind; `hp` parameterizes the per-env
/// regression trees behind the regret offsets (unused for mse/nrw). Empty
/// test environments are excluded from every maximum and flagged in warnings.
inline Metrics evaluate(std::span<const double> preds, const EnvDataset& test,
                        std::span<const RiskKind> kinds, const TreeHyperparams& hp = {}) {
    if (std::cmp_not_equal(preds.size(), test.size()))
        throw DataError("evaluate: prediction/test size mismatch");
    if (test.size() == 0) throw DataError("evaluate: empty test set");

    Metrics out;
    for (int e = 0; e < test.n_envs; ++e)
        if (test.env_counts[e] == 0)
            out.warnings.push_back("environment " + std::to_string(e) +
                                   " has no test rows; excluded from maxima");

    double total_sq = 0.0;
    for (std::int64_t i = 0; i < test.size(); ++i) {
        const double d = preds[i] - test.y[i];
        total_sq += d * d;
    }
    out.pooled_mse = total_sq / static_cast<double>(test.size());

    for (const RiskKind kind : kinds) {
        const RiskSpec spec = risk_offsets(test, kind, hp);
        const RiskValue rv = prediction_risks(test, preds, spec);
        EnvRiskSet set;
        set.kind = kind;
        set.env_risks = rv.env_risks;
        for (int e = 0; e < test.n_envs; ++e)
            if (test.env_counts[e] == 0)
                set.env_risks[e] = std::numeric_limits<double>::quiet_NaN();
        set.max = rv.z;
        out.risks.push_back(std::move(set));
    }
    return out;
}

template <typename Model>
    requires requires(const Model& m, std::span<const double> x) { m.predict(x); }
std::vector<double> predict_all(const Model& model, const EnvDataset& ds) {
    std::vector<double> preds(ds.size());
    for (std::int64_t i = 0; i < ds.size(); ++i) preds[i] = model.predict(ds.row(i));
    return preds;
}

template <typename Model>
    requires requires(const Model& m, std::span<const double> x) { m.predict(x); }
Metrics evaluate(const Model& model, const EnvDataset& test, std::span<const RiskKind> kinds,
                 const TreeHyperparams& hp = {}) {
    return evaluate(std::span<const double>(predict_all(model, test)), test, kinds, hp);
}

/// Monte Carlo mean integrated squared error of a prediction function against
/// the oracle regression function over the given covariate sample.
template <typename PredictFn>
double mise(PredictFn&& predict, const OracleFn& oracle, const std::vector<double>& x_eval,
            int p) {
    if (x_eval.empty() || p < 1 || x_eval.size() % static_cast<std::size_t>(p) != 0)
        throw ConfigError("mise: covariate sample must be a nonempty multiple of p values");
    const std::size_t m = x_eval.size() / static_cast<std::size_t>(p);
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const std::span<const double> x(x_eval.data() + i * static_cast<std::size_t>(p),
                                        static_cast<std::size_t>(p));
        const double d = predict(x) - oracle(x);
        acc += d * d;
    }
    return acc / static_cast<double>(m);
}

// ============================================================================
// Paired sign-flip permutation test
// ============================================================================

/// Two-sided paired permutation test on the mean error difference: d_i =
/// err_a[i] - err_b[i], statistic mean(d), signs flipped uniformly at random,
/// p = (#{|perm stat| >= |observed|} + 1) / (n_perm + 1).
inline double permutation_test(std::span<const double> err_a, std::span<const double> err_b,
                               int n_perm, std::uint64_t seed) {
    if (err_a.size() != err_b.size())
        throw ConfigError("permutation_test: paired samples must have equal length");
    const std::size_t m = err_a.size();
    if (m < 2) throw ConfigError("permutation_test: need at least 2 pairs");
    if (n_perm < 1) throw ConfigError("permutation_test: need at least 1 permutation");

    std::vector<double> d(m);
    for (std::size_t i = 0; i < m; ++i) d[i] = err_a[i] - err_b[i];
    double mean = 0.0;
    for (const double v : d) mean += v;
    mean /= static_cast<double>(m);
    const double observed = std::abs(mean);

    Rng rng(derive_seed(seed, kTagPermutation));
    int hits = 0;
    for (int b = 0; b < n_perm; ++b) {
        double s = 0.0;
        for (const double v : d) s += rng.below(2) == 0 ? v : -v;
        if (std::abs(s / static_cast<double>(m)) >= observed) ++hits;
    }
    return static_cast<double>(hits + 1) / static_cast<double>(n_perm + 1);
}

// ============================================================================
// Worst case over distribution mixtures
// ============================================================================

struct ConvexHullReport {
    int n_checked = 0;
    int n_violations = 0;
    double max_violation = -std::numeric_limits<double>::infinity();  ///< max mixture - bound
    std::vector<double> vertex_risks;
    double vertex_max = 0.0;
};

namespace detail {

inline std::vector<double> sample_simplex(int k, Rng& rng) {
    std::vector<double> q(k);
    double total = 0.0;
    for (double& v : q) {
        v = -std::log(std::max(rng.uniform(), 1e-300));
        total += v;
    }
    for (double& v : q) v /= total;
    return q;
}

}  // namespace detail

/// Empirical worst-case check: for uniformly sampled mixture weights q over
/// the environments with test rows, the mixture risk sum_e q_e R_e must not
/// exceed the maximum vertex risk (exact linearity for mse/nrw, so the
/// tolerance is pure float slack).
inline ConvexHullReport convexhull_risk_check(std::span<const double> preds,
                                              const EnvDataset& test, const RiskSpec& spec,
                                              int n_mix, std::uint64_t seed,
                                              double tol = 1e-12) {
    if (n_mix < 1) throw ConfigError("convexhull_risk_check: need at least 1 mixture sample");
    const RiskValue rv = prediction_risks(test, preds, spec);

    std::vector<int> active;
    for (int e = 0; e < test.n_envs; ++e)
        if (test.env_counts[e] > 0) active.push_back(e);
    if (active.empty()) throw DataError("convexhull_risk_check: every environment is empty");

    ConvexHullReport rep;
    rep.vertex_risks = rv.env_risks;
    rep.vertex_max = rv.z;
    Rng rng(derive_seed(seed, kTagMixtureQ));
    for (int s = 0; s < n_mix; ++s) {
        const std::vector<double> q = detail::sample_simplex(static_cast<int>(active.size()), rng);
        double mix = 0.0;
        for (std::size_t j = 0; j < active.size(); ++j) mix += q[j] * rv.env_risks[active[j]];
        const double gap = mix - (rep.vertex_max + tol);
        rep.max_violation = std::max(rep.max_violation, mix - rep.vertex_max);
        if (gap > 0.0) ++rep.n_violations;
        ++rep.n_checked;
    }
    return rep;
}

struct HullProbeReport {
    double vertex_max = 0.0;       ///< Monte Carlo max population risk over training envs
    double sampled_max = 0.0;      ///< max over synthetic mixture environments
    double combined_se = 0.0;      ///< MC standard error of the compared estimates
    int n_checked = 0;
    bool ok = false;               ///< sampled_max <= vertex_max + 2 * combined_se
};

/// Generalization check on synthetic environments: on a shared covariate
/// probe, new environments with conditional mean sum_k q_k f_k (the training
/// conditional means mixed with random convex weights, same noise level) must
/// not have higher population MSE than the worst training environment, up to
/// twice the Monte Carlo standard error of the estimates.
template <typename PredictFn>
HullProbeReport hull_probe_check(PredictFn&& predict, const GpProbeData& probe, int n_mix,
                                 std::uint64_t seed) {
    if (n_mix < 1) throw ConfigError("hull_probe_check: need at least 1 mixture sample");
    const std::int64_t m = probe.m;
    const int K = static_cast<int>(probe.f_probe.size());
    const double var = probe.noise_sd * probe.noise_sd;

    std::vector<double> pred(m);
    for (std::int64_t i = 0; i < m; ++i)
        pred[i] = predict(std::span<const double>(probe.probe_x.data() + i * probe.train.p,
                                                  static_cast<std::size_t>(probe.train.p)));

    // Population MSE of a conditional mean f against the model, with the MC
    // standard error of the mean squared gap.
    const auto mc_risk = [&](const std::vector<double>& f) {
        double mean = 0.0, m2 = 0.0, n = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
            const double g = (f[i] - pred[i]) * (f[i] - pred[i]);
            n += 1.0;
            const double delta = g - mean;
            mean += delta / n;
            m2 += delta * (g - mean);
        }
        const double se = n > 1.0 ? std::sqrt(m2 / (n * (n - 1.0))) : 0.0;
        return std::pair<double, double>(mean + var, se);
    };

    HullProbeReport rep;
    double vertex_se = 0.0;
    for (int e = 0; e < K; ++e) {
        const auto [risk, se] = mc_risk(probe.f_probe[e]);
        if (risk > rep.vertex_max || e == 0) {
            rep.vertex_max = risk;
            vertex_se = se;
        }
    }

    Rng rng(derive_seed(seed, kTagMixtureQ));
    std::vector<double> f_mix(m);
    double mix_se = 0.0;
    rep.sampled_max = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < n_mix; ++s) {
        const std::vector<double> q = detail::sample_simplex(K, rng);
        std::fill(f_mix.begin(), f_mix.end(), 0.0);
        for (int e = 0; e < K; ++e)
            for (std::int64_t i = 0; i < m; ++i) f_mix[i] += q[e] * probe.f_probe[e][i];
        const auto [risk, se] = mc_risk(f_mix);
        if (risk > rep.sampled_max) {
            rep.sampled_max = risk;
            mix_se = se;
        }
        ++rep.n_checked;
    }
    rep.combined_se = std::sqrt(vertex_se * vertex_se + mix_se * mix_se);
    rep.ok = rep.sampled_max <= rep.vertex_max + 2.0 * rep.combined_se;
    return rep;
}

// ============================================================================
// Posthoc consistency probe
// ============================================================================

struct ConsistencyReport {
    std::vector<std::int64_t> n_grid;
    std::vector<double> median_excess;  ///< per grid point, median over reps
    bool non_increasing = false;
    double reference_risk = 0.0;  ///< worst-case risk of the large-sample solution
};

/// On a fixed tree partition, solve the leaf values on fresh samples of
/// growing size and track the worst-case population excess risk relative to
/// the large-sample solution; the population risk is approximated on one
/// large reference sample (n_reference rows per environment). Supports the
/// row-wise generators (PiecewiseLinear, MixtureUniform).
inline ConsistencyReport consistency_probe(const Tree& partition, const DgpConfig& cfg,
                                           RiskKind kind, const SolverConfig& solver,
                                           std::span<const std::int64_t> n_grid, int reps,
                                           std::uint64_t seed,
                                           std::int64_t n_reference = 100000) {
    if (cfg.setting != DgpSetting::PiecewiseLinear && cfg.setting != DgpSetting::MixtureUniform)
        throw ConfigError(
            "consistency_probe: needs a row-wise generator (pwl or mixture); Gaussian-process "
            "settings draw jointly and cannot be scaled to the reference sample");
    if (n_grid.empty() || reps < 1)
        throw ConfigError("consistency_probe: need a sample-size grid and at least 1 rep");
    const int T = partition.n_leaves();
    const TreeHyperparams offsets_hp{};  // regret offsets, if requested

    // Large-sample reference: statistics, offsets, and a high-precision solve.
    DgpConfig ref_cfg = cfg;
    ref_cfg.n_per_env = n_reference;
    ref_cfg.seed = derive_seed(seed, kTagProbe);
    const EnvDataset ref = gen_dataset(ref_cfg).train;
    const RiskSpec ref_spec = risk_offsets(ref, kind, offsets_hp);
    const LeafAssignment ref_assign = leaf_assignment(partition, ref);
    const LeafEnvStats ref_stats = collect_leaf_env_stats(ref, ref_assign.leaf_of_row, T);

    const auto init_theta = [&](const EnvDataset& ds, const LeafEnvStats& stats) {
        double pooled = 0.0;
        for (const double y : ds.y) pooled += y;
        pooled /= static_cast<double>(ds.size());
        std::vector<double> theta(T, pooled);
        for (int t = 0; t < T; ++t) {
            double num = 0.0, den = 0.0;
            for (int e = 0; e < stats.n_envs; ++e) {
                num += stats.count[stats.idx(e, t)] * stats.mean[stats.idx(e, t)];
                den += stats.count[stats.idx(e, t)];
            }
            if (den > 0.0) theta[t] = num / den;
        }
        return theta;
    };

    SolverConfig ref_solver = solver;
    ref_solver.delta = std::min(solver.delta, 1e-6);
    ref_solver.t_max = std::max(solver.t_max, 1000);
    ref_solver.patience = std::max(solver.patience, 20);
    const SolverResult ref_sol =
        solve_leaf_values(init_theta(ref, ref_stats), ref_stats, ref_spec, ref_solver);

    ConsistencyReport rep;
    rep.n_grid.assign(n_grid.begin(), n_grid.end());
    rep.reference_risk = max_empirical_risk(ref_sol.theta, ref_stats, ref_spec).z;

    for (std::size_t gi = 0; gi < n_grid.size(); ++gi) {
        std::vector<double> excess(reps);
        for (int r = 0; r < reps; ++r) {
            DgpConfig rep_cfg = cfg;
            rep_cfg.n_per_env = n_grid[gi];
            rep_cfg.seed = derive_seed(seed, kTagRepetition,
                                       gi * static_cast<std::uint64_t>(reps) + r);
            const EnvDataset sample = gen_dataset(rep_cfg).train;
            const RiskSpec spec = risk_offsets(sample, kind, offsets_hp);
            const LeafAssignment assign = leaf_assignment(partition, sample);
            const LeafEnvStats stats = collect_leaf_env_stats(sample, assign.leaf_of_row, T);
            const SolverResult sol =
                solve_leaf_values(init_theta(sample, stats), stats, spec, solver);
            excess[r] =
                max_empirical_risk(sol.theta, ref_stats, ref_spec).z - rep.reference_risk;
        }
        std::nth_element(excess.begin(), excess.begin() + reps / 2, excess.end());
        double med = excess[reps / 2];
        if (reps % 2 == 0) {
            std::nth_element(excess.begin(), excess.begin() + reps / 2 - 1, excess.end());
            med = 0.5 * (med + excess[reps / 2 - 1]);
        }
        rep.median_excess.push_back(med);
    }

    rep.non_increasing = true;
    for (std::size_t i = 1; i < rep.median_excess.size(); ++i)
        if (rep.median_excess[i] > rep.median_excess[i - 1] + 1e-12) rep.non_increasing = false;
    return rep;
}

}  // namespace maxrm
