#pragma once

// Reference methods and closed-form population risks.
//
//   fit_standard_forest     plain bagged CART regression forest.
//   fit_magging             one standard forest per environment, aggregated
//                           with convex weights that minimize the worst-case
//                           in-sample risk across environments.
//   oracle_analytic_risks   exact per-environment population MSE of a
//                           two-slope predictor under the analytic settings.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "maxrm/cart.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/dgp.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/minimax.hpp"
#include "maxrm/parallel.hpp"
#include "maxrm/risk.hpp"
#include "maxrm/rng.hpp"

namespace maxrm {

// ============================================================================
// Standard random forest
// ============================================================================

inline Forest fit_standard_forest(const EnvDataset& ds, const TreeHyperparams& hp, int n_trees,
                                  std::uint64_t seed, int workers = 1) {
    hp.validate(ds.p);
    return fit_bagged_forest(ds, n_trees, seed, workers,
                             [&](const EnvDataset& boot, std::uint64_t tree_seed) {
                                 TreeHyperparams tree_hp = hp;
                                 tree_hp.seed = tree_seed;
                                 return fit_cart_tree(boot, tree_hp);
                             });
}

// ============================================================================
// Magging
// ============================================================================

/// Rows of one environment as a standalone single-environment dataset.
inline EnvDataset single_env_subset(const EnvDataset& ds, int env) {
    if (env < 0 || env >= ds.n_envs) throw ConfigError("single_env_subset: environment out of range");
    std::vector<double> x, y;
    std::vector<int> env_col;
    x.reserve(static_cast<std::size_t>(ds.env_counts[env]) * ds.p);
    y.reserve(ds.env_counts[env]);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        if (ds.env[i] != env) continue;
        const auto row = ds.row(i);
        x.insert(x.end(), row.begin(), row.end());
        y.push_back(ds.y[i]);
        env_col.push_back(0);
    }
    return EnvDataset::create(std::move(x), std::move(y), std::move(env_col), ds.p, 1);
}

struct MaggingModel {
    std::vector<Forest> forests;  ///< one standard forest per environment
    std::vector<double> q;        ///< convex mixing weights over environments
    RiskKind risk_kind = RiskKind::Mse;
    double max_in_sample_risk = std::numeric_limits<double>::quiet_NaN();
    int iterations = 0;
    bool converged = false;

    double predict(std::span<const double> x) const {
        double out = 0.0;
        for (std::size_t k = 0; k < forests.size(); ++k)
            if (q[k] > 0.0) out += q[k] * forests[k].predict(x);
        return out;
    }
};

inline std::vector<double> predict_magging(const MaggingModel& model, const EnvDataset& ds) {
    std::vector<double> preds(ds.size());
    for (std::int64_t i = 0; i < ds.size(); ++i) preds[i] = model.predict(ds.row(i));
    return preds;
}

/// Fit one standard forest per environment, then solve the convex mixing
/// weights by projected extragradient on min_{q in the simplex} max_e
/// empirical risk of the mixture, using in-sample predictions.
///
/// scale_min_leaf divides the minimum leaf size by the number of environments
/// (floored at 1) so per-environment trees keep the granularity a pooled fit
/// of the same total size would have.
inline MaggingModel fit_magging(const EnvDataset& ds, const RiskSpec& spec,
                                const TreeHyperparams& hp, int n_trees, std::uint64_t seed,
                                const SolverConfig& solver = SolverConfig{},
                                bool scale_min_leaf = false, int workers = 1) {
    hp.validate(ds.p);
    solver.validate();
    spec.validate(ds.n_envs);
    if (n_trees < 1) throw ConfigError("magging: tree count must be >= 1");
    const int K = ds.n_envs;
    for (int e = 0; e < K; ++e)
        if (ds.env_counts[e] == 0)
            throw DataError("magging: environment " + std::to_string(e) +
                            " has no rows; cannot fit a per-environment forest");

    TreeHyperparams env_hp = hp;
    if (scale_min_leaf) env_hp.min_leaf_size = std::max<std::int64_t>(1, hp.min_leaf_size / K);

    MaggingModel model;
    model.risk_kind = spec.kind;
    model.forests.resize(K);
    for (int k = 0; k < K; ++k) {
        const EnvDataset sub = single_env_subset(ds, k);
        model.forests[k] = fit_standard_forest(
            sub, env_hp, n_trees, derive_seed(seed, kTagMethod, static_cast<std::uint64_t>(k)),
            workers);
    }

    const std::int64_t n = ds.size();
    std::vector<double> preds(static_cast<std::size_t>(K) * n);
    parallel_for(K, workers, [&](int k) {
        double* out = preds.data() + static_cast<std::size_t>(k) * n;
        for (std::int64_t i = 0; i < n; ++i) out[i] = model.forests[k].predict(ds.row(i));
    });

    const WeightsResult wr = extragradient_weights(preds, K, ds, spec, solver);
    model.q = wr.weights;
    model.max_in_sample_risk = wr.z;
    model.iterations = wr.iterations;
    model.converged = wr.converged;
    return model;
}

// ============================================================================
// Analytic population risks
// ============================================================================

struct AnalyticRisks {
    std::vector<double> env_risks;
    double max = -std::numeric_limits<double>::infinity();
};

/// Exact per-environment population MSE of the two-slope predictor under an
/// analytic setting, plus the maximum. The slope pair follows each setting's
/// native order:
///   PiecewiseLinear   a multiplies x on (-4, 0], b on (0, 4);
///   MixtureUniform    a multiplies x on [0, 4)  (the heavy side of
///                     environments 0 and 2), b on (-4, 0).
/// noise_sd < 0 selects the setting's default noise level.
inline AnalyticRisks oracle_analytic_risks(double a, double b, DgpSetting setting,
                                           double noise_sd = -1.0) {
    if (noise_sd < 0.0) noise_sd = DgpConfig::defaults_for(setting).noise_sd;
    const double var = noise_sd * noise_sd;
    AnalyticRisks out;
    switch (setting) {
        case DgpSetting::PiecewiseLinear: {
            // X ~ U(-4, 4): E[X^2 ; X < 0] = E[X^2 ; X > 0] = 8/3.
            const double m2 = 8.0 / 3.0;
            for (std::size_t e = 0; e < kPwlAlphas.size(); ++e) {
                const double da = kPwlAlphas[e] - a, db = kPwlBetas[e] - b;
                out.env_risks.push_back(m2 * (da * da + db * db) + var);
            }
            break;
        }
        case DgpSetting::MixtureUniform: {
            // Mixture of U(0,4) and U(-4,0) with weights (0.9, 0.1); each
            // component has second moment 16/3.
            const double heavy = 0.9 * 16.0 / 3.0;  // 24/5
            const double light = 0.1 * 16.0 / 3.0;  // 8/15
            for (std::size_t e = 0; e < kMixtureSlopes.size(); ++e) {
                const double s = kMixtureSlopes[e];
                const double pos = e == 1 ? light : heavy;
                const double neg = e == 1 ? heavy : light;
                const double da = s - a, db = s - b;
                out.env_risks.push_back(pos * da * da + neg * db * db + var);
            }
            break;
        }
        default:
            throw ConfigError("oracle_analytic_risks: no closed form for setting '" +
                              std::string(dgp_setting_name(setting)) + "'");
    }
    for (const double r : out.env_risks) out.max = std::max(out.max, r);
    return out;
}

}  // namespace maxrm
