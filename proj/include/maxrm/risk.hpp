#pragma once

// Risk definitions and empirical risk evaluation on fixed partitions.
//
// Three risk kinds share one functional form: the per-environment empirical
// risk of leaf values theta is the environment's mean squared error minus a
// constant offset c_e,
//
//   R_e(theta) = (1 / (n_e v 1)) * sum_t [ SSD_{e,t} + n_{e,t} (mu_{e,t} - theta_t)^2 ] - c_e
//
// with c_e = 0 for plain MSE, c_e = mean of y^2 for negative reward, and
// c_e = the training MSE of a per-environment regression tree for regret.
// Offsets are computed once on the original (pre-bootstrap) sample and
// treated as environment constants thereafter. Environments with no rows
// (possible under bootstrap) evaluate to -c_e and are excluded from maxima.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maxrm/cart.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/errors.hpp"

namespace maxrm {

// ============================================================================
// Risk specification
// ============================================================================

enum class RiskKind { Mse, Nrw, Reg };

inline const char* risk_kind_name(RiskKind k) {
    switch (k) {
        case RiskKind::Mse: return "mse";
        case RiskKind::Nrw: return "nrw";
        case RiskKind::Reg: return "reg";
    }
    return "?";
}

inline RiskKind parse_risk_kind(const std::string& name) {
    if (name == "mse") return RiskKind::Mse;
    if (name == "nrw") return RiskKind::Nrw;
    if (name == "reg") return RiskKind::Reg;
    throw ConfigError("unknown risk kind '" + name + "' (expected mse|nrw|reg)");
}

struct RiskSpec {
    RiskKind kind = RiskKind::Mse;
    std::vector<double> offsets;  ///< c_e per environment

    static RiskSpec mse(int n_envs) {
        return RiskSpec{RiskKind::Mse, std::vector<double>(n_envs, 0.0)};
    }

    void validate(int n_envs) const {
        if (static_cast<int>(offsets.size()) != n_envs)
            throw ConfigError("risk: offsets length must equal the environment count");
        if (kind == RiskKind::Mse)
            for (double c : offsets)
                if (c != 0.0) throw ConfigError("risk: MSE offsets must all be zero");
    }
};

/// Offsets c_e on the original per-environment samples. For regret, a CART
/// tree is fit per environment with the same hyperparameters as the main
/// forest's trees; its training MSE is the achievable-risk baseline.
inline RiskSpec risk_offsets(const EnvDataset& ds, RiskKind kind, const TreeHyperparams& hp) {
    RiskSpec spec;
    spec.kind = kind;
    spec.offsets.assign(ds.n_envs, 0.0);
    if (kind == RiskKind::Mse) return spec;

    for (int e = 0; e < ds.n_envs; ++e) {
        if (ds.env_counts[e] < 1)
            throw DataError("risk offsets: environment " + std::to_string(e) + " has no rows");
        if (kind == RiskKind::Nrw) {
            double sum_sq = 0.0;
            for (std::int64_t i = 0; i < ds.size(); ++i)
                if (ds.env[i] == e) sum_sq += ds.y[i] * ds.y[i];
            spec.offsets[e] = sum_sq / static_cast<double>(ds.env_counts[e]);
        } else {  // Reg
            if (ds.env_counts[e] < hp.min_leaf_size)
                throw DataError("risk offsets: environment " + std::to_string(e) +
                                " has fewer rows than min_leaf_size; cannot fit its tree");
            std::vector<double> x, y;
            std::vector<int> env;
            x.reserve(static_cast<std::size_t>(ds.env_counts[e]) * ds.p);
            for (std::int64_t i = 0; i < ds.size(); ++i) {
                if (ds.env[i] != e) continue;
                const auto row = ds.row(i);
                x.insert(x.end(), row.begin(), row.end());
                y.push_back(ds.y[i]);
                env.push_back(0);
            }
            EnvDataset sub = EnvDataset::create(std::move(x), std::move(y), std::move(env), ds.p, 1);
            TreeHyperparams env_hp = hp;
            env_hp.seed = derive_seed(hp.seed, kTagOffsets, static_cast<std::uint64_t>(e));
            const Tree tree = fit_cart_tree(sub, env_hp);
            double ssd_total = 0.0;
            for (int t = 0; t < tree.n_leaves(); ++t) ssd_total += tree.stats.ssd[t];
            spec.offsets[e] = ssd_total / static_cast<double>(ds.env_counts[e]);
        }
    }
    return spec;
}

// ============================================================================
// Evaluation from sufficient statistics
// ============================================================================

inline double env_risk_from_stats(const LeafEnvStats& s, int e, std::span<const double> theta,
                                  double c_e) {
    const double n_e = s.env_rows[e];
    double acc = 0.0;
    const std::size_t base = s.idx(e, 0);
    for (int t = 0; t < s.n_leaves; ++t) {
        const double d = s.mean[base + t] - theta[t];
        acc += s.ssd[base + t] + s.count[base + t] * d * d;
    }
    return acc / (n_e > 0.0 ? n_e : 1.0) - c_e;
}

inline void env_risks_from_stats(const LeafEnvStats& s, std::span<const double> theta,
                                 const RiskSpec& spec, std::span<double> out) {
    for (int e = 0; e < s.n_envs; ++e) out[e] = env_risk_from_stats(s, e, theta, spec.offsets[e]);
}

/// Fills grad with sum_e p_e * grad R_e(theta), where the t-th coordinate of
/// grad R_e is (2 / n_e) * n_{e,t} * (theta_t - mu_{e,t}). Environments with
/// no rows contribute nothing.
inline void weighted_risk_gradient(const LeafEnvStats& s, std::span<const double> theta,
                                   std::span<const double> p, std::span<double> grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (int e = 0; e < s.n_envs; ++e) {
        if (s.env_rows[e] <= 0.0 || p[e] == 0.0) continue;
        const double scale = 2.0 * p[e] / s.env_rows[e];
        const std::size_t base = s.idx(e, 0);
        for (int t = 0; t < s.n_leaves; ++t)
            grad[t] += scale * s.count[base + t] * (theta[t] - s.mean[base + t]);
    }
}

// ============================================================================
// Worst-case risk
// ============================================================================

inline constexpr double kArgmaxTieTol = 1e-9;

struct RiskValue {
    std::vector<double> env_risks;
    double z = 0.0;
    std::vector<int> argmax;  ///< nonempty environments within tie tolerance of z
};

namespace detail {

/// Max over environments with rows, plus the relative-tolerance argmax set.
inline RiskValue finish_risk_value(std::vector<double> risks, std::span<const double> env_rows) {
    RiskValue out;
    out.env_risks = std::move(risks);
    bool any = false;
    for (std::size_t e = 0; e < out.env_risks.size(); ++e) {
        if (env_rows[e] <= 0.0) continue;
        if (!any || out.env_risks[e] > out.z) out.z = out.env_risks[e];
        any = true;
    }
    if (!any) throw DataError("max risk: every environment is empty");
    const double tol = kArgmaxTieTol * std::max(1.0, std::abs(out.z));
    for (std::size_t e = 0; e < out.env_risks.size(); ++e)
        if (env_rows[e] > 0.0 && out.env_risks[e] >= out.z - tol)
            out.argmax.push_back(static_cast<int>(e));
    return out;
}

}  // namespace detail

inline RiskValue max_empirical_risk(std::span<const double> theta, const LeafEnvStats& stats,
                                    const RiskSpec& spec) {
    std::vector<double> risks(stats.n_envs);
    env_risks_from_stats(stats, theta, spec, risks);
    return detail::finish_risk_value(std::move(risks), stats.env_rows);
}

// ============================================================================
// Row-level evaluation (model-agnostic)
// ============================================================================

/// Empirical risk of fixed leaf values in one environment, straight from the
/// rows: mean squared deviation of theta[leaf(i)] from y_i, minus c_e.
inline double empirical_env_risk(const EnvDataset& ds, const LeafAssignment& assign,
                                 std::span<const double> leaf_values, int env, double c_e) {
    double acc = 0.0;
    std::int64_t n_e = 0;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        if (ds.env[i] != env) continue;
        const double d = leaf_values[assign.leaf_of_row[i]] - ds.y[i];
        acc += d * d;
        ++n_e;
    }
    return acc / (n_e > 0 ? static_cast<double>(n_e) : 1.0) - c_e;
}

/// Per-environment risks of arbitrary predictions (forests, oracles) on a
/// dataset, with the usual empty-environment and max conventions.
inline RiskValue prediction_risks(const EnvDataset& ds, std::span<const double> preds,
                                  const RiskSpec& spec) {
    std::vector<double> sq(ds.n_envs, 0.0);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const double d = preds[i] - ds.y[i];
        sq[ds.env[i]] += d * d;
    }
    std::vector<double> risks(ds.n_envs);
    std::vector<double> env_rows(ds.n_envs);
    for (int e = 0; e < ds.n_envs; ++e) {
        const double n_e = static_cast<double>(ds.env_counts[e]);
        risks[e] = sq[e] / (n_e > 0.0 ? n_e : 1.0) - spec.offsets[e];
        env_rows[e] = n_e;
    }
    return detail::finish_risk_value(std::move(risks), env_rows);
}

}  // namespace maxrm
