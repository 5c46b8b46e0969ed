#pragma once

// Environment-labeled regression dataset: immutable after construction,
// shared read-only across workers.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maxrm/errors.hpp"
#include "maxrm/rng.hpp"

namespace maxrm {

// ============================================================================
// EnvDataset
// ============================================================================

struct EnvDataset {
    std::vector<double> x;  ///< row-major [n × p] covariates
    std::vector<double> y;  ///< responses, length n
    std::vector<int> env;   ///< environment label per row, in {0..n_envs-1}
    int p = 0;              ///< covariate dimension
    int n_envs = 0;         ///< environment count K
    std::vector<std::int64_t> env_counts;  ///< per-environment row counts n_e

    std::size_t size() const { return y.size(); }

    std::span<const double> row(std::size_t i) const {
        return {x.data() + i * static_cast<std::size_t>(p), static_cast<std::size_t>(p)};
    }

    /// Builds and validates a dataset. K defaults to max(env)+1; passing a
    /// larger K allows deliberately empty environments (bootstrap samples).
    static EnvDataset create(std::vector<double> x_in, std::vector<double> y_in,
                             std::vector<int> env_in, int p_in, int n_envs_in = -1) {
        EnvDataset ds;
        ds.x = std::move(x_in);
        ds.y = std::move(y_in);
        ds.env = std::move(env_in);
        ds.p = p_in;
        const std::size_t n = ds.y.size();
        if (ds.p < 1) throw DataError("dataset: covariate dimension must be >= 1");
        if (ds.env.size() != n)
            throw DataError("dataset: env label count does not match row count");
        if (ds.x.size() != n * static_cast<std::size_t>(ds.p))
            throw DataError("dataset: covariate matrix size does not match n x p");
        int max_label = -1;
        for (std::size_t i = 0; i < n; ++i) {
            if (ds.env[i] < 0)
                throw DataError("dataset: negative environment label at row " +
                                std::to_string(i + 1));
            max_label = std::max(max_label, ds.env[i]);
        }
        ds.n_envs = n_envs_in >= 0 ? n_envs_in : max_label + 1;
        if (max_label >= ds.n_envs)
            throw DataError("dataset: environment label " + std::to_string(max_label) +
                            " exceeds environment count " + std::to_string(ds.n_envs));
        if (ds.n_envs < 1) throw DataError("dataset: need at least one environment");
        ds.env_counts.assign(ds.n_envs, 0);
        for (const int e : ds.env) ++ds.env_counts[e];
        return ds;
    }

    /// True when every environment has at least one row.
    bool all_envs_nonempty() const {
        for (const auto c : env_counts)
            if (c == 0) return false;
        return true;
    }
};

// ============================================================================
// Resampling
// ============================================================================

/// n rows drawn uniformly with replacement from the pooled sample. Environment
/// counts s_e of the result may be zero; the environment count K is preserved.
inline EnvDataset bootstrap_sample(const EnvDataset& ds, std::uint64_t seed) {
    const std::size_t n = ds.size();
    Rng rng(seed);
    std::vector<double> bx(n * static_cast<std::size_t>(ds.p));
    std::vector<double> by(n);
    std::vector<int> benv(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(n));
        const auto src = ds.row(j);
        std::copy(src.begin(), src.end(), bx.begin() + i * static_cast<std::size_t>(ds.p));
        by[i] = ds.y[j];
        benv[i] = ds.env[j];
    }
    return EnvDataset::create(std::move(bx), std::move(by), std::move(benv), ds.p, ds.n_envs);
}

/// Environment-stratified split into (fit, holdout) parts with the given fit
/// fraction. Every environment must end up nonempty on both sides.
inline std::pair<EnvDataset, EnvDataset> stratified_split(const EnvDataset& ds,
                                                          double fit_fraction,
                                                          std::uint64_t seed) {
    if (!(fit_fraction > 0.0 && fit_fraction < 1.0))
        throw ConfigError("stratified_split: fit fraction must lie in (0, 1)");
    const std::size_t n = ds.size();
    std::vector<std::vector<std::size_t>> by_env(ds.n_envs);
    for (std::size_t i = 0; i < n; ++i) by_env[ds.env[i]].push_back(i);

    std::vector<bool> in_fit(n, false);
    Rng rng(seed);
    for (int e = 0; e < ds.n_envs; ++e) {
        auto& rows = by_env[e];
        if (rows.size() < 2)
            throw DataError("stratified_split: environment " + std::to_string(e) +
                            " has fewer than 2 rows, cannot appear in both parts");
        Rng env_rng = rng.split(static_cast<std::uint64_t>(e));
        for (std::size_t i = rows.size(); i > 1; --i)
            std::swap(rows[i - 1], rows[env_rng.below(i)]);
        std::size_t n_fit = static_cast<std::size_t>(
            std::llround(fit_fraction * static_cast<double>(rows.size())));
        n_fit = std::min(std::max<std::size_t>(n_fit, 1), rows.size() - 1);
        for (std::size_t i = 0; i < n_fit; ++i) in_fit[rows[i]] = true;
    }

    auto take = [&](bool want_fit) {
        std::vector<double> sx;
        std::vector<double> sy;
        std::vector<int> senv;
        for (std::size_t i = 0; i < n; ++i) {
            if (in_fit[i] != want_fit) continue;
            const auto src = ds.row(i);
            sx.insert(sx.end(), src.begin(), src.end());
            sy.push_back(ds.y[i]);
            senv.push_back(ds.env[i]);
        }
        return EnvDataset::create(std::move(sx), std::move(sy), std::move(senv), ds.p,
                                  ds.n_envs);
    };
    return {take(true), take(false)};
}

}  // namespace maxrm
