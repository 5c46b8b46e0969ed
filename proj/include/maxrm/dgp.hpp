#pragma once

// Simulation settings with known structure:
//   PiecewiseLinear  K=3 piecewise-linear conditional means on Unif[-4,4],
//                    with analytic max-risk and pooled oracles.
//   GpNoShift        per-environment GP regression functions, common
//                    covariate law Unif[-1,1]^p.
//   GpBetaShift      as GpNoShift but per-environment Beta covariate shifts.
//   GpIdentical      one shared GP function for all environments.
//   MixtureUniform   K=3 linear conditional means under two-sided uniform
//                    mixture covariates, with an analytic max-risk oracle.
//
// Generators are pure functions of (config, seed); train and test sets are
// drawn independently with the same per-environment sizes. Latent regression
// values are returned alongside the data for oracle-based diagnostics.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maxrm/dataset.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/gp.hpp"
#include "maxrm/rng.hpp"

namespace maxrm {

// ============================================================================
// Config
// ============================================================================

enum class DgpSetting { PiecewiseLinear, GpNoShift, GpBetaShift, GpIdentical, MixtureUniform };

inline const char* dgp_setting_name(DgpSetting s) {
    switch (s) {
        case DgpSetting::PiecewiseLinear: return "pwl";
        case DgpSetting::GpNoShift: return "gp-noshift";
        case DgpSetting::GpBetaShift: return "gp-betashift";
        case DgpSetting::GpIdentical: return "gp-identical";
        case DgpSetting::MixtureUniform: return "mixture";
    }
    return "?";
}

inline DgpSetting parse_dgp_setting(const std::string& name) {
    if (name == "pwl") return DgpSetting::PiecewiseLinear;
    if (name == "gp-noshift") return DgpSetting::GpNoShift;
    if (name == "gp-betashift") return DgpSetting::GpBetaShift;
    if (name == "gp-identical") return DgpSetting::GpIdentical;
    if (name == "mixture") return DgpSetting::MixtureUniform;
    throw ConfigError("unknown DGP setting '" + name +
                      "' (expected pwl|gp-noshift|gp-betashift|gp-identical|mixture)");
}

struct DgpConfig {
    DgpSetting setting = DgpSetting::PiecewiseLinear;
    std::int64_t n_per_env = 333;
    int n_envs = 3;
    int p = 1;
    double noise_sd = 0.5;
    double gp_lengthscale = 0.5;
    std::uint64_t seed = 0;
    /// Stream for per-environment fixed parameters (Beta covariate shapes),
    /// held constant across repetitions while `seed` varies. 0 means
    /// "derive from seed".
    std::uint64_t param_seed = 0;

    std::uint64_t effective_param_seed() const {
        return param_seed != 0 ? param_seed : derive_seed(seed, kTagDgpParams);
    }

    void validate() const {
        if (n_per_env < 1) throw ConfigError("dgp: n_per_env must be >= 1");
        if (n_envs < 1) throw ConfigError("dgp: environment count must be >= 1");
        if (p < 1) throw ConfigError("dgp: covariate dimension must be >= 1");
        if (noise_sd < 0.0) throw ConfigError("dgp: noise_sd must be >= 0");
        if (gp_lengthscale <= 0.0) throw ConfigError("dgp: gp_lengthscale must be > 0");
        const bool fixed_k3p1 = setting == DgpSetting::PiecewiseLinear ||
                                setting == DgpSetting::MixtureUniform;
        if (fixed_k3p1 && (n_envs != 3 || p != 1))
            throw ConfigError(std::string("dgp: setting '") + dgp_setting_name(setting) +
                              "' requires K = 3 environments and p = 1");
    }

    /// Paper defaults per setting (sizes are desk-scale, not the full runs).
    static DgpConfig defaults_for(DgpSetting s) {
        DgpConfig cfg;
        cfg.setting = s;
        switch (s) {
            case DgpSetting::PiecewiseLinear:
                cfg.n_per_env = 333, cfg.n_envs = 3, cfg.p = 1, cfg.noise_sd = 0.5;
                break;
            case DgpSetting::GpNoShift:
            case DgpSetting::GpBetaShift:
            case DgpSetting::GpIdentical:
                cfg.n_per_env = 500, cfg.n_envs = 5, cfg.p = 5, cfg.noise_sd = 0.25;
                cfg.gp_lengthscale = 0.5;
                break;
            case DgpSetting::MixtureUniform:
                cfg.n_per_env = 1000, cfg.n_envs = 3, cfg.p = 1, cfg.noise_sd = 1.0;
                break;
        }
        return cfg;
    }
};

/// Deterministic reference function on the DGP's covariate support.
struct OracleFn {
    std::function<double(std::span<const double>)> eval;
    std::string tag;

    double operator()(std::span<const double> x) const { return eval(x); }
    double operator()(double x) const { return eval(std::span<const double>(&x, 1)); }
};

/// One simulated train/test pair plus the latent (noise-free) regression
/// values per row and, where available, analytic oracle predictors.
struct SimData {
    EnvDataset train;
    EnvDataset test;
    std::vector<double> f_train;
    std::vector<double> f_test;
    std::optional<OracleFn> maxmse_oracle;
    std::optional<OracleFn> pooled_oracle;
};

// ============================================================================
// Setting constants
// ============================================================================

/// Piecewise-linear slopes (alpha_e for x <= 0, beta_e for x > 0).
inline constexpr std::array<double, 3> kPwlAlphas{-0.5, 3.0, 2.5};
inline constexpr std::array<double, 3> kPwlBetas{4.0, 0.5, 1.0};
inline constexpr double kPwlMaxAlpha = 1.25, kPwlMaxBeta = 2.25;        // max-MSE oracle
inline constexpr double kPwlPoolAlpha = 5.0 / 3.0, kPwlPoolBeta = 11.0 / 6.0;  // pooled oracle

/// MixtureUniform linear slopes per environment and max-risk oracle slopes
/// (c_plus on x >= 0, c_minus on x < 0).
inline constexpr std::array<double, 3> kMixtureSlopes{3.0, -3.0, 2.0};
inline constexpr double kMixtureOracleCp = 2.4, kMixtureOracleCm = -2.4;

inline OracleFn piecewise_linear_oracle(double alpha, double beta, std::string tag) {
    return OracleFn{[alpha, beta](std::span<const double> x) {
                        return x[0] <= 0.0 ? alpha * x[0] : beta * x[0];
                    },
                    std::move(tag)};
}

// ============================================================================
// Generators
// ============================================================================

namespace detail {

struct EnvBlock {
    std::vector<double> x;
    std::vector<double> f;
    std::vector<double> y;
};

/// Assembles per-environment blocks (ordered e = 0..K-1) into one dataset.
inline EnvDataset assemble(const std::vector<EnvBlock>& blocks, int p,
                           std::vector<double>* latent_out) {
    std::vector<double> xs;
    std::vector<double> ys;
    std::vector<int> envs;
    latent_out->clear();
    for (std::size_t e = 0; e < blocks.size(); ++e) {
        xs.insert(xs.end(), blocks[e].x.begin(), blocks[e].x.end());
        ys.insert(ys.end(), blocks[e].y.begin(), blocks[e].y.end());
        latent_out->insert(latent_out->end(), blocks[e].f.begin(), blocks[e].f.end());
        envs.insert(envs.end(), blocks[e].y.size(), static_cast<int>(e));
    }
    return EnvDataset::create(std::move(xs), std::move(ys), std::move(envs), p,
                              static_cast<int>(blocks.size()));
}

/// One covariate draw for MixtureUniform: env 0 and 2 put weight 0.9 on
/// U(0,4) and 0.1 on U(-4,0); env 1 mirrors the weights.
inline double mixture_covariate(int env, Rng& rng) {
    const double w_pos = (env == 1) ? 0.1 : 0.9;
    const bool positive = rng.uniform() < w_pos;
    return positive ? rng.uniform(0.0, 4.0) : rng.uniform(-4.0, 0.0);
}

}  // namespace detail

/// K=3 piecewise-linear setting on Unif[-4,4] with noise sd cfg.noise_sd.
inline SimData gen_piecewise_linear(const DgpConfig& cfg) {
    cfg.validate();
    if (cfg.setting != DgpSetting::PiecewiseLinear)
        throw ConfigError("gen_piecewise_linear: wrong setting");
    SimData out;
    auto make_split = [&](std::uint64_t x_tag, std::uint64_t noise_tag, EnvDataset* ds,
                          std::vector<double>* latent) {
        std::vector<detail::EnvBlock> blocks(3);
        for (int e = 0; e < 3; ++e) {
            Rng rx(derive_seed(cfg.seed, x_tag, static_cast<std::uint64_t>(e)));
            Rng rn(derive_seed(cfg.seed, noise_tag, static_cast<std::uint64_t>(e)));
            auto& blk = blocks[e];
            for (std::int64_t i = 0; i < cfg.n_per_env; ++i) {
                const double x = rx.uniform(-4.0, 4.0);
                const double f = x <= 0.0 ? kPwlAlphas[e] * x : kPwlBetas[e] * x;
                blk.x.push_back(x);
                blk.f.push_back(f);
                blk.y.push_back(f + cfg.noise_sd * rn.normal());
            }
        }
        *ds = detail::assemble(blocks, 1, latent);
    };
    make_split(kTagTrainX, kTagTrainNoise, &out.train, &out.f_train);
    make_split(kTagTestX, kTagTestNoise, &out.test, &out.f_test);
    out.maxmse_oracle = piecewise_linear_oracle(kPwlMaxAlpha, kPwlMaxBeta, "pwl-maxmse-oracle");
    out.pooled_oracle =
        piecewise_linear_oracle(kPwlPoolAlpha, kPwlPoolBeta, "pwl-pooled-oracle");
    return out;
}

/// GP settings. Per environment (or once, for GpIdentical) the regression
/// function is drawn jointly at that environment's train and test covariates.
inline SimData gen_gp_envs(const DgpConfig& cfg) {
    cfg.validate();
    if (cfg.setting != DgpSetting::GpNoShift && cfg.setting != DgpSetting::GpBetaShift &&
        cfg.setting != DgpSetting::GpIdentical)
        throw ConfigError("gen_gp_envs: wrong setting");
    const int K = cfg.n_envs;
    const std::int64_t n = cfg.n_per_env;
    const int p = cfg.p;

    // Per-environment Beta shapes, fixed across repetitions via param_seed.
    std::vector<double> alpha(K, 0.0), beta_shape(K, 0.0);
    if (cfg.setting == DgpSetting::GpBetaShift) {
        for (int e = 0; e < K; ++e) {
            Rng rp(derive_seed(cfg.effective_param_seed(), kTagDgpParams,
                               static_cast<std::uint64_t>(e)));
            alpha[e] = rp.uniform(0.5, 2.5);
            beta_shape[e] = rp.uniform(0.5, 2.5);
        }
    }

    auto draw_x = [&](int e, std::uint64_t tag, std::int64_t rows) {
        Rng rx(derive_seed(cfg.seed, tag, static_cast<std::uint64_t>(e)));
        std::vector<double> x(static_cast<std::size_t>(rows) * p);
        for (auto& v : x)
            v = cfg.setting == DgpSetting::GpBetaShift
                    ? 2.0 * rx.beta(alpha[e], beta_shape[e]) - 1.0
                    : rx.uniform(-1.0, 1.0);
        return x;
    };

    std::vector<detail::EnvBlock> train_blocks(K), test_blocks(K);
    for (int e = 0; e < K; ++e) {
        train_blocks[e].x = draw_x(e, kTagTrainX, n);
        test_blocks[e].x = draw_x(e, kTagTestX, n);
    }

    // Latent function values: one joint draw per environment, or one global
    // joint draw shared by all environments.
    const std::size_t rows_each = static_cast<std::size_t>(n);
    if (cfg.setting == DgpSetting::GpIdentical) {
        std::vector<double> pts;
        for (int e = 0; e < K; ++e)
            pts.insert(pts.end(), train_blocks[e].x.begin(), train_blocks[e].x.end());
        for (int e = 0; e < K; ++e)
            pts.insert(pts.end(), test_blocks[e].x.begin(), test_blocks[e].x.end());
        const int total = static_cast<int>(2 * rows_each) * K;
        const auto f = sample_gp_values(pts, total, p, cfg.gp_lengthscale,
                                        derive_seed(cfg.seed, kTagGpDraw));
        for (int e = 0; e < K; ++e)
            train_blocks[e].f.assign(f.begin() + e * rows_each,
                                     f.begin() + (e + 1) * rows_each);
        const std::size_t off = rows_each * K;
        for (int e = 0; e < K; ++e)
            test_blocks[e].f.assign(f.begin() + off + e * rows_each,
                                    f.begin() + off + (e + 1) * rows_each);
    } else {
        for (int e = 0; e < K; ++e) {
            std::vector<double> pts = train_blocks[e].x;
            pts.insert(pts.end(), test_blocks[e].x.begin(), test_blocks[e].x.end());
            const auto f = sample_gp_values(
                pts, static_cast<int>(2 * rows_each), p, cfg.gp_lengthscale,
                derive_seed(cfg.seed, kTagGpDraw, static_cast<std::uint64_t>(e)));
            train_blocks[e].f.assign(f.begin(), f.begin() + rows_each);
            test_blocks[e].f.assign(f.begin() + rows_each, f.end());
        }
    }

    auto add_noise = [&](std::vector<detail::EnvBlock>& blocks, std::uint64_t tag) {
        for (int e = 0; e < K; ++e) {
            Rng rn(derive_seed(cfg.seed, tag, static_cast<std::uint64_t>(e)));
            auto& blk = blocks[e];
            blk.y.resize(blk.f.size());
            for (std::size_t i = 0; i < blk.f.size(); ++i)
                blk.y[i] = blk.f[i] + cfg.noise_sd * rn.normal();
        }
    };
    add_noise(train_blocks, kTagTrainNoise);
    add_noise(test_blocks, kTagTestNoise);

    SimData out;
    out.train = detail::assemble(train_blocks, p, &out.f_train);
    out.test = detail::assemble(test_blocks, p, &out.f_test);
    return out;
}

/// App-style K=3 mixture covariate setting with linear conditional means and
/// unit noise; analytic max-risk oracle has slopes (2.4, -2.4).
inline SimData gen_mixture_uniform(const DgpConfig& cfg) {
    cfg.validate();
    if (cfg.setting != DgpSetting::MixtureUniform)
        throw ConfigError("gen_mixture_uniform: wrong setting");
    SimData out;
    auto make_split = [&](std::uint64_t x_tag, std::uint64_t noise_tag, EnvDataset* ds,
                          std::vector<double>* latent) {
        std::vector<detail::EnvBlock> blocks(3);
        for (int e = 0; e < 3; ++e) {
            Rng rx(derive_seed(cfg.seed, x_tag, static_cast<std::uint64_t>(e)));
            Rng rn(derive_seed(cfg.seed, noise_tag, static_cast<std::uint64_t>(e)));
            auto& blk = blocks[e];
            for (std::int64_t i = 0; i < cfg.n_per_env; ++i) {
                const double x = detail::mixture_covariate(e, rx);
                const double f = kMixtureSlopes[e] * x;
                blk.x.push_back(x);
                blk.f.push_back(f);
                blk.y.push_back(f + cfg.noise_sd * rn.normal());
            }
        }
        *ds = detail::assemble(blocks, 1, latent);
    };
    make_split(kTagTrainX, kTagTrainNoise, &out.train, &out.f_train);
    make_split(kTagTestX, kTagTestNoise, &out.test, &out.f_test);
    out.maxmse_oracle = OracleFn{[](std::span<const double> x) {
                                     return x[0] >= 0.0 ? kMixtureOracleCp * x[0]
                                                        : kMixtureOracleCm * x[0];
                                 },
                                 "mixture-maxmse-oracle"};
    return out;
}

/// Dispatch on cfg.setting.
inline SimData gen_dataset(const DgpConfig& cfg) {
    switch (cfg.setting) {
        case DgpSetting::PiecewiseLinear: return gen_piecewise_linear(cfg);
        case DgpSetting::GpNoShift:
        case DgpSetting::GpBetaShift:
        case DgpSetting::GpIdentical: return gen_gp_envs(cfg);
        case DgpSetting::MixtureUniform: return gen_mixture_uniform(cfg);
    }
    throw ConfigError("gen_dataset: unknown setting");
}

/// Fresh covariates from the training covariate mixture (environments weighted
/// equally, matching equal per-environment sizes). Used for MISE estimates.
inline std::vector<double> sample_covariates(const DgpConfig& cfg, std::size_t m,
                                             std::uint64_t seed, std::vector<int>* envs_out) {
    cfg.validate();
    Rng rng(seed);
    std::vector<double> alpha(cfg.n_envs, 0.0), beta_shape(cfg.n_envs, 0.0);
    if (cfg.setting == DgpSetting::GpBetaShift) {
        for (int e = 0; e < cfg.n_envs; ++e) {
            Rng rp(derive_seed(cfg.effective_param_seed(), kTagDgpParams,
                               static_cast<std::uint64_t>(e)));
            alpha[e] = rp.uniform(0.5, 2.5);
            beta_shape[e] = rp.uniform(0.5, 2.5);
        }
    }
    std::vector<double> x(m * static_cast<std::size_t>(cfg.p));
    if (envs_out) envs_out->resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const int e = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_envs)));
        if (envs_out) (*envs_out)[i] = e;
        double* row = x.data() + i * cfg.p;
        switch (cfg.setting) {
            case DgpSetting::PiecewiseLinear:
                row[0] = rng.uniform(-4.0, 4.0);
                break;
            case DgpSetting::MixtureUniform:
                row[0] = detail::mixture_covariate(e, rng);
                break;
            case DgpSetting::GpBetaShift:
                for (int j = 0; j < cfg.p; ++j)
                    row[j] = 2.0 * rng.beta(alpha[e], beta_shape[e]) - 1.0;
                break;
            case DgpSetting::GpNoShift:
            case DgpSetting::GpIdentical:
                for (int j = 0; j < cfg.p; ++j) row[j] = rng.uniform(-1.0, 1.0);
                break;
        }
    }
    return x;
}

/// No-shift GP data plus every environment's latent function evaluated at a
/// shared probe grid, for convex-hull generalization checks that synthesize
/// mixture environments f = sum_k q_k f^k.
struct GpProbeData {
    EnvDataset train;
    std::vector<double> probe_x;          ///< row-major m x p
    std::size_t m = 0;                    ///< probe rows
    std::vector<std::vector<double>> f_probe;  ///< per environment, length m
    double noise_sd = 0.0;
};

inline GpProbeData gen_gp_with_probe(const DgpConfig& cfg, std::size_t m_probe) {
    cfg.validate();
    if (cfg.setting != DgpSetting::GpNoShift)
        throw ConfigError("gen_gp_with_probe: requires the gp-noshift setting");
    GpProbeData out;
    out.m = m_probe;
    out.noise_sd = cfg.noise_sd;
    out.probe_x = sample_covariates(cfg, m_probe, derive_seed(cfg.seed, kTagTestX), nullptr);

    const std::size_t n = static_cast<std::size_t>(cfg.n_per_env);
    std::vector<detail::EnvBlock> blocks(cfg.n_envs);
    out.f_probe.resize(cfg.n_envs);
    for (int e = 0; e < cfg.n_envs; ++e) {
        Rng rx(derive_seed(cfg.seed, kTagTrainX, static_cast<std::uint64_t>(e)));
        auto& blk = blocks[e];
        blk.x.resize(n * cfg.p);
        for (auto& v : blk.x) v = rx.uniform(-1.0, 1.0);
        std::vector<double> pts = blk.x;
        pts.insert(pts.end(), out.probe_x.begin(), out.probe_x.end());
        const auto f = sample_gp_values(
            pts, static_cast<int>(n + m_probe), cfg.p, cfg.gp_lengthscale,
            derive_seed(cfg.seed, kTagGpDraw, static_cast<std::uint64_t>(e)));
        blk.f.assign(f.begin(), f.begin() + n);
        out.f_probe[e].assign(f.begin() + n, f.end());
        Rng rn(derive_seed(cfg.seed, kTagTrainNoise, static_cast<std::uint64_t>(e)));
        blk.y.resize(n);
        for (std::size_t i = 0; i < n; ++i) blk.y[i] = blk.f[i] + cfg.noise_sd * rn.normal();
    }
    std::vector<double> latent;
    out.train = detail::assemble(blocks, cfg.p, &latent);
    return out;
}

}  // namespace maxrm
