#pragma once

// Solvers for the worst-case-risk problem
//
//   min_theta  max_e  R_e(theta),
//
// a convex-concave saddle problem once written as min_theta max_{p in simplex}
// sum_e p_e R_e(theta). Three routines:
//
//  - extragradient_posthoc: projected extragradient on (theta, p) with
//    best-so-far tracking (step gamma, improvement threshold delta,
//    patience P).
//  - bcd_posthoc: cyclic block-coordinate descent over fixed-size leaf
//    blocks; each block subproblem is solved by the restricted extragradient.
//  - kkt_local_solve: exact enumeration for the two-value subproblem that
//    arises when splitting one leaf (active sets of size <= 3 suffice for a
//    two-dimensional decision variable), with an extragradient fallback.
//
// extragradient_weights solves the same outer problem over convex tree
// weights instead of leaf values, with both updates projected.
//
// Everything operates on LeafEnvStats; environments with no rows are skipped
// (their dual weight is pinned to zero and they never enter the max).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maxrm/cart.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/log.hpp"
#include "maxrm/risk.hpp"

namespace maxrm {

// ============================================================================
// Configuration / results
// ============================================================================

enum class SolverMethod { Eg, Bcd, Kkt };

inline const char* solver_method_name(SolverMethod m) {
    switch (m) {
        case SolverMethod::Eg: return "eg";
        case SolverMethod::Bcd: return "bcd";
        case SolverMethod::Kkt: return "kkt";
    }
    return "?";
}

inline SolverMethod parse_solver_method(const std::string& name) {
    if (name == "eg") return SolverMethod::Eg;
    if (name == "bcd") return SolverMethod::Bcd;
    if (name == "kkt") return SolverMethod::Kkt;
    throw ConfigError("unknown solver method '" + name + "' (expected eg|bcd|kkt)");
}

struct SolverConfig {
    SolverMethod method = SolverMethod::Eg;
    double gamma = 0.1;
    int t_max = 100;
    double delta = 1e-3;
    int patience = 5;
    int block_size = 15;

    /// Method defaults: BCD stops after a single sub-delta iteration.
    static SolverConfig defaults_for(SolverMethod m) {
        SolverConfig cfg;
        cfg.method = m;
        if (m == SolverMethod::Bcd) cfg.patience = 1;
        return cfg;
    }

    void validate() const {
        if (!(gamma > 0.0)) throw ConfigError("solver: gamma must be > 0");
        if (!(delta > 0.0)) throw ConfigError("solver: delta must be > 0");
        if (t_max < 1) throw ConfigError("solver: t_max must be >= 1");
        if (patience < 1) throw ConfigError("solver: patience must be >= 1");
        if (block_size < 1) throw ConfigError("solver: block_size must be >= 1");
    }
};

struct SolverResult {
    std::vector<double> theta;
    double z = std::numeric_limits<double>::infinity();
    std::vector<double> p;  ///< dual weights over all environments (0 on empty ones)
    int iterations = 0;
    bool converged = false;
};

// ============================================================================
// Simplex projection and the weighted-means inner minimizer
// ============================================================================

/// Euclidean projection onto the probability simplex (sort-based).
inline std::vector<double> project_simplex(std::span<const double> v) {
    const int K = static_cast<int>(v.size());
    if (K == 0) return {};
    std::vector<double> u(v.begin(), v.end());
    std::sort(u.begin(), u.end(), std::greater<>());
    double cumsum = 0.0, tau = 0.0;
    for (int j = 0; j < K; ++j) {
        cumsum += u[j];
        const double t = (cumsum - 1.0) / (j + 1);
        if (u[j] - t > 0.0) tau = t;
    }
    std::vector<double> out(K);
    for (int i = 0; i < K; ++i) out[i] = std::max(v[i] - tau, 0.0);
    return out;
}

/// Exact minimizer of sum_e p_e R_e(theta) for fixed p: a per-leaf weighted
/// mean with weights p_e n_{e,t} / n_e. Leaves seen by no weighted
/// environment are indeterminate and keep their incoming value.
inline void weighted_leaf_means(const LeafEnvStats& s, std::span<const double> p,
                                std::span<double> theta) {
    for (int t = 0; t < s.n_leaves; ++t) {
        double num = 0.0, den = 0.0;
        for (int e = 0; e < s.n_envs; ++e) {
            if (s.env_rows[e] <= 0.0 || p[e] == 0.0) continue;
            const std::size_t i = s.idx(e, t);
            const double w = p[e] * s.count[i] / s.env_rows[e];
            num += w * s.mean[i];
            den += w;
        }
        if (den > 0.0) theta[t] = num / den;
    }
}

// ============================================================================
// Extragradient core
// ============================================================================

namespace detail {

/// Risk evaluation over the environments that actually have rows, with an
/// optional frozen per-environment numerator (used by block and split
/// subproblems whose remaining leaves are held fixed).
struct StatsProblem {
    const LeafEnvStats* stats = nullptr;
    std::span<const double> offsets;
    std::span<const double> frozen;  ///< empty means all-zero
    std::vector<int> active;

    static StatsProblem make(const LeafEnvStats& s, std::span<const double> offsets,
                             std::span<const double> frozen) {
        StatsProblem pb;
        pb.stats = &s;
        pb.offsets = offsets;
        pb.frozen = frozen;
        for (int e = 0; e < s.n_envs; ++e)
            if (s.env_rows[e] > 0.0) pb.active.push_back(e);
        return pb;
    }

    int n_coords() const { return stats->n_leaves; }

    void risks(std::span<const double> theta, std::span<double> out) const {
        const auto& s = *stats;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const int e = active[a];
            double num = frozen.empty() ? 0.0 : frozen[e];
            const std::size_t base = s.idx(e, 0);
            for (int t = 0; t < s.n_leaves; ++t) {
                const double d = s.mean[base + t] - theta[t];
                num += s.ssd[base + t] + s.count[base + t] * d * d;
            }
            out[a] = num / s.env_rows[e] - offsets[e];
        }
    }

    void weighted_grad(std::span<const double> theta, std::span<const double> p_active,
                       std::span<double> grad) const {
        std::fill(grad.begin(), grad.end(), 0.0);
        const auto& s = *stats;
        for (std::size_t a = 0; a < active.size(); ++a) {
            if (p_active[a] == 0.0) continue;
            const int e = active[a];
            const double scale = 2.0 * p_active[a] / s.env_rows[e];
            const std::size_t base = s.idx(e, 0);
            for (int t = 0; t < s.n_leaves; ++t)
                grad[t] += scale * s.count[base + t] * (theta[t] - s.mean[base + t]);
        }
    }
};

struct EgOutcome {
    std::vector<double> theta;
    double z = std::numeric_limits<double>::infinity();
    std::vector<double> p_active;
    int iterations = 0;
    bool converged = false;
    // raw final iterates, for continuation by an outer loop (the best point
    // above is what a caller should report)
    std::vector<double> theta_last;
    std::vector<double> p_last;
};

inline double max_of(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    return m;
}

/// Projected extragradient with best-so-far tracking, seeded at theta0 so the
/// result can never be worse than the initialization. Has a closed-form
/// shortcut when only one environment has rows.
inline EgOutcome eg_core(const StatsProblem& pb, std::span<const double> theta0,
                         const SolverConfig& cfg, std::span<const double> p0 = {}) {
    const int T = pb.n_coords();
    const int Ka = static_cast<int>(pb.active.size());
    if (Ka == 0) throw DataError("solver: every environment is empty");

    EgOutcome out;
    out.theta.assign(theta0.begin(), theta0.end());
    out.p_active.assign(Ka, 1.0 / Ka);
    if (static_cast<int>(p0.size()) == Ka)
        out.p_active = project_simplex(p0);

    if (Ka == 1) {
        const auto& s = *pb.stats;
        const std::size_t base = s.idx(pb.active[0], 0);
        for (int t = 0; t < T; ++t)
            if (s.count[base + t] > 0.0) out.theta[t] = s.mean[base + t];
        double r;
        pb.risks(out.theta, std::span<double>(&r, 1));
        out.z = r;
        out.converged = true;
        return out;
    }

    std::vector<double> theta(theta0.begin(), theta0.end());
    std::vector<double> p = out.p_active;
    std::vector<double> r_cur(Ka), r_half(Ka), r_next(Ka), p_arg(Ka);
    std::vector<double> grad(T), theta_half(T), theta_next(T);
    std::vector<double> theta_sum(T, 0.0);

    pb.risks(theta, r_cur);
    out.z = max_of(r_cur);
    if (!std::isfinite(out.z))
        throw SolverError("extragradient: non-finite risk at the initial point");

    int no_improve = 0;
    for (int j = 0; j < cfg.t_max; ++j) {
        ++out.iterations;

        // Half step from (theta^j, p^j).
        pb.weighted_grad(theta, p, grad);
        for (int t = 0; t < T; ++t) theta_half[t] = theta[t] - cfg.gamma * grad[t];
        for (int a = 0; a < Ka; ++a) p_arg[a] = p[a] + cfg.gamma * r_cur[a];
        std::vector<double> p_half = project_simplex(p_arg);

        // Full step, evaluated at the half point; both p-updates start from p^j.
        pb.risks(theta_half, r_half);
        pb.weighted_grad(theta_half, p_half, grad);
        for (int t = 0; t < T; ++t) theta_next[t] = theta[t] - cfg.gamma * grad[t];
        for (int a = 0; a < Ka; ++a) p_arg[a] = p[a] + cfg.gamma * r_half[a];
        std::vector<double> p_next = project_simplex(p_arg);

        pb.risks(theta_next, r_next);
        const double l_next = max_of(r_next);
        if (!std::isfinite(l_next))
            throw SolverError("extragradient: non-finite risk (diverged at iteration " +
                              std::to_string(j + 1) + ")");

        if (l_next < out.z - cfg.delta) {
            out.z = l_next;
            out.theta = theta_next;
            out.p_active = p_next;
            no_improve = 0;
        } else {
            ++no_improve;
        }

        for (int t = 0; t < T; ++t) theta_sum[t] += theta_half[t];
        theta = theta_next;
        p = std::move(p_next);
        std::swap(r_cur, r_next);

        if (no_improve >= cfg.patience) {
            out.converged = true;
            break;
        }
    }
    out.theta_last = theta;
    out.p_last = std::move(p);

    // The running average of the half iterates carries the classic O(1/T)
    // saddle-point guarantee even when the last iterate orbits; keep it when
    // it beats the best observed point.
    if (out.iterations > 0) {
        for (int t = 0; t < T; ++t) theta_sum[t] /= out.iterations;
        pb.risks(theta_sum, r_cur);
        const double l_avg = max_of(r_cur);
        if (std::isfinite(l_avg) && l_avg < out.z) {
            out.z = l_avg;
            out.theta = std::move(theta_sum);
            out.p_active = out.p_last;
        }
    }
    return out;
}

/// Expand dual weights over active environments back to full length K.
inline std::vector<double> expand_p(const std::vector<int>& active,
                                    std::span<const double> p_active, int n_envs) {
    std::vector<double> p(n_envs, 0.0);
    for (std::size_t a = 0; a < active.size(); ++a) p[active[a]] = p_active[a];
    return p;
}

}  // namespace detail

// ============================================================================
// Leaf-value solvers
// ============================================================================

inline SolverResult extragradient_posthoc(std::span<const double> theta0,
                                          const LeafEnvStats& stats, const RiskSpec& spec,
                                          const SolverConfig& cfg) {
    cfg.validate();
    spec.validate(stats.n_envs);
    if (static_cast<int>(theta0.size()) != stats.n_leaves)
        throw ConfigError("solver: starting point length must equal the leaf count");
    const auto pb = detail::StatsProblem::make(stats, spec.offsets, {});
    auto res = detail::eg_core(pb, theta0, cfg);
    SolverResult out;
    out.theta = std::move(res.theta);
    out.z = res.z;
    out.p = detail::expand_p(pb.active, res.p_active, stats.n_envs);
    out.iterations = res.iterations;
    out.converged = res.converged;
    return out;
}

/// Cyclic block-coordinate descent: iteration j re-solves block (j mod B)
/// with every other leaf frozen at its current value, via the restricted
/// extragradient (same gamma and delta, inner budget of 50 iterations).
inline SolverResult bcd_posthoc(std::span<const double> theta0, const LeafEnvStats& stats,
                                const RiskSpec& spec, const SolverConfig& cfg) {
    cfg.validate();
    spec.validate(stats.n_envs);
    if (static_cast<int>(theta0.size()) != stats.n_leaves)
        throw ConfigError("solver: starting point length must equal the leaf count");
    const int T = stats.n_leaves;
    const int bs = std::min<int>(cfg.block_size, T);
    const int n_blocks = (T + bs - 1) / bs;

    SolverConfig inner = cfg;
    inner.method = SolverMethod::Eg;
    inner.t_max = 50;
    // Keep the stock inner patience unless the caller asks for a more
    // patient run (extragradient iterates are not monotone, so accuracy-
    // seeking configurations must not truncate the inner crawl).
    inner.patience = std::max(SolverConfig{}.patience, cfg.patience);

    std::vector<double> theta(theta0.begin(), theta0.end());
    SolverResult out;
    out.theta = theta;
    {
        const RiskValue init = max_empirical_risk(theta, stats, spec);
        out.z = init.z;
    }
    out.p.assign(stats.n_envs, 0.0);
    {
        const int ka = stats.nonempty_env_count();
        for (int e = 0; e < stats.n_envs; ++e)
            if (stats.env_rows[e] > 0.0) out.p[e] = 1.0 / ka;
    }

    std::vector<double> frozen(stats.n_envs);
    std::vector<double> p_carry;  ///< dual continuation across block solves
    int no_improve = 0;
    for (int j = 0; j < cfg.t_max; ++j) {
        ++out.iterations;
        const int lo = (j % n_blocks) * bs;
        const int hi = std::min(lo + bs, T);
        const int width = hi - lo;

        LeafEnvStats block(stats.n_envs, width);
        for (int e = 0; e < stats.n_envs; ++e) {
            double extra = 0.0;
            const std::size_t base = stats.idx(e, 0);
            for (int t = 0; t < T; ++t) {
                if (t >= lo && t < hi) {
                    const std::size_t bi = block.idx(e, t - lo);
                    block.count[bi] = stats.count[base + t];
                    block.mean[bi] = stats.mean[base + t];
                    block.ssd[bi] = stats.ssd[base + t];
                } else {
                    const double d = stats.mean[base + t] - theta[t];
                    extra += stats.ssd[base + t] + stats.count[base + t] * d * d;
                }
            }
            block.env_rows[e] = stats.env_rows[e];
            frozen[e] = extra;
        }

        const auto pb = detail::StatsProblem::make(block, spec.offsets, frozen);
        const std::span<const double> theta_block(theta.data() + lo, width);
        const auto res = detail::eg_core(pb, theta_block, inner, p_carry);
        const double z_new = res.z;  // frozen terms included: full objective

        if (z_new < out.z - cfg.delta)
            no_improve = 0;
        else
            ++no_improve;
        if (z_new < out.z) {
            // composite of the block's best iterate with the other blocks'
            // current values; z_new is exact for this vector
            out.theta = theta;
            std::copy(res.theta.begin(), res.theta.end(), out.theta.begin() + lo);
            out.z = z_new;
            out.p = detail::expand_p(pb.active, res.p_active, stats.n_envs);
        }
        // continuation state: the raw final iterates, so successive cycles
        // extend the extragradient trajectory instead of replaying it
        std::copy(res.theta_last.begin(), res.theta_last.end(), theta.begin() + lo);
        p_carry = res.p_last;  // the active set is shared by every block

        if (no_improve >= cfg.patience) {
            out.converged = true;
            break;
        }
    }
    return out;
}

/// Dispatch on cfg.method for whole-tree leaf-value solves.
inline SolverResult solve_leaf_values(std::span<const double> theta0, const LeafEnvStats& stats,
                                      const RiskSpec& spec, const SolverConfig& cfg) {
    switch (cfg.method) {
        case SolverMethod::Eg: return extragradient_posthoc(theta0, stats, spec, cfg);
        case SolverMethod::Bcd: return bcd_posthoc(theta0, stats, spec, cfg);
        case SolverMethod::Kkt:
            throw ConfigError(
                "solver: kkt solves two-value split subproblems; use eg or bcd for leaf-value "
                "solves");
    }
    throw ConfigError("solver: unknown method");
}

// ============================================================================
// Split subproblem: two leaf values, everything else frozen
// ============================================================================

struct SplitSubproblem {
    std::vector<double> n_left, mu_left, ssd_left;
    std::vector<double> n_right, mu_right, ssd_right;
    std::vector<double> frozen;    ///< per-env numerator from the other leaves
    std::vector<double> env_rows;  ///< full per-env totals n_e
    std::vector<double> offsets;   ///< c_e
    double init_left = 0.0;        ///< used when a side has no rows of any active env
    double init_right = 0.0;

    int n_envs() const { return static_cast<int>(env_rows.size()); }

    double risk(int e, double tl, double tr) const {
        const double dl = tl - mu_left[e], dr = tr - mu_right[e];
        return (frozen[e] + ssd_left[e] + n_left[e] * dl * dl + ssd_right[e] +
                n_right[e] * dr * dr) /
                   env_rows[e] -
               offsets[e];
    }
};

struct LocalSolveResult {
    double theta_left = 0.0;
    double theta_right = 0.0;
    double z = std::numeric_limits<double>::infinity();
    bool fallback = false;  ///< extragradient fallback was used
};

/// Two-variable extragradient on a split subproblem (used for K > 3 and as
/// the KKT fallback).
inline LocalSolveResult eg_local_solve(const SplitSubproblem& pb, const SolverConfig& cfg) {
    const int K = pb.n_envs();
    LeafEnvStats s(K, 2);
    for (int e = 0; e < K; ++e) {
        s.count[s.idx(e, 0)] = pb.n_left[e];
        s.mean[s.idx(e, 0)] = pb.mu_left[e];
        s.ssd[s.idx(e, 0)] = pb.ssd_left[e];
        s.count[s.idx(e, 1)] = pb.n_right[e];
        s.mean[s.idx(e, 1)] = pb.mu_right[e];
        s.ssd[s.idx(e, 1)] = pb.ssd_right[e];
        s.env_rows[e] = pb.env_rows[e];
    }
    const auto prob = detail::StatsProblem::make(s, pb.offsets, pb.frozen);
    const std::array<double, 2> theta0{pb.init_left, pb.init_right};
    const auto res = detail::eg_core(prob, theta0, cfg);
    return LocalSolveResult{res.theta[0], res.theta[1], res.z, false};
}

namespace detail {

/// Weighted-mean child values for dual weights lambda over the set `envs`.
/// Sides untouched by every weighted environment keep the init values.
inline void split_theta_at(const SplitSubproblem& pb, std::span<const int> envs,
                           std::span<const double> lambda, double* tl, double* tr) {
    double nl = 0.0, dl = 0.0, nr = 0.0, dr = 0.0;
    for (std::size_t s = 0; s < envs.size(); ++s) {
        const int e = envs[s];
        const double al = lambda[s] * pb.n_left[e] / pb.env_rows[e];
        const double ar = lambda[s] * pb.n_right[e] / pb.env_rows[e];
        nl += al * pb.mu_left[e];
        dl += al;
        nr += ar * pb.mu_right[e];
        dr += ar;
    }
    *tl = dl > 0.0 ? nl / dl : pb.init_left;
    *tr = dr > 0.0 ? nr / dr : pb.init_right;
}

/// Best value for one side when the candidate's active set never touches it:
/// the exact 1-D minimax over the environments that do, with the other side
/// held fixed. Falls back to `init` when no environment touches the side.
inline double complete_slack_side(const SplitSubproblem& pb, std::span<const int> envs,
                                  bool left_side, double other_value, double init) {
    // risk(e) as a function of t on this side: a (t - m)^2 + k
    std::vector<double> a, m, k;
    for (int e : envs) {
        const double n_side = left_side ? pb.n_left[e] : pb.n_right[e];
        if (n_side <= 0.0) continue;
        const double mu_side = left_side ? pb.mu_left[e] : pb.mu_right[e];
        const double n_other = left_side ? pb.n_right[e] : pb.n_left[e];
        const double mu_other = left_side ? pb.mu_right[e] : pb.mu_left[e];
        const double d = other_value - mu_other;
        a.push_back(n_side / pb.env_rows[e]);
        m.push_back(mu_side);
        k.push_back((pb.frozen[e] + pb.ssd_left[e] + pb.ssd_right[e] + n_other * d * d) /
                        pb.env_rows[e] -
                    pb.offsets[e]);
    }
    const std::size_t q = a.size();
    if (q == 0) return init;

    const auto value = [&](double t) {
        double worst = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < q; ++i) {
            const double d = t - m[i];
            worst = std::max(worst, a[i] * d * d + k[i]);
        }
        return worst;
    };
    double best_t = m[0];
    double best_v = value(best_t);
    const auto consider = [&](double t) {
        const double v = value(t);
        if (v < best_v) {
            best_v = v;
            best_t = t;
        }
    };
    for (std::size_t i = 1; i < q; ++i) consider(m[i]);
    // equality roots of each parabola pair
    for (std::size_t i = 0; i < q; ++i)
        for (std::size_t j = i + 1; j < q; ++j) {
            const double qa = a[i] - a[j];
            const double qb = -2.0 * (a[i] * m[i] - a[j] * m[j]);
            const double qc = a[i] * m[i] * m[i] - a[j] * m[j] * m[j] + k[i] - k[j];
            if (std::abs(qa) < 1e-14) {
                if (std::abs(qb) > 1e-14) consider(-qc / qb);
                continue;
            }
            const double disc = qb * qb - 4.0 * qa * qc;
            if (disc < 0.0) continue;
            const double root = std::sqrt(disc);
            consider((-qb + root) / (2.0 * qa));
            consider((-qb - root) / (2.0 * qa));
        }
    return best_t;
}

}  // namespace detail

/// Exact solve of min_(tl,tr) max_e risk by KKT enumeration over active sets
/// of size <= 3, with certified short-circuits and an extragradient fallback
/// when no enumerated candidate is provably optimal.
inline LocalSolveResult kkt_local_solve(const SplitSubproblem& pb,
                                        const SolverConfig& fallback_cfg) {
    const int K = pb.n_envs();
    std::vector<int> varying;  // environments whose risk depends on (tl, tr)
    double const_risk = -std::numeric_limits<double>::infinity();
    bool any_env = false;
    for (int e = 0; e < K; ++e) {
        if (pb.env_rows[e] <= 0.0) continue;
        any_env = true;
        if (pb.n_left[e] + pb.n_right[e] > 0.0)
            varying.push_back(e);
        else
            const_risk = std::max(const_risk, pb.risk(e, 0.0, 0.0));
    }
    if (!any_env) throw DataError("split solve: every environment is empty");
    if (varying.empty())
        return LocalSolveResult{pb.init_left, pb.init_right, const_risk, false};

    const auto total_z = [&](double tl, double tr) {
        double z = const_risk;
        for (int e : varying) z = std::max(z, pb.risk(e, tl, tr));
        return z;
    };
    const auto tie_tol = [](double z) { return kArgmaxTieTol * std::max(1.0, std::abs(z)); };

    LocalSolveResult best;

    // |S| = 1: an environment's unconstrained minimum; a side the
    // environment never touches is completed by the exact one-dimensional
    // minimax over the environments that do. Certified optimal when the
    // candidate already dominates every other environment.
    for (int e : varying) {
        double tl = pb.n_left[e] > 0.0 ? pb.mu_left[e] : pb.init_left;
        double tr = pb.n_right[e] > 0.0 ? pb.mu_right[e] : pb.init_right;
        if (pb.n_left[e] <= 0.0)
            tl = detail::complete_slack_side(pb, varying, true, tr, pb.init_left);
        else if (pb.n_right[e] <= 0.0)
            tr = detail::complete_slack_side(pb, varying, false, tl, pb.init_right);
        const double z = total_z(tl, tr);
        if (z < best.z) best = LocalSolveResult{tl, tr, z, false};
        if (z <= pb.risk(e, tl, tr) + tie_tol(z)) return LocalSolveResult{tl, tr, z, false};
    }

    // |S| = 2: risk-equality root along the weighted-means curve. The risk
    // difference is monotone in lambda, so a sign change brackets the root.
    const int nv = static_cast<int>(varying.size());
    for (int a = 0; a < nv; ++a) {
        for (int b = a + 1; b < nv; ++b) {
            const std::array<int, 2> envs{varying[a], varying[b]};
            const auto diff = [&](double lam) {
                const std::array<double, 2> w{lam, 1.0 - lam};
                double tl, tr;
                detail::split_theta_at(pb, envs, w, &tl, &tr);
                return pb.risk(envs[0], tl, tr) - pb.risk(envs[1], tl, tr);
            };
            double lo = 0.0, hi = 1.0;
            double flo = diff(lo), fhi = diff(hi);
            if (!(flo > 0.0 && fhi < 0.0) && !(flo < 0.0 && fhi > 0.0)) continue;
            for (int it = 0; it < 100; ++it) {
                const double mid = 0.5 * (lo + hi);
                const double fm = diff(mid);
                if ((fm > 0.0) == (flo > 0.0)) {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                    fhi = fm;
                }
            }
            const double lam = 0.5 * (lo + hi);
            const std::array<double, 2> w{lam, 1.0 - lam};
            double tl, tr;
            detail::split_theta_at(pb, envs, w, &tl, &tr);
            // a side neither pair member touches is free: complete it with
            // the 1-D minimax over the remaining environments
            if (pb.n_left[envs[0]] + pb.n_left[envs[1]] <= 0.0)
                tl = detail::complete_slack_side(pb, varying, true, tr, pb.init_left);
            if (pb.n_right[envs[0]] + pb.n_right[envs[1]] <= 0.0)
                tr = detail::complete_slack_side(pb, varying, false, tl, pb.init_right);
            const double z = total_z(tl, tr);
            if (z < best.z) best = LocalSolveResult{tl, tr, z, false};
            const double pair_risk = pb.risk(envs[0], tl, tr);
            if (z <= pair_risk + tie_tol(z)) return LocalSolveResult{tl, tr, z, false};
        }
    }

    // |S| = 3: two risk equalities solved by damped Newton in the first two
    // dual weights (the third is 1 - a - b), analytic Jacobian, multi-start.
    bool certified = false;
    for (int a = 0; a < nv && !certified; ++a) {
        for (int b = a + 1; b < nv && !certified; ++b) {
            for (int c = b + 1; c < nv && !certified; ++c) {
                const std::array<int, 3> envs{varying[a], varying[b], varying[c]};
                const auto eval = [&](double la, double lb, std::array<double, 2>* F,
                                      std::array<double, 4>* J, double* tl_out,
                                      double* tr_out) {
                    const std::array<double, 3> w{la, lb, 1.0 - la - lb};
                    // theta and its partial derivatives w.r.t. (la, lb)
                    double nl = 0, dl = 0, nr = 0, dr = 0;
                    std::array<double, 3> al, ar;
                    for (int s = 0; s < 3; ++s) {
                        const int e = envs[s];
                        al[s] = pb.n_left[e] / pb.env_rows[e];
                        ar[s] = pb.n_right[e] / pb.env_rows[e];
                        nl += w[s] * al[s] * pb.mu_left[e];
                        dl += w[s] * al[s];
                        nr += w[s] * ar[s] * pb.mu_right[e];
                        dr += w[s] * ar[s];
                    }
                    const bool l_ok = dl > 1e-300, r_ok = dr > 1e-300;
                    const double tl = l_ok ? nl / dl : pb.init_left;
                    const double tr = r_ok ? nr / dr : pb.init_right;
                    *tl_out = tl;
                    *tr_out = tr;
                    // d theta / d la uses dw = (1, 0, -1); d/d lb uses (0, 1, -1)
                    double dtl[2] = {0, 0}, dtr[2] = {0, 0};
                    for (int v = 0; v < 2; ++v) {
                        const int s_pos = v == 0 ? 0 : 1;
                        const double dnl =
                            al[s_pos] * pb.mu_left[envs[s_pos]] - al[2] * pb.mu_left[envs[2]];
                        const double ddl = al[s_pos] - al[2];
                        const double dnr =
                            ar[s_pos] * pb.mu_right[envs[s_pos]] - ar[2] * pb.mu_right[envs[2]];
                        const double ddr = ar[s_pos] - ar[2];
                        if (l_ok) dtl[v] = (dnl - tl * ddl) / dl;
                        if (r_ok) dtr[v] = (dnr - tr * ddr) / dr;
                    }
                    std::array<double, 3> risk, dra, drb;
                    for (int s = 0; s < 3; ++s) {
                        const int e = envs[s];
                        risk[s] = pb.risk(e, tl, tr);
                        const double gl = 2.0 * pb.n_left[e] * (tl - pb.mu_left[e]) /
                                          pb.env_rows[e];
                        const double gr = 2.0 * pb.n_right[e] * (tr - pb.mu_right[e]) /
                                          pb.env_rows[e];
                        dra[s] = gl * dtl[0] + gr * dtr[0];
                        drb[s] = gl * dtl[1] + gr * dtr[1];
                    }
                    (*F)[0] = risk[0] - risk[2];
                    (*F)[1] = risk[1] - risk[2];
                    (*J)[0] = dra[0] - dra[2];
                    (*J)[1] = drb[0] - drb[2];
                    (*J)[2] = dra[1] - dra[2];
                    (*J)[3] = drb[1] - drb[2];
                    return std::max(std::abs((*F)[0]), std::abs((*F)[1]));
                };

                constexpr std::array<std::array<double, 2>, 7> starts{{{1.0 / 3, 1.0 / 3},
                                                                       {0.5, 0.25},
                                                                       {0.25, 0.5},
                                                                       {0.25, 0.25},
                                                                       {0.6, 0.2},
                                                                       {0.2, 0.6},
                                                                       {0.1, 0.1}}};
                for (const auto& start : starts) {
                    double la = start[0], lb = start[1];
                    std::array<double, 2> F;
                    std::array<double, 4> J;
                    double tl = 0, tr = 0;
                    double res = eval(la, lb, &F, &J, &tl, &tr);
                    const double res_tol = 1e-10 * std::max(1.0, std::abs(pb.risk(envs[2], tl, tr)));
                    bool ok = res <= res_tol;
                    for (int it = 0; it < 60 && !ok; ++it) {
                        const double det = J[0] * J[3] - J[1] * J[2];
                        if (std::abs(det) < 1e-300) break;
                        const double da = (F[0] * J[3] - F[1] * J[1]) / det;
                        const double db = (J[0] * F[1] - J[2] * F[0]) / det;
                        double step = 1.0;
                        bool moved = false;
                        for (int h = 0; h < 25; ++h, step *= 0.5) {
                            double na = la - step * da, nb = lb - step * db;
                            na = std::clamp(na, 0.0, 1.0);
                            nb = std::clamp(nb, 0.0, 1.0);
                            if (na + nb > 1.0) {
                                const double s = na + nb;
                                na /= s;
                                nb /= s;
                            }
                            std::array<double, 2> Fn;
                            std::array<double, 4> Jn;
                            double ntl, ntr;
                            const double rn = eval(na, nb, &Fn, &Jn, &ntl, &ntr);
                            if (rn < res) {
                                la = na, lb = nb, F = Fn, J = Jn, tl = ntl, tr = ntr, res = rn;
                                moved = true;
                                break;
                            }
                        }
                        if (!moved) break;
                        ok = res <= res_tol;
                    }
                    if (!ok) continue;
                    const double lc = 1.0 - la - lb;
                    if (la < -1e-9 || lb < -1e-9 || lc < -1e-9) continue;
                    if (pb.n_left[envs[0]] + pb.n_left[envs[1]] + pb.n_left[envs[2]] <= 0.0)
                        tl = detail::complete_slack_side(pb, varying, true, tr, pb.init_left);
                    if (pb.n_right[envs[0]] + pb.n_right[envs[1]] + pb.n_right[envs[2]] <=
                        0.0)
                        tr = detail::complete_slack_side(pb, varying, false, tl,
                                                         pb.init_right);
                    const double z = total_z(tl, tr);
                    if (z < best.z) best = LocalSolveResult{tl, tr, z, false};
                    if (z <= pb.risk(envs[2], tl, tr) + tie_tol(z) && la > 1e-12 &&
                        lb > 1e-12 && lc > 1e-12) {
                        best = LocalSolveResult{tl, tr, z, false};
                        certified = true;
                        break;
                    }
                }
            }
        }
    }
    if (certified) return best;

    // Nothing certified: polish with the two-variable extragradient and keep
    // whichever is better; flag if the fallback actually won.
    auto eg = eg_local_solve(pb, fallback_cfg);
    if (eg.z < best.z) {
        log_debug("kkt_local_solve: extragradient fallback improved the enumerated candidates");
        eg.fallback = true;
        return eg;
    }
    return best;
}

// ============================================================================
// Tree-weight solver
// ============================================================================

struct WeightsResult {
    std::vector<double> weights;
    double z = std::numeric_limits<double>::infinity();
    std::vector<double> p;
    int iterations = 0;
    bool converged = false;
};

/// min over convex tree weights of the worst-case holdout risk, by projected
/// extragradient on (w, p). The w-step is gamma rescaled by an estimate of
/// the gradient's Lipschitz constant so the effective step matches the
/// leaf-value solver's (whose Hessian is bounded by 2).
inline WeightsResult extragradient_weights(std::span<const double> tree_preds, int n_trees,
                                           const EnvDataset& holdout, const RiskSpec& spec,
                                           const SolverConfig& cfg) {
    cfg.validate();
    spec.validate(holdout.n_envs);
    const std::int64_t n = holdout.size();
    if (n_trees < 1) throw ConfigError("weights: tree count must be >= 1");
    if (static_cast<std::int64_t>(tree_preds.size()) != static_cast<std::int64_t>(n_trees) * n)
        throw ConfigError("weights: prediction matrix size mismatch");
    for (int e = 0; e < holdout.n_envs; ++e)
        if (holdout.env_counts[e] == 0)
            throw DataError("weights: holdout is missing environment " + std::to_string(e));

    const int B = n_trees;
    const int K = holdout.n_envs;
    WeightsResult out;
    out.weights.assign(B, 1.0 / B);
    out.p.assign(K, 1.0 / K);

    const auto pred_of = [&](std::span<const double> w, std::span<double> pred) {
        std::fill(pred.begin(), pred.end(), 0.0);
        for (int b = 0; b < B; ++b) {
            const double wb = w[b];
            if (wb == 0.0) continue;
            const double* pb = tree_preds.data() + static_cast<std::int64_t>(b) * n;
            for (std::int64_t i = 0; i < n; ++i) pred[i] += wb * pb[i];
        }
    };
    const auto risks_of = [&](std::span<const double> pred, std::span<double> r) {
        std::fill(r.begin(), r.end(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = pred[i] - holdout.y[i];
            r[holdout.env[i]] += d * d;
        }
        for (int e = 0; e < K; ++e)
            r[e] = r[e] / static_cast<double>(holdout.env_counts[e]) - spec.offsets[e];
    };
    const auto grad_of = [&](std::span<const double> pred, std::span<const double> p,
                             std::span<double> g, std::span<double> scratch) {
        for (std::int64_t i = 0; i < n; ++i)
            scratch[i] = 2.0 * p[holdout.env[i]] / static_cast<double>(holdout.env_counts[holdout.env[i]]) *
                         (pred[i] - holdout.y[i]);
        for (int b = 0; b < B; ++b) {
            const double* pb = tree_preds.data() + static_cast<std::int64_t>(b) * n;
            double acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i) acc += pb[i] * scratch[i];
            g[b] = acc;
        }
    };

    if (B == 1) {
        std::vector<double> pred(n), r(K);
        pred_of(out.weights, pred);
        risks_of(pred, r);
        out.z = detail::max_of(r);
        out.converged = true;
        return out;
    }

    // Lipschitz estimate: max over environments of the top eigenvalue of
    // (2/n_e) P_e P_e^T via a few power iterations.
    double lipschitz = 0.0;
    {
        std::vector<double> v(B), u(n);
        for (int e = 0; e < K; ++e) {
            std::fill(v.begin(), v.end(), 1.0 / std::sqrt(static_cast<double>(B)));
            double lam = 0.0;
            for (int it = 0; it < 8; ++it) {
                std::fill(u.begin(), u.end(), 0.0);
                for (int b = 0; b < B; ++b) {
                    const double* pb = tree_preds.data() + static_cast<std::int64_t>(b) * n;
                    for (std::int64_t i = 0; i < n; ++i)
                        if (holdout.env[i] == e) u[i] += v[b] * pb[i];
                }
                double norm_sq = 0.0;
                for (int b = 0; b < B; ++b) {
                    const double* pb = tree_preds.data() + static_cast<std::int64_t>(b) * n;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < n; ++i)
                        if (holdout.env[i] == e) acc += pb[i] * u[i];
                    v[b] = 2.0 * acc / static_cast<double>(holdout.env_counts[e]);
                    norm_sq += v[b] * v[b];
                }
                lam = std::sqrt(norm_sq);
                if (lam <= 0.0) break;
                for (double& x : v) x /= lam;
            }
            lipschitz = std::max(lipschitz, lam);
        }
    }
    const double gamma_w = 2.0 * cfg.gamma / std::max(lipschitz, 1e-12);

    std::vector<double> w = out.weights, p = out.p;
    std::vector<double> pred(n), pred_tmp(n), scratch(n);
    std::vector<double> r_cur(K), r_half(K), r_next(K), g(B), arg(B);

    pred_of(w, pred);
    risks_of(pred, r_cur);
    out.z = detail::max_of(r_cur);
    if (!std::isfinite(out.z)) throw SolverError("weights: non-finite risk at uniform weights");

    int no_improve = 0;
    for (int j = 0; j < cfg.t_max; ++j) {
        ++out.iterations;

        grad_of(pred, p, g, scratch);
        for (int b = 0; b < B; ++b) arg[b] = w[b] - gamma_w * g[b];
        std::vector<double> w_half = project_simplex(arg);
        std::vector<double> p_arg(K);
        for (int e = 0; e < K; ++e) p_arg[e] = p[e] + cfg.gamma * r_cur[e];
        std::vector<double> p_half = project_simplex(p_arg);

        pred_of(w_half, pred_tmp);
        risks_of(pred_tmp, r_half);
        grad_of(pred_tmp, p_half, g, scratch);
        for (int b = 0; b < B; ++b) arg[b] = w[b] - gamma_w * g[b];
        std::vector<double> w_next = project_simplex(arg);
        for (int e = 0; e < K; ++e) p_arg[e] = p[e] + cfg.gamma * r_half[e];
        std::vector<double> p_next = project_simplex(p_arg);

        pred_of(w_next, pred);
        risks_of(pred, r_next);
        const double l_next = detail::max_of(r_next);
        if (!std::isfinite(l_next))
            throw SolverError("weights: non-finite risk (diverged at iteration " +
                              std::to_string(j + 1) + ")");

        if (l_next < out.z - cfg.delta) {
            out.z = l_next;
            out.weights = w_next;
            out.p = p_next;
            no_improve = 0;
        } else {
            ++no_improve;
        }
        w = std::move(w_next);
        p = std::move(p_next);
        std::swap(r_cur, r_next);
        if (no_improve >= cfg.patience) {
            out.converged = true;
            break;
        }
    }
    return out;
}

}  // namespace maxrm
