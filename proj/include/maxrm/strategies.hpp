#pragma once

// Worst-case-risk forest construction strategies.
//
//   Posthoc        CART partitions, leaf values re-solved per tree.
//   Local          growth guided by per-split two-value solves with all
//                  other leaves frozen (KKT when at most 3 environments
//                  have rows, otherwise two-variable extragradient).
//   Global         depth-first growth; every candidate split is scored by
//                  re-solving all leaf values jointly, warm-started from the
//                  previous solution with the children at the parent value.
//   GlobalNonDfs   like Global, but each round scores every (region, split)
//                  pair across the whole partition and executes the best.
//   WeightsOnly    plain CART trees; only the tree weights are optimized.
//
// Any strategy can append the reweighting step: trees are then fit on an
// environment-stratified 70% of the data and convex tree weights minimize
// the worst-case risk on the held-out 30%.
//
// All per-tree solves run on the tree's bootstrap sample; risk offsets are
// environment constants computed upstream on the original sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maxrm/cart.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/minimax.hpp"
#include "maxrm/parallel.hpp"
#include "maxrm/risk.hpp"
#include "maxrm/rng.hpp"

namespace maxrm {

// ============================================================================
// Strategy specification
// ============================================================================

enum class StrategyKind { Posthoc, Local, Global, GlobalNonDfs, WeightsOnly };

struct StrategySpec {
    StrategyKind kind = StrategyKind::Posthoc;
    bool reweight = false;
    double holdout_fraction = 0.3;  ///< used only when reweight

    void validate() const {
        if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
            throw ConfigError("strategy: holdout_fraction must lie in (0, 1)");
        if (kind == StrategyKind::WeightsOnly && !reweight)
            throw ConfigError("strategy: the weights strategy requires the reweighting step");
    }
};

inline std::string strategy_name(const StrategySpec& s) {
    std::string base;
    switch (s.kind) {
        case StrategyKind::Posthoc: base = "posthoc"; break;
        case StrategyKind::Local: base = "local"; break;
        case StrategyKind::Global: base = "global"; break;
        case StrategyKind::GlobalNonDfs: base = "global-nondfs"; break;
        case StrategyKind::WeightsOnly: return "weights";
    }
    return s.reweight ? base + "-w" : base;
}

inline StrategySpec parse_strategy(const std::string& name) {
    StrategySpec s;
    std::string base = name;
    if (base.size() > 2 && base.ends_with("-w")) {
        s.reweight = true;
        base.resize(base.size() - 2);
    }
    if (base == "posthoc") s.kind = StrategyKind::Posthoc;
    else if (base == "local") s.kind = StrategyKind::Local;
    else if (base == "global") s.kind = StrategyKind::Global;
    else if (base == "global-nondfs") s.kind = StrategyKind::GlobalNonDfs;
    else if (base == "weights") {
        s.kind = StrategyKind::WeightsOnly;
        s.reweight = true;
    } else {
        throw ConfigError("unknown strategy '" + name +
                          "' (expected posthoc|local|global|global-nondfs|weights, optionally "
                          "with -w)");
    }
    return s;
}

// ============================================================================
// Per-tree operations
// ============================================================================

/// Replace a tree's leaf values by the worst-case-risk solution on its cached
/// bootstrap statistics, initialized at the current (RF-mean) values.
inline SolverResult posthoc_adjust(Tree* tree, const RiskSpec& spec, const SolverConfig& cfg) {
    SolverResult res = solve_leaf_values(tree->leaf_values, tree->stats, spec, cfg);
    tree->leaf_values = res.theta;
    return res;
}

namespace detail {

/// Moments of one stats column, for prefix/complement splitting.
inline MeanVarAcc column_acc(const LeafEnvStats& s, int e, int t) {
    MeanVarAcc a;
    const std::size_t i = s.idx(e, t);
    a.n = s.count[i];
    a.mean = s.mean[i];
    a.m2 = s.ssd[i];
    return a;
}

/// Exact per-(env, leaf) statistics for a grown tree, recomputed by routing
/// the fit sample (replaces incremental sweep accumulations).
inline void rebuild_stats(Tree* tree, const EnvDataset& ds) {
    const LeafAssignment assign = leaf_assignment(*tree, ds);
    tree->stats = collect_leaf_env_stats(ds, assign.leaf_of_row, tree->n_leaves());
}

}  // namespace detail

/// Depth-first growth where each candidate split optimizes only the two
/// child values (everything else frozen) and the split with the largest
/// worst-case-risk reduction is taken; growth stops when no candidate
/// strictly reduces the worst-case risk.
inline Tree grow_tree_local(const EnvDataset& ds, const RiskSpec& spec,
                            const TreeHyperparams& hp, const SolverConfig& solver,
                            double* claimed_risk = nullptr) {
    hp.validate(ds.p);
    spec.validate(ds.n_envs);
    const std::int64_t n = ds.size();
    const int K = ds.n_envs;
    const int m_try = hp.resolved_m_try(ds.p);

    int active_envs = 0;
    for (int e = 0; e < K; ++e) active_envs += ds.env_counts[e] > 0 ? 1 : 0;
    const bool use_kkt = active_envs <= 3;

    std::vector<std::int64_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0);

    Tree tree;
    tree.nodes.push_back(TreeNode{});

    // Running per-environment risk numerators over all current leaves.
    std::vector<double> contrib(K, 0.0);
    const auto own_numerators = [&](const std::vector<MeanVarAcc>& accs, double value,
                                    std::vector<double>* out) {
        out->assign(K, 0.0);
        for (int e = 0; e < K; ++e) {
            const double d = accs[e].mean - value;
            (*out)[e] = accs[e].m2 + accs[e].n * d * d;
        }
    };
    const auto max_risk_of = [&](const std::vector<double>& numer) {
        double z = -std::numeric_limits<double>::infinity();
        for (int e = 0; e < K; ++e)
            if (ds.env_counts[e] > 0)
                z = std::max(z, numer[e] / static_cast<double>(ds.env_counts[e]) -
                                    spec.offsets[e]);
        return z;
    };

    struct Frame {
        std::int64_t begin, end;
        int depth;
        std::int32_t node;
        double value;
    };

    const std::vector<MeanVarAcc> root_accs = per_env_stats(ds, rows);
    MeanVarAcc root_total;
    for (const auto& a : root_accs) {
        if (a.n == 0.0) continue;
        MeanVarAcc merged = root_total;  // merge via Chan's formula
        const double nn = merged.n + a.n;
        const double delta = a.mean - merged.mean;
        merged.mean = merged.n == 0.0 ? a.mean : merged.mean + delta * a.n / nn;
        merged.m2 += a.m2 + (merged.n == 0.0 ? 0.0 : delta * delta * merged.n * a.n / nn);
        merged.n = nn;
        root_total = merged;
    }
    own_numerators(root_accs, root_total.mean, &contrib);
    double z_cur = max_risk_of(contrib);

    std::vector<Frame> stack{{0, n, 0, 0, root_total.mean}};
    SplitScan scan;
    std::vector<double> own_num, scratch_num;
    SplitSubproblem pb;
    pb.n_left.resize(K);
    pb.mu_left.resize(K);
    pb.ssd_left.resize(K);
    pb.n_right.resize(K);
    pb.mu_right.resize(K);
    pb.ssd_right.resize(K);
    pb.frozen.resize(K);
    pb.env_rows.resize(K);
    pb.offsets.assign(spec.offsets.begin(), spec.offsets.end());
    for (int e = 0; e < K; ++e) pb.env_rows[e] = static_cast<double>(ds.env_counts[e]);

    while (!stack.empty()) {
        const Frame f = stack.back();
        stack.pop_back();
        const std::span<std::int64_t> node_rows(rows.data() + f.begin, f.end - f.begin);
        const std::int64_t node_n = f.end - f.begin;

        const std::vector<MeanVarAcc> own = per_env_stats(ds, node_rows);
        own_numerators(own, f.value, &own_num);
        for (int e = 0; e < K; ++e)
            pb.frozen[e] = std::max(contrib[e] - own_num[e], 0.0);
        pb.init_left = f.value;
        pb.init_right = f.value;

        struct Best {
            double z = std::numeric_limits<double>::infinity();
            int feature = -1;
            double threshold = 0.0;
            double theta_left = 0.0, theta_right = 0.0;
        } best;

        const bool depth_ok = hp.max_depth < 0 || f.depth < hp.max_depth;
        if (depth_ok && node_n >= 2 * hp.min_leaf_size) {
            Rng rng(derive_seed(hp.seed, kTagTreeGrowth, static_cast<std::uint64_t>(f.node)));
            for (int feature : sample_feature_subset(ds.p, m_try, rng)) {
                scan_feature(ds, node_rows, feature, hp.min_leaf_size, &scan);
                std::vector<MeanVarAcc> left(K);
                std::int64_t at = 0;
                for (const auto& cut : scan.cuts) {
                    while (at < cut.pos) {
                        const std::int64_t r = scan.order[at++];
                        left[ds.env[r]].add(ds.y[r]);
                    }
                    for (int e = 0; e < K; ++e) {
                        const MeanVarAcc right = MeanVarAcc::split_off(own[e], left[e]);
                        pb.n_left[e] = left[e].n;
                        pb.mu_left[e] = left[e].mean;
                        pb.ssd_left[e] = left[e].m2;
                        pb.n_right[e] = right.n;
                        pb.mu_right[e] = right.mean;
                        pb.ssd_right[e] = right.m2;
                    }
                    const LocalSolveResult res =
                        use_kkt ? kkt_local_solve(pb, solver) : eg_local_solve(pb, solver);
                    if (res.z < best.z) {
                        best.z = res.z;
                        best.feature = feature;
                        best.threshold = cut.threshold;
                        best.theta_left = res.theta_left;
                        best.theta_right = res.theta_right;
                    }
                }
            }
        }

        if (best.feature >= 0 && best.z < z_cur) {
            const std::int64_t n_left =
                partition_rows(ds, node_rows, best.feature, best.threshold);
            const auto left_id = static_cast<std::int32_t>(tree.nodes.size());
            const auto right_id = left_id + 1;
            {
                // Scoped: emplace_back below may reallocate and invalidate `node`.
                auto& node = tree.nodes[f.node];
                node.feature = best.feature;
                node.threshold = best.threshold;
                node.left = left_id;
                node.right = right_id;
            }
            tree.nodes.emplace_back();
            tree.nodes.emplace_back();

            const std::vector<MeanVarAcc> left_accs =
                per_env_stats(ds, node_rows.subspan(0, n_left));
            const std::vector<MeanVarAcc> right_accs =
                per_env_stats(ds, node_rows.subspan(n_left));
            own_numerators(left_accs, best.theta_left, &scratch_num);
            for (int e = 0; e < K; ++e) contrib[e] += scratch_num[e] - own_num[e];
            own_numerators(right_accs, best.theta_right, &scratch_num);
            for (int e = 0; e < K; ++e) contrib[e] += scratch_num[e];

            stack.push_back(
                {f.begin + n_left, f.end, f.depth + 1, right_id, best.theta_right});
            stack.push_back({f.begin, f.begin + n_left, f.depth + 1, left_id,
                             best.theta_left});
            z_cur = best.z;
        } else {
            auto& node = tree.nodes[f.node];
            node.leaf = static_cast<std::int32_t>(tree.leaf_values.size());
            tree.leaf_values.push_back(f.value);
        }
    }

    detail::rebuild_stats(&tree, ds);
    if (claimed_risk) *claimed_risk = z_cur;
    return tree;
}

/// Growth scored by whole-tree re-solves: every candidate split is evaluated
/// by re-optimizing all leaf values jointly (warm-started), and after each
/// accepted split the committed leaf values are that global solution. With
/// dfs = true nodes are expanded depth-first; otherwise every (region, split)
/// pair competes each round and the best one is executed.
inline Tree grow_tree_global(const EnvDataset& ds, const RiskSpec& spec,
                             const TreeHyperparams& hp, const SolverConfig& solver, bool dfs,
                             double* claimed_risk = nullptr) {
    hp.validate(ds.p);
    spec.validate(ds.n_envs);
    const std::int64_t n = ds.size();
    const int K = ds.n_envs;
    const int m_try = hp.resolved_m_try(ds.p);

    std::vector<std::int64_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0);

    Tree tree;
    tree.nodes.push_back(TreeNode{});

    struct Region {
        std::int64_t begin, end;
        int depth;
        std::int32_t node;
        int column;
        std::vector<int> features;  ///< drawn once at creation
    };
    const auto make_region = [&](std::int64_t begin, std::int64_t end, int depth,
                                 std::int32_t node, int column) {
        Rng rng(derive_seed(hp.seed, kTagTreeGrowth, static_cast<std::uint64_t>(node)));
        return Region{begin, end, depth, node, column, sample_feature_subset(ds.p, m_try, rng)};
    };

    // Current partition state: stats column per region, jointly solved values.
    LeafEnvStats cur(K, 1);
    {
        const auto root_accs = per_env_stats(ds, rows);
        for (int e = 0; e < K; ++e) cur.set(e, 0, root_accs[e]);
        cur.refresh_env_rows();
    }
    double pooled_mean = 0.0;
    {
        double sum = 0.0;
        for (std::int64_t i = 0; i < n; ++i) sum += ds.y[i];
        pooled_mean = sum / static_cast<double>(n);
    }
    std::vector<double> theta_cur{pooled_mean};
    double z_cur;
    {
        const SolverResult root = solve_leaf_values(theta_cur, cur, spec, solver);
        theta_cur = root.theta;
        z_cur = root.z;
    }

    struct Candidate {
        double z = std::numeric_limits<double>::infinity();
        std::size_t region = 0;
        int feature = -1;
        double threshold = 0.0;
        std::vector<double> theta;
    };

    SplitScan scan;
    LeafEnvStats scratch(K, 2);
    std::vector<double> theta_init;

    // Scores every candidate split of one region against the current
    // partition; returns the best (strictly ordered by solved risk,
    // enumeration order breaking ties).
    const auto best_candidate_of = [&](const Region& region, std::size_t region_index,
                                       Candidate* best) {
        const std::int64_t node_n = region.end - region.begin;
        const bool depth_ok = hp.max_depth < 0 || region.depth < hp.max_depth;
        if (!depth_ok || node_n < 2 * hp.min_leaf_size) return;
        const int T = cur.n_leaves;

        scratch = LeafEnvStats(K, T + 1);
        for (int e = 0; e < K; ++e) {
            for (int t = 0; t < T; ++t) {
                const std::size_t from = cur.idx(e, t), to = scratch.idx(e, t);
                scratch.count[to] = cur.count[from];
                scratch.mean[to] = cur.mean[from];
                scratch.ssd[to] = cur.ssd[from];
            }
            scratch.env_rows[e] = cur.env_rows[e];
        }
        theta_init.assign(theta_cur.begin(), theta_cur.end());
        theta_init.push_back(theta_cur[region.column]);

        std::vector<MeanVarAcc> own(K);
        for (int e = 0; e < K; ++e) own[e] = detail::column_acc(cur, e, region.column);

        const std::span<std::int64_t> node_rows(rows.data() + region.begin, node_n);
        for (int feature : region.features) {
            scan_feature(ds, node_rows, feature, hp.min_leaf_size, &scan);
            std::vector<MeanVarAcc> left(K);
            std::int64_t at = 0;
            for (const auto& cut : scan.cuts) {
                while (at < cut.pos) {
                    const std::int64_t r = scan.order[at++];
                    left[ds.env[r]].add(ds.y[r]);
                }
                for (int e = 0; e < K; ++e) {
                    scratch.set(e, region.column, left[e]);
                    scratch.set(e, T, MeanVarAcc::split_off(own[e], left[e]));
                }
                const SolverResult res = solve_leaf_values(theta_init, scratch, spec, solver);
                if (res.z < best->z) {
                    best->z = res.z;
                    best->region = region_index;
                    best->feature = feature;
                    best->threshold = cut.threshold;
                    best->theta = res.theta;
                }
            }
        }
    };

    // Executes an accepted candidate: partitions rows, appends tree nodes,
    // re-points stats columns (left keeps the region's column, right gets a
    // fresh one) and commits the jointly solved values.
    const auto execute = [&](Region& region, const Candidate& cand, Region* right_out) {
        const std::span<std::int64_t> node_rows(rows.data() + region.begin,
                                                region.end - region.begin);
        const std::int64_t n_left = partition_rows(ds, node_rows, cand.feature, cand.threshold);
        const auto left_id = static_cast<std::int32_t>(tree.nodes.size());
        const auto right_id = left_id + 1;
        {
            // Scoped: emplace_back below may reallocate and invalidate `node`.
            auto& node = tree.nodes[region.node];
            node.feature = cand.feature;
            node.threshold = cand.threshold;
            node.left = left_id;
            node.right = right_id;
        }
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();

        const int T = cur.n_leaves;
        LeafEnvStats grown(K, T + 1);
        const auto left_accs =
            per_env_stats(ds, node_rows.subspan(0, n_left));
        const auto right_accs = per_env_stats(ds, node_rows.subspan(n_left));
        for (int e = 0; e < K; ++e) {
            for (int t = 0; t < T; ++t) {
                const std::size_t from = cur.idx(e, t), to = grown.idx(e, t);
                grown.count[to] = cur.count[from];
                grown.mean[to] = cur.mean[from];
                grown.ssd[to] = cur.ssd[from];
            }
            grown.set(e, region.column, left_accs[e]);
            grown.set(e, T, right_accs[e]);
        }
        grown.env_rows = cur.env_rows;
        cur = std::move(grown);
        theta_cur = cand.theta;
        z_cur = cand.z;

        const std::int64_t mid = region.begin + n_left;
        *right_out = make_region(mid, region.end, region.depth + 1, right_id, T);
        region = make_region(region.begin, mid, region.depth + 1, left_id, region.column);
    };

    std::vector<Region> leaves;  // finalized (dfs) or current partition (non-dfs)
    if (dfs) {
        std::vector<Region> stack{make_region(0, n, 0, 0, 0)};
        while (!stack.empty()) {
            Region region = std::move(stack.back());
            stack.pop_back();
            Candidate best;
            best_candidate_of(region, 0, &best);
            if (best.feature >= 0 && best.z < z_cur) {
                Region right;
                execute(region, best, &right);
                stack.push_back(std::move(right));
                stack.push_back(std::move(region));
            } else {
                leaves.push_back(std::move(region));
            }
        }
    } else {
        leaves.push_back(make_region(0, n, 0, 0, 0));
        for (;;) {
            Candidate best;
            for (std::size_t i = 0; i < leaves.size(); ++i) best_candidate_of(leaves[i], i, &best);
            if (best.feature < 0 || !(best.z < z_cur)) break;
            Region right;
            execute(leaves[best.region], best, &right);
            leaves.push_back(std::move(right));
        }
    }

    for (const Region& region : leaves) tree.nodes[region.node].leaf = region.column;
    tree.leaf_values = theta_cur;
    detail::rebuild_stats(&tree, ds);
    if (claimed_risk) *claimed_risk = z_cur;
    return tree;
}

// ============================================================================
// Tree-weight step
// ============================================================================

/// Optimize the forest's convex tree weights against the worst-case holdout
/// risk; partitions and leaf values are untouched.
inline WeightsResult optimize_tree_weights(Forest* forest, const EnvDataset& holdout,
                                           const RiskSpec& spec, const SolverConfig& solver) {
    const int B = forest->n_trees();
    const std::int64_t n = holdout.size();
    std::vector<double> preds(static_cast<std::size_t>(B) * n);
    for (int b = 0; b < B; ++b) {
        double* out = preds.data() + static_cast<std::size_t>(b) * n;
        for (std::int64_t i = 0; i < n; ++i) out[i] = forest->trees[b].predict(holdout.row(i));
    }
    WeightsResult res = extragradient_weights(preds, B, holdout, spec, solver);
    forest->weights = res.weights;
    return res;
}

// ============================================================================
// Forest-level fit
// ============================================================================

struct MaxRmForest {
    Forest forest;
    StrategySpec strategy;
    RiskKind risk_kind = RiskKind::Mse;
    std::vector<double> offsets;
    SolverConfig solver;
    TreeHyperparams hp;
    std::uint64_t seed = 0;

    /// Per-tree diagnostics on each tree's own bootstrap sample:
    /// the worst-case risk claimed by the construction (solver output or
    /// growth bookkeeping) and the exact recomputation from rebuilt
    /// statistics, with the environments attaining it.
    std::vector<double> tree_claimed_risk;
    std::vector<double> tree_max_risk;
    std::vector<std::vector<int>> tree_active_envs;

    /// Populated by the reweighting step.
    double holdout_max_risk = std::numeric_limits<double>::quiet_NaN();

    double predict(std::span<const double> x) const { return forest.predict(x); }
};

inline MaxRmForest fit_maxrm_forest(const EnvDataset& ds, const StrategySpec& strategy,
                                    const RiskSpec& spec, const SolverConfig& solver,
                                    const TreeHyperparams& hp, int n_trees, std::uint64_t seed,
                                    int workers = 1) {
    strategy.validate();
    hp.validate(ds.p);
    solver.validate();
    spec.validate(ds.n_envs);
    if (n_trees < 1) throw ConfigError("fit: tree count must be >= 1");
    if (!ds.all_envs_nonempty())
        throw DataError("fit: every training environment must contain rows");

    std::optional<std::pair<EnvDataset, EnvDataset>> split;
    const EnvDataset* fit_ds = &ds;
    if (strategy.reweight) {
        split = stratified_split(ds, 1.0 - strategy.holdout_fraction,
                                 derive_seed(seed, kTagHoldout));
        fit_ds = &split->first;
    }

    MaxRmForest model;
    model.strategy = strategy;
    model.risk_kind = spec.kind;
    model.offsets = spec.offsets;
    model.solver = solver;
    model.hp = hp;
    model.seed = seed;
    model.forest.trees.resize(n_trees);
    model.forest.weights.assign(n_trees, 1.0 / n_trees);
    model.tree_claimed_risk.assign(n_trees, 0.0);
    model.tree_max_risk.assign(n_trees, 0.0);
    model.tree_active_envs.resize(n_trees);

    parallel_for(n_trees, workers, [&](int b) {
        const EnvDataset boot = bootstrap_sample(
            *fit_ds, derive_seed(seed, kTagBootstrap, static_cast<std::uint64_t>(b)));
        TreeHyperparams tree_hp = hp;
        tree_hp.seed = derive_seed(seed, kTagTreeGrowth, static_cast<std::uint64_t>(b));
        try {
            Tree tree;
            double claimed = std::numeric_limits<double>::quiet_NaN();
            switch (strategy.kind) {
                case StrategyKind::Posthoc:
                    tree = fit_cart_tree(boot, tree_hp);
                    claimed = posthoc_adjust(&tree, spec, solver).z;
                    break;
                case StrategyKind::Local:
                    tree = grow_tree_local(boot, spec, tree_hp, solver, &claimed);
                    break;
                case StrategyKind::Global:
                    tree = grow_tree_global(boot, spec, tree_hp, solver, /*dfs=*/true, &claimed);
                    break;
                case StrategyKind::GlobalNonDfs:
                    tree = grow_tree_global(boot, spec, tree_hp, solver, /*dfs=*/false, &claimed);
                    break;
                case StrategyKind::WeightsOnly:
                    tree = fit_cart_tree(boot, tree_hp);
                    break;
            }
            const RiskValue rv = max_empirical_risk(tree.leaf_values, tree.stats, spec);
            model.tree_claimed_risk[b] = std::isnan(claimed) ? rv.z : claimed;
            model.tree_max_risk[b] = rv.z;
            model.tree_active_envs[b] = rv.argmax;
            model.forest.trees[b] = std::move(tree);
        } catch (const SolverError& err) {
            throw SolverError("tree " + std::to_string(b) + ": " + err.what());
        }
    });

    if (strategy.reweight) {
        const WeightsResult wr =
            optimize_tree_weights(&model.forest, split->second, spec, solver);
        model.holdout_max_risk = wr.z;
    }
    return model;
}

}  // namespace maxrm
