#pragma once

// Regression trees and forests.
//
//  - MeanVarAcc: streaming (count, mean, sum-of-squared-deviations)
//    accumulator with an exact split-off operation, used for split sweeps.
//  - LeafEnvStats: per-(environment, leaf) sufficient statistics; every
//    leaf-value solver works on these, never on raw rows.
//  - Tree / Forest: axis-aligned binary partition with contiguous leaf
//    indices and convex tree weights.
//  - fit_cart_tree: greedy pooled-SSE CART with per-node feature subsets
//    drawn from streams keyed by (tree seed, node creation id), so
//    alternative growers that share a node's creation id see the same
//    candidate features.
//  - scan_feature / sample_feature_subset: shared candidate machinery.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maxrm/dataset.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/parallel.hpp"
#include "maxrm/rng.hpp"

namespace maxrm {

// ============================================================================
// Hyperparameters
// ============================================================================

struct TreeHyperparams {
    int max_depth = -1;              ///< -1 means unlimited
    std::int64_t min_leaf_size = 1;  ///< pooled rows per leaf
    int m_try = 0;                   ///< features per split; 0 means all p
    std::uint64_t seed = 0;

    int resolved_m_try(int p) const { return m_try == 0 ? p : m_try; }

    void validate(int p) const {
        if (min_leaf_size < 1) throw ConfigError("tree: min_leaf_size must be >= 1");
        const int m = resolved_m_try(p);
        if (m < 1 || m > p)
            throw ConfigError("tree: m_try must be in [1, p] (got " + std::to_string(m) +
                              " with p = " + std::to_string(p) + ")");
    }
};

// ============================================================================
// Streaming moments
// ============================================================================

/// Count, mean and sum of squared deviations via Welford updates. `split_off`
/// recovers the complement of a prefix from the total (Chan's combine formula
/// inverted), clamping the SSD at zero so constant data stays exactly exact.
struct MeanVarAcc {
    double n = 0.0;
    double mean = 0.0;
    double m2 = 0.0;  ///< sum of squared deviations from the mean

    void add(double y) {
        n += 1.0;
        const double d = y - mean;
        mean += d / n;
        m2 += d * (y - mean);
    }

    double sum() const { return n * mean; }

    static MeanVarAcc split_off(const MeanVarAcc& total, const MeanVarAcc& part) {
        MeanVarAcc rest;
        rest.n = total.n - part.n;
        if (rest.n <= 0.0) return MeanVarAcc{};
        rest.mean = (total.sum() - part.sum()) / rest.n;
        const double delta = rest.mean - part.mean;
        rest.m2 = total.m2 - part.m2 - delta * delta * part.n * rest.n / total.n;
        if (rest.m2 < 0.0) rest.m2 = 0.0;
        return rest;
    }
};

// ============================================================================
// Per-(environment, leaf) sufficient statistics
// ============================================================================

/// Dense K x T grid of (count, mean, SSD) plus per-environment row totals.
/// Row-major by environment: entry (e, t) lives at e * n_leaves + t.
struct LeafEnvStats {
    int n_envs = 0;
    int n_leaves = 0;
    std::vector<double> count;
    std::vector<double> mean;
    std::vector<double> ssd;
    std::vector<double> env_rows;  ///< n_e = sum_t count(e, t)

    LeafEnvStats() = default;
    LeafEnvStats(int K, int T)
        : n_envs(K),
          n_leaves(T),
          count(static_cast<std::size_t>(K) * T, 0.0),
          mean(static_cast<std::size_t>(K) * T, 0.0),
          ssd(static_cast<std::size_t>(K) * T, 0.0),
          env_rows(K, 0.0) {}

    std::size_t idx(int e, int t) const {
        return static_cast<std::size_t>(e) * n_leaves + t;
    }

    void set(int e, int t, const MeanVarAcc& acc) {
        const std::size_t i = idx(e, t);
        count[i] = acc.n;
        mean[i] = acc.mean;
        ssd[i] = acc.m2;
    }

    void refresh_env_rows() {
        for (int e = 0; e < n_envs; ++e) {
            double total = 0.0;
            for (int t = 0; t < n_leaves; ++t) total += count[idx(e, t)];
            env_rows[e] = total;
        }
    }

    int nonempty_env_count() const {
        int k = 0;
        for (double r : env_rows) k += r > 0.0 ? 1 : 0;
        return k;
    }

    /// Index of the single nonempty environment, or -1 if that count isn't 1.
    int sole_nonempty_env() const {
        int found = -1;
        for (int e = 0; e < n_envs; ++e) {
            if (env_rows[e] > 0.0) {
                if (found >= 0) return -1;
                found = e;
            }
        }
        return found;
    }
};

/// Map each dataset row to its leaf (values in [0, n_leaves)).
struct LeafAssignment {
    std::vector<std::int32_t> leaf_of_row;
    int n_leaves = 0;
};

inline LeafEnvStats collect_leaf_env_stats(const EnvDataset& ds,
                                           std::span<const std::int32_t> leaf_of_row,
                                           int n_leaves) {
    LeafEnvStats out(ds.n_envs, n_leaves);
    std::vector<MeanVarAcc> accs(static_cast<std::size_t>(ds.n_envs) * n_leaves);
    for (std::int64_t i = 0; i < ds.size(); ++i)
        accs[out.idx(ds.env[i], leaf_of_row[i])].add(ds.y[i]);
    for (int e = 0; e < out.n_envs; ++e)
        for (int t = 0; t < n_leaves; ++t) out.set(e, t, accs[out.idx(e, t)]);
    out.refresh_env_rows();
    return out;
}

// ============================================================================
// Tree / Forest
// ============================================================================

struct TreeNode {
    int feature = -1;  ///< -1 marks a leaf
    double threshold = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::int32_t leaf = -1;  ///< leaf index when feature == -1
};

struct Tree {
    std::vector<TreeNode> nodes;     ///< nodes[0] is the root; child indices
                                     ///< equal node creation order
    std::vector<double> leaf_values; ///< theta, indexed by leaf
    LeafEnvStats stats;              ///< per-(env, leaf) stats of the fit sample

    int n_leaves() const { return static_cast<int>(leaf_values.size()); }

    int route(std::span<const double> x) const {
        int i = 0;
        while (nodes[i].feature >= 0)
            i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
        return nodes[i].leaf;
    }

    double predict(std::span<const double> x) const { return leaf_values[route(x)]; }
};

inline LeafAssignment leaf_assignment(const Tree& tree, const EnvDataset& ds) {
    LeafAssignment out;
    out.n_leaves = tree.n_leaves();
    out.leaf_of_row.resize(ds.size());
    for (std::int64_t i = 0; i < ds.size(); ++i)
        out.leaf_of_row[i] = static_cast<std::int32_t>(tree.route(ds.row(i)));
    return out;
}

struct Forest {
    std::vector<Tree> trees;
    std::vector<double> weights;  ///< convex: w_b >= 0, sum = 1

    int n_trees() const { return static_cast<int>(trees.size()); }

    double predict(std::span<const double> x) const {
        double acc = 0.0;
        for (std::size_t b = 0; b < trees.size(); ++b) acc += weights[b] * trees[b].predict(x);
        return acc;
    }
};

inline std::vector<double> predict_forest(const Forest& forest, const EnvDataset& ds) {
    std::vector<double> out(ds.size());
    for (std::int64_t i = 0; i < ds.size(); ++i) out[i] = forest.predict(ds.row(i));
    return out;
}

// ============================================================================
// Split-candidate machinery (shared by all growers)
// ============================================================================

/// m distinct features from {0..p-1} via partial Fisher-Yates, returned in
/// ascending order so candidate enumeration order is deterministic.
inline std::vector<int> sample_feature_subset(int p, int m, Rng& rng) {
    std::vector<int> idx(p);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < m; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(p - i)));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// A node's rows ordered by one feature, plus the valid cut positions:
/// cutting at `pos` sends order[0..pos) left, order[pos..n) right. Valid cuts
/// keep both sides at min_leaf rows and sit between strictly distinct values.
struct SplitScan {
    std::vector<std::int64_t> order;
    std::vector<double> values;
    struct Cut {
        std::int64_t pos;
        double threshold;
    };
    std::vector<Cut> cuts;
};

inline void scan_feature(const EnvDataset& ds, std::span<const std::int64_t> rows, int feature,
                         std::int64_t min_leaf, SplitScan* out) {
    const std::int64_t n = static_cast<std::int64_t>(rows.size());
    out->order.assign(rows.begin(), rows.end());
    std::sort(out->order.begin(), out->order.end(), [&](std::int64_t a, std::int64_t b) {
        const double va = ds.x[a * ds.p + feature], vb = ds.x[b * ds.p + feature];
        return va < vb || (va == vb && a < b);
    });
    out->values.resize(n);
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = ds.x[out->order[i] * ds.p + feature];
    out->cuts.clear();
    for (std::int64_t pos = min_leaf; pos <= n - min_leaf; ++pos) {
        const double lo = out->values[pos - 1], hi = out->values[pos];
        if (!(lo < hi)) continue;
        double threshold = lo + 0.5 * (hi - lo);
        if (threshold >= hi) threshold = lo;  // adjacent floats: keep lo-side routing
        out->cuts.push_back({pos, threshold});
    }
}

/// Stable-partition rows of a node by x[feature] <= threshold; returns the
/// number of rows routed left.
inline std::int64_t partition_rows(const EnvDataset& ds, std::span<std::int64_t> rows,
                                   int feature, double threshold) {
    auto mid = std::stable_partition(rows.begin(), rows.end(), [&](std::int64_t r) {
        return ds.x[r * ds.p + feature] <= threshold;
    });
    return mid - rows.begin();
}

/// Per-environment moment accumulators over a set of rows.
inline std::vector<MeanVarAcc> per_env_stats(const EnvDataset& ds,
                                             std::span<const std::int64_t> rows) {
    std::vector<MeanVarAcc> acc(ds.n_envs);
    for (std::int64_t r : rows) acc[ds.env[r]].add(ds.y[r]);
    return acc;
}

// ============================================================================
// CART
// ============================================================================

/// Greedy pooled-SSE regression tree. At each node, m_try features are drawn
/// from the node's stream (keyed by creation id); the exhaustive candidate
/// search minimizes the summed child SSDs, with ties broken by enumeration
/// order (ascending feature, then ascending threshold). Nodes split only when
/// the pooled SSE strictly decreases and both children hold min_leaf rows.
inline Tree fit_cart_tree(const EnvDataset& ds, const TreeHyperparams& hp) {
    hp.validate(ds.p);
    const std::int64_t n = ds.size();
    const int m_try = hp.resolved_m_try(ds.p);

    std::vector<std::int64_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0);

    Tree tree;
    tree.nodes.push_back(TreeNode{});
    std::vector<std::vector<MeanVarAcc>> leaf_env_accs;

    struct Frame {
        std::int64_t begin, end;
        int depth;
        std::int32_t node;
    };
    std::vector<Frame> stack{{0, n, 0, 0}};
    SplitScan scan;

    while (!stack.empty()) {
        const Frame f = stack.back();
        stack.pop_back();
        const std::span<std::int64_t> node_rows(rows.data() + f.begin, f.end - f.begin);
        const std::int64_t node_n = f.end - f.begin;

        MeanVarAcc total;
        for (std::int64_t r : node_rows) total.add(ds.y[r]);

        int best_feature = -1;
        double best_threshold = 0.0;
        double best_child_ssd = total.m2;  // must strictly improve on "no split"
        const bool depth_ok = hp.max_depth < 0 || f.depth < hp.max_depth;
        if (depth_ok && node_n >= 2 * hp.min_leaf_size) {
            Rng rng(derive_seed(hp.seed, kTagTreeGrowth,
                                static_cast<std::uint64_t>(f.node)));
            for (int feature : sample_feature_subset(ds.p, m_try, rng)) {
                scan_feature(ds, node_rows, feature, hp.min_leaf_size, &scan);
                MeanVarAcc left;
                std::int64_t at = 0;
                for (const auto& cut : scan.cuts) {
                    while (at < cut.pos) left.add(ds.y[scan.order[at++]]);
                    const MeanVarAcc right = MeanVarAcc::split_off(total, left);
                    const double child_ssd = left.m2 + right.m2;
                    if (child_ssd < best_child_ssd) {
                        best_child_ssd = child_ssd;
                        best_feature = feature;
                        best_threshold = cut.threshold;
                    }
                }
            }
        }

        if (best_feature >= 0) {
            const std::int64_t n_left =
                partition_rows(ds, node_rows, best_feature, best_threshold);
            const auto left_id = static_cast<std::int32_t>(tree.nodes.size());
            const auto right_id = left_id + 1;
            {
                // Scoped: emplace_back below may reallocate and invalidate `node`.
                auto& node = tree.nodes[f.node];
                node.feature = best_feature;
                node.threshold = best_threshold;
                node.left = left_id;
                node.right = right_id;
            }
            tree.nodes.emplace_back();
            tree.nodes.emplace_back();
            stack.push_back({f.begin + n_left, f.end, f.depth + 1, right_id});
            stack.push_back({f.begin, f.begin + n_left, f.depth + 1, left_id});
        } else {
            auto& node = tree.nodes[f.node];
            node.leaf = static_cast<std::int32_t>(tree.leaf_values.size());
            tree.leaf_values.push_back(total.mean);
            std::vector<MeanVarAcc> env_accs(ds.n_envs);
            for (std::int64_t r : node_rows) env_accs[ds.env[r]].add(ds.y[r]);
            leaf_env_accs.push_back(std::move(env_accs));
        }
    }

    const int T = tree.n_leaves();
    tree.stats = LeafEnvStats(ds.n_envs, T);
    for (int t = 0; t < T; ++t)
        for (int e = 0; e < ds.n_envs; ++e) tree.stats.set(e, t, leaf_env_accs[t][e]);
    tree.stats.refresh_env_rows();
    return tree;
}

// ============================================================================
// Bagging driver
// ============================================================================

/// Fits B trees on independent bootstrap samples with uniform weights.
/// `fit_one(boot, tree_seed)` builds a single tree; per-tree seeds derive
/// from the forest seed so results are identical at any worker count.
template <class TreeFitter>
Forest fit_bagged_forest(const EnvDataset& ds, int n_trees, std::uint64_t seed, int workers,
                         TreeFitter&& fit_one) {
    if (n_trees < 1) throw ConfigError("forest: tree count must be >= 1");
    Forest forest;
    forest.trees.resize(n_trees);
    forest.weights.assign(n_trees, 1.0 / n_trees);
    parallel_for(n_trees, workers, [&](int b) {
        const EnvDataset boot =
            bootstrap_sample(ds, derive_seed(seed, kTagBootstrap, static_cast<std::uint64_t>(b)));
        forest.trees[b] =
            fit_one(boot, derive_seed(seed, kTagTreeGrowth, static_cast<std::uint64_t>(b)));
    });
    return forest;
}

}  // namespace maxrm
