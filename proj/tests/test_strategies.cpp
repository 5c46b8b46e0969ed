#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "maxrm/cart.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/dgp.hpp"
#include "maxrm/rng.hpp"
#include "maxrm/strategies.hpp"

using namespace maxrm;
using Catch::Approx;

namespace {

EnvDataset pwl_train(std::int64_t n_per_env, std::uint64_t seed) {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = n_per_env;
    cfg.seed = seed;
    return gen_dataset(cfg).train;
}

EnvDataset single_env_dataset(std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> x(n * 2), y(n);
    std::vector<int> env(n, 0);
    for (std::int64_t i = 0; i < n; ++i) {
        x[i * 2] = rng.uniform(-3.0, 3.0);
        x[i * 2 + 1] = rng.uniform(-3.0, 3.0);
        y[i] = (x[i * 2] > 0.0 ? 2.0 : -1.0) + 0.5 * x[i * 2 + 1] + 0.3 * rng.normal();
    }
    return EnvDataset::create(std::move(x), std::move(y), std::move(env), 2, 1);
}

double honest_max_risk(const Tree& tree, const RiskSpec& spec) {
    return max_empirical_risk(tree.leaf_values, tree.stats, spec).z;
}

}  // namespace

TEST_CASE("strategy names parse and round-trip", "[strategies]") {
    for (const std::string name : {"posthoc", "local", "global", "global-nondfs", "posthoc-w",
                                   "local-w", "global-w", "global-nondfs-w", "weights"}) {
        const StrategySpec s = parse_strategy(name);
        REQUIRE(strategy_name(s) == name);
    }
    REQUIRE(parse_strategy("weights").reweight);
    REQUIRE_FALSE(parse_strategy("global").reweight);
    REQUIRE_THROWS_AS(parse_strategy("greedy"), ConfigError);

    StrategySpec bad;
    bad.holdout_fraction = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad.holdout_fraction = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = StrategySpec{StrategyKind::WeightsOnly, /*reweight=*/false};
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("post-hoc adjustment lowers the cached worst-case risk", "[strategies]") {
    const EnvDataset ds = pwl_train(80, 21);
    const RiskSpec spec = RiskSpec::mse(ds.n_envs);
    TreeHyperparams hp;
    hp.min_leaf_size = 15;
    hp.seed = 3;

    Tree tree = fit_cart_tree(ds, hp);
    const double z_means = honest_max_risk(tree, spec);

    const SolverResult res = posthoc_adjust(&tree, spec, SolverConfig{});
    REQUIRE(tree.leaf_values == res.theta);
    REQUIRE(res.z <= z_means + 1e-12);
    REQUIRE(honest_max_risk(tree, spec) == Approx(res.z).margin(1e-9));
    REQUIRE(res.p.size() == static_cast<std::size_t>(ds.n_envs));
}

TEST_CASE("risk-guided growth strictly improves on the stump", "[strategies]") {
    const EnvDataset ds = pwl_train(80, 9);
    const RiskSpec spec = RiskSpec::mse(ds.n_envs);
    TreeHyperparams hp;
    hp.min_leaf_size = 20;
    hp.seed = 4;

    TreeHyperparams stump_hp = hp;
    stump_hp.max_depth = 0;
    double z_stump = 0.0, z_grown = 0.0;
    const Tree stump = grow_tree_local(ds, spec, stump_hp, SolverConfig{}, &z_stump);
    const Tree grown = grow_tree_local(ds, spec, hp, SolverConfig{}, &z_grown);

    REQUIRE(stump.n_leaves() == 1);
    REQUIRE(grown.n_leaves() > 1);
    REQUIRE(z_grown < z_stump - 1e-6);  // the sign split pays off on this design
    REQUIRE(honest_max_risk(grown, spec) == Approx(z_grown).margin(1e-6));
    REQUIRE(honest_max_risk(stump, spec) == Approx(z_stump).margin(1e-9));

    // same seed, same tree
    double z_again = 0.0;
    const Tree again = grow_tree_local(ds, spec, hp, SolverConfig{}, &z_again);
    REQUIRE(z_again == z_grown);
    for (std::int64_t i = 0; i < ds.size(); i += 7)
        REQUIRE(again.predict(ds.row(i)) == grown.predict(ds.row(i)));
}

TEST_CASE("single-environment risk growth reduces to plain regression growth",
          "[strategies]") {
    const EnvDataset ds = single_env_dataset(150, 31);
    const RiskSpec spec = RiskSpec::mse(1);
    TreeHyperparams hp;
    hp.min_leaf_size = 10;
    hp.max_depth = 4;
    hp.seed = 12;

    const Tree cart = fit_cart_tree(ds, hp);
    const Tree local = grow_tree_local(ds, spec, hp, SolverConfig{});
    REQUIRE(local.n_leaves() == cart.n_leaves());
    for (std::int64_t i = 0; i < ds.size(); ++i)
        REQUIRE(local.predict(ds.row(i)) == Approx(cart.predict(ds.row(i))).margin(1e-9));
}

TEST_CASE("whole-tree re-solving growth matches its own bookkeeping", "[strategies]") {
    const EnvDataset ds = pwl_train(60, 13);
    const RiskSpec spec = RiskSpec::mse(ds.n_envs);
    TreeHyperparams hp;
    hp.min_leaf_size = 20;
    hp.seed = 8;

    for (const bool dfs : {true, false}) {
        double claimed = 0.0;
        const Tree tree = grow_tree_global(ds, spec, hp, SolverConfig{}, dfs, &claimed);
        REQUIRE(tree.n_leaves() > 1);
        REQUIRE(honest_max_risk(tree, spec) == Approx(claimed).margin(1e-6));

        TreeHyperparams stump_hp = hp;
        stump_hp.max_depth = 0;
        double z_stump = 0.0;
        grow_tree_global(ds, spec, stump_hp, SolverConfig{}, dfs, &z_stump);
        REQUIRE(claimed < z_stump - 1e-6);
    }
}

TEST_CASE("forest fit wires strategies, diagnostics, and reweighting", "[strategies]") {
    const EnvDataset ds = pwl_train(60, 5);
    const RiskSpec spec = RiskSpec::mse(ds.n_envs);
    TreeHyperparams hp;
    hp.min_leaf_size = 15;

    const MaxRmForest model =
        fit_maxrm_forest(ds, parse_strategy("posthoc"), spec, SolverConfig{}, hp, 4, 19);
    REQUIRE(model.forest.n_trees() == 4);
    for (double w : model.forest.weights) REQUIRE(w == Approx(0.25));
    for (int b = 0; b < 4; ++b) {
        // the claimed per-tree risk must be attained exactly on the tree's
        // own bootstrap statistics
        REQUIRE(model.tree_max_risk[b] == Approx(model.tree_claimed_risk[b]).margin(1e-9));
        REQUIRE_FALSE(model.tree_active_envs[b].empty());
        for (int e : model.tree_active_envs[b]) {
            REQUIRE(e >= 0);
            REQUIRE(e < ds.n_envs);
        }
    }
    REQUIRE(std::isnan(model.holdout_max_risk));

    // deterministic in the seed
    const MaxRmForest twin =
        fit_maxrm_forest(ds, parse_strategy("posthoc"), spec, SolverConfig{}, hp, 4, 19);
    for (double x : {-3.0, -1.0, 0.5, 2.5}) {
        const std::vector<double> pt{x};
        REQUIRE(twin.predict(pt) == model.predict(pt));
    }

    const MaxRmForest rw =
        fit_maxrm_forest(ds, parse_strategy("posthoc-w"), spec, SolverConfig{}, hp, 4, 19);
    double wsum = 0.0;
    for (double w : rw.forest.weights) {
        REQUIRE(w >= -1e-12);
        wsum += w;
    }
    REQUIRE(wsum == Approx(1.0).margin(1e-9));
    REQUIRE(std::isfinite(rw.holdout_max_risk));

    const MaxRmForest wonly =
        fit_maxrm_forest(ds, parse_strategy("weights"), spec, SolverConfig{}, hp, 4, 19);
    REQUIRE(std::isfinite(wonly.holdout_max_risk));
}

TEST_CASE("forest fit rejects bad inputs", "[strategies]") {
    const EnvDataset ds = pwl_train(30, 2);
    const RiskSpec spec = RiskSpec::mse(ds.n_envs);
    REQUIRE_THROWS_AS(fit_maxrm_forest(ds, parse_strategy("posthoc"), spec, SolverConfig{},
                                       TreeHyperparams{}, 0, 1),
                      ConfigError);

    // declare 3 environments but populate only two of them
    std::vector<double> x{0.0, 1.0, 2.0, 3.0};
    std::vector<double> y{0.0, 1.0, 2.0, 3.0};
    std::vector<int> env{0, 0, 1, 1};
    const EnvDataset gap =
        EnvDataset::create(std::move(x), std::move(y), std::move(env), 1, 3);
    REQUIRE_THROWS_AS(fit_maxrm_forest(gap, parse_strategy("posthoc"), RiskSpec::mse(3),
                                       SolverConfig{}, TreeHyperparams{}, 2, 1),
                      DataError);
}
