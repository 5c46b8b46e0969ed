#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "maxrm/cart.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/dgp.hpp"
#include "maxrm/metrics.hpp"

using namespace maxrm;
using Catch::Approx;

namespace {

EnvDataset env_dataset(const std::vector<double>& y, const std::vector<int>& env, int k = -1) {
    std::vector<double> x(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) x[i] = static_cast<double>(i);
    return EnvDataset::create(std::move(x), std::vector<double>(y), std::vector<int>(env), 1, k);
}

}  // namespace

TEST_CASE("test-set risks match hand computation", "[metrics]") {
    const EnvDataset test = env_dataset({0, 2, 4}, {0, 0, 1});
    const std::vector<double> preds{1.0, 1.0, 2.0};
    const std::vector<RiskKind> kinds{RiskKind::Mse, RiskKind::Nrw};

    const Metrics m = evaluate(preds, test, kinds);
    REQUIRE(m.pooled_mse == Approx(2.0));  // (1 + 1 + 4) / 3
    REQUIRE(m.risk(RiskKind::Mse).env_risks[0] == Approx(1.0));
    REQUIRE(m.risk(RiskKind::Mse).env_risks[1] == Approx(4.0));
    REQUIRE(m.max_risk(RiskKind::Mse) == Approx(4.0));
    // recentered: per-env MSE minus mean squared response
    REQUIRE(m.risk(RiskKind::Nrw).env_risks[0] == Approx(1.0 - 2.0));
    REQUIRE(m.risk(RiskKind::Nrw).env_risks[1] == Approx(4.0 - 16.0));
    REQUIRE(m.max_risk(RiskKind::Nrw) == Approx(-1.0));
    REQUIRE(m.warnings.empty());
    REQUIRE_THROWS_AS(m.risk(RiskKind::Reg), ConfigError);

    // perfect predictions zero out the mean-squared risks
    const Metrics zero = evaluate(std::vector<double>{0.0, 2.0, 4.0}, test, kinds);
    REQUIRE(zero.pooled_mse == Approx(0.0).margin(1e-15));
    REQUIRE(zero.max_risk(RiskKind::Mse) == Approx(0.0).margin(1e-15));

    // with one environment the maximum is the pooled error
    const EnvDataset one = env_dataset({0, 2, 4}, {0, 0, 0});
    const Metrics pooled = evaluate(preds, one, std::vector<RiskKind>{RiskKind::Mse});
    REQUIRE(pooled.max_risk(RiskKind::Mse) == Approx(pooled.pooled_mse));

    REQUIRE_THROWS_AS(evaluate(std::vector<double>{1.0}, test, kinds), DataError);
}

TEST_CASE("empty test environments are excluded and flagged", "[metrics]") {
    const EnvDataset test = env_dataset({0, 2, 4}, {0, 0, 1}, 3);
    const std::vector<double> preds{1.0, 1.0, 2.0};
    const Metrics m = evaluate(preds, test, std::vector<RiskKind>{RiskKind::Mse});
    REQUIRE(m.warnings.size() == 1);
    REQUIRE(m.warnings[0].find("environment 2") != std::string::npos);
    REQUIRE(std::isnan(m.risk(RiskKind::Mse).env_risks[2]));
    REQUIRE(m.max_risk(RiskKind::Mse) == Approx(4.0));
}

TEST_CASE("model evaluation equals prediction evaluation", "[metrics]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = 40;
    cfg.seed = 8;
    const SimData sim = gen_dataset(cfg);
    TreeHyperparams hp;
    hp.min_leaf_size = 10;
    const Tree tree = fit_cart_tree(sim.train, hp);

    const std::vector<RiskKind> kinds{RiskKind::Mse};
    const Metrics direct = evaluate(tree, sim.test, kinds);
    const Metrics via_preds = evaluate(predict_all(tree, sim.test), sim.test, kinds);
    REQUIRE(direct.pooled_mse == via_preds.pooled_mse);
    REQUIRE(direct.max_risk(RiskKind::Mse) == via_preds.max_risk(RiskKind::Mse));
}

TEST_CASE("integrated squared error of a constant offset is its square", "[metrics]") {
    const OracleFn oracle{[](std::span<const double> x) { return 2.0 * x[0]; }, "test"};
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    const std::vector<double> x_eval = sample_covariates(cfg, 200, 77, nullptr);

    const auto shifted = [&](std::span<const double> x) { return oracle(x) + 1.5; };
    REQUIRE(mise(shifted, oracle, x_eval, 1) == Approx(2.25).margin(1e-12));
    const auto exact = [&](std::span<const double> x) { return oracle(x); };
    REQUIRE(mise(exact, oracle, x_eval, 1) == Approx(0.0).margin(1e-15));
    REQUIRE_THROWS_AS(mise(exact, oracle, {}, 1), ConfigError);
    REQUIRE_THROWS_AS(mise(exact, oracle, std::vector<double>{1.0, 2.0, 3.0}, 2), ConfigError);
}

TEST_CASE("sign-flip test separates clear and null differences", "[metrics]") {
    std::vector<double> base(20);
    for (std::size_t i = 0; i < base.size(); ++i) base[i] = 0.1 * static_cast<double>(i);

    // identical errors: the observed statistic is 0, every flip ties it
    REQUIRE(permutation_test(base, base, 500, 1) == Approx(1.0));

    // a constant one-sided gap of 1 is essentially never matched by flips
    std::vector<double> worse = base;
    for (double& v : worse) v += 1.0;
    const double p = permutation_test(worse, base, 10000, 2);
    REQUIRE(p <= 0.001);
    REQUIRE(p == permutation_test(worse, base, 10000, 2));  // deterministic

    REQUIRE_THROWS_AS(permutation_test(base, std::vector<double>{1.0}, 10, 3), ConfigError);
    REQUIRE_THROWS_AS(permutation_test(std::vector<double>{1.0}, std::vector<double>{1.0}, 10, 3),
                      ConfigError);
    REQUIRE_THROWS_AS(permutation_test(base, base, 0, 3), ConfigError);
}

TEST_CASE("mixture risks never exceed the worst vertex", "[metrics]") {
    const EnvDataset test = env_dataset({0, 2, 4, 1, 3}, {0, 0, 1, 1, 2});
    const std::vector<double> preds{1.0, 1.0, 2.0, 0.0, 0.0};
    for (const RiskKind kind : {RiskKind::Mse, RiskKind::Nrw}) {
        const RiskSpec spec = risk_offsets(test, kind, {});
        const ConvexHullReport rep = convexhull_risk_check(preds, test, spec, 500, 11);
        REQUIRE(rep.n_checked == 500);
        REQUIRE(rep.n_violations == 0);
        REQUIRE(rep.max_violation <= 1e-12);
        const RiskValue rv = prediction_risks(test, preds, spec);
        REQUIRE(rep.vertex_max == Approx(rv.z));
        REQUIRE(rep.vertex_risks == rv.env_risks);
    }
    const RiskSpec spec = RiskSpec::mse(test.n_envs);
    REQUIRE_THROWS_AS(convexhull_risk_check(preds, test, spec, 0, 1), ConfigError);
}

TEST_CASE("synthetic mixture environments stay below the training worst case",
          "[metrics]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::GpNoShift);
    cfg.n_per_env = 40;
    cfg.n_envs = 2;
    cfg.p = 2;
    cfg.seed = 13;
    const GpProbeData probe = gen_gp_with_probe(cfg, 80);

    const auto zero_model = [](std::span<const double>) { return 0.0; };
    const HullProbeReport rep = hull_probe_check(zero_model, probe, 60, 21);
    REQUIRE(rep.n_checked == 60);
    REQUIRE(rep.vertex_max >= cfg.noise_sd * cfg.noise_sd);
    REQUIRE(rep.sampled_max <= rep.vertex_max + 2.0 * rep.combined_se);
    REQUIRE(rep.ok);
    REQUIRE_THROWS_AS(hull_probe_check(zero_model, probe, 0, 21), ConfigError);
}

TEST_CASE("fresh-sample leaf solutions approach the large-sample solution",
          "[metrics]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = 200;
    cfg.seed = 17;
    TreeHyperparams hp;
    hp.min_leaf_size = 60;
    const Tree partition = fit_cart_tree(gen_dataset(cfg).train, hp);

    // a patient solver so the excess reflects sampling error, not early stops
    SolverConfig solver;
    solver.gamma = 0.05;
    solver.t_max = 5000;
    solver.delta = 1e-9;
    solver.patience = 200;

    const std::vector<std::int64_t> grid{30, 2000};
    const ConsistencyReport rep =
        consistency_probe(partition, cfg, RiskKind::Mse, solver, grid, 5, 29, 20000);
    REQUIRE(rep.n_grid == grid);
    REQUIRE(rep.median_excess.size() == 2);
    REQUIRE(rep.reference_risk > 0.0);
    for (const double e : rep.median_excess) {
        REQUIRE(std::isfinite(e));
        REQUIRE(e >= -1e-3);
    }
    // worst-case excess decays like n^{-1/2} (the max has a kink at the
    // optimum), so a 67x sample-size jump should cut it severalfold
    REQUIRE(rep.median_excess[1] < 0.5 * rep.median_excess[0]);
    REQUIRE(rep.median_excess[1] < 0.5);

    DgpConfig gp = DgpConfig::defaults_for(DgpSetting::GpNoShift);
    REQUIRE_THROWS_AS(
        consistency_probe(partition, gp, RiskKind::Mse, SolverConfig{}, grid, 2, 1, 1000),
        ConfigError);
    REQUIRE_THROWS_AS(
        consistency_probe(partition, cfg, RiskKind::Mse, SolverConfig{}, {}, 2, 1, 1000),
        ConfigError);
}
