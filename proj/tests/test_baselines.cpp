#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "maxrm/baselines.hpp"
#include "maxrm/dataset.hpp"
#include "maxrm/dgp.hpp"
#include "maxrm/risk.hpp"

using namespace maxrm;
using Catch::Approx;

namespace {

/// Empirical per-environment MSE of the two-slope predictor a*x (x <= 0),
/// b*x (x > 0) on generated data.
std::vector<double> empirical_two_slope_risks(const EnvDataset& ds, double a, double b) {
    std::vector<double> sums(ds.n_envs, 0.0);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const double x = ds.x[i];
        const double pred = x <= 0.0 ? a * x : b * x;
        const double d = ds.y[i] - pred;
        sums[ds.env[i]] += d * d;
    }
    for (int e = 0; e < ds.n_envs; ++e) sums[e] /= static_cast<double>(ds.env_counts[e]);
    return sums;
}

}  // namespace

TEST_CASE("piecewise-linear analytic risks at the frozen optima", "[baselines]") {
    // At the worst-case-optimal slopes the two extreme environments tie.
    const AnalyticRisks at_opt =
        oracle_analytic_risks(kPwlMaxAlpha, kPwlMaxBeta, DgpSetting::PiecewiseLinear);
    REQUIRE(at_opt.max == Approx(16.5833333333).margin(1e-9));
    REQUIRE(at_opt.env_risks[0] == Approx(at_opt.env_risks[1]).margin(1e-12));
    REQUIRE(at_opt.env_risks[2] < at_opt.max);

    const AnalyticRisks at_pool =
        oracle_analytic_risks(kPwlPoolAlpha, kPwlPoolBeta, DgpSetting::PiecewiseLinear);
    REQUIRE(at_pool.max == Approx(25.2870370370).margin(1e-9));

    // noise override drops the irreducible part
    const AnalyticRisks clean =
        oracle_analytic_risks(kPwlMaxAlpha, kPwlMaxBeta, DgpSetting::PiecewiseLinear, 0.0);
    REQUIRE(clean.max == Approx(at_opt.max - 0.25).margin(1e-12));

    // local minimax: nudging either slope raises the worst-case risk
    for (const double d : {-0.01, 0.01}) {
        REQUIRE(oracle_analytic_risks(kPwlMaxAlpha + d, kPwlMaxBeta,
                                      DgpSetting::PiecewiseLinear)
                    .max > at_opt.max + 1e-6);
        REQUIRE(oracle_analytic_risks(kPwlMaxAlpha, kPwlMaxBeta + d,
                                      DgpSetting::PiecewiseLinear)
                    .max > at_opt.max + 1e-6);
    }

    REQUIRE_THROWS_AS(oracle_analytic_risks(1.0, 1.0, DgpSetting::GpNoShift), ConfigError);
}

TEST_CASE("mixture analytic risks at the frozen optima", "[baselines]") {
    const AnalyticRisks at_opt = oracle_analytic_risks(kMixtureOracleCp, kMixtureOracleCm,
                                                       DgpSetting::MixtureUniform);
    REQUIRE(at_opt.max == Approx(18.28).margin(1e-9));
    REQUIRE(at_opt.env_risks[0] == Approx(at_opt.env_risks[1]).margin(1e-12));

    const AnalyticRisks at_zero =
        oracle_analytic_risks(0.0, 0.0, DgpSetting::MixtureUniform);
    REQUIRE(at_zero.max == Approx(49.0).margin(1e-9));

    for (const double d : {-0.01, 0.01}) {
        REQUIRE(oracle_analytic_risks(kMixtureOracleCp + d, kMixtureOracleCm,
                                      DgpSetting::MixtureUniform)
                    .max > at_opt.max + 1e-6);
        REQUIRE(oracle_analytic_risks(kMixtureOracleCp, kMixtureOracleCm + d,
                                      DgpSetting::MixtureUniform)
                    .max > at_opt.max + 1e-6);
    }
}

TEST_CASE("analytic risks agree with simulated data", "[baselines]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = 4000;
    cfg.seed = 101;
    const SimData pwl = gen_dataset(cfg);
    const AnalyticRisks exact =
        oracle_analytic_risks(kPwlMaxAlpha, kPwlMaxBeta, DgpSetting::PiecewiseLinear);
    const auto emp = empirical_two_slope_risks(pwl.test, kPwlMaxAlpha, kPwlMaxBeta);
    for (int e = 0; e < 3; ++e) REQUIRE(emp[e] == Approx(exact.env_risks[e]).margin(1.0));

    cfg = DgpConfig::defaults_for(DgpSetting::MixtureUniform);
    cfg.n_per_env = 4000;
    cfg.seed = 102;
    const SimData mix = gen_dataset(cfg);
    // positive side carries the first slope in this setting's native order
    const AnalyticRisks mexact = oracle_analytic_risks(kMixtureOracleCp, kMixtureOracleCm,
                                                       DgpSetting::MixtureUniform);
    const auto memp =
        empirical_two_slope_risks(mix.test, kMixtureOracleCm, kMixtureOracleCp);
    for (int e = 0; e < 3; ++e) REQUIRE(memp[e] == Approx(mexact.env_risks[e]).margin(2.0));
}

TEST_CASE("per-environment subsets keep their rows", "[baselines]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = 40;
    cfg.seed = 3;
    const EnvDataset ds = gen_dataset(cfg).train;
    const EnvDataset sub = single_env_subset(ds, 1);
    REQUIRE(sub.n_envs == 1);
    REQUIRE(sub.size() == ds.env_counts[1]);
    std::int64_t j = 0;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        if (ds.env[i] != 1) continue;
        REQUIRE(sub.x[j] == ds.x[i]);
        REQUIRE(sub.y[j] == ds.y[i]);
        REQUIRE(sub.env[j] == 0);
        ++j;
    }
}

TEST_CASE("environment mixing weights live on the simplex", "[baselines]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = 70;
    cfg.seed = 23;
    const EnvDataset ds = gen_dataset(cfg).train;
    const RiskSpec spec = RiskSpec::mse(ds.n_envs);
    TreeHyperparams hp;
    hp.min_leaf_size = 15;

    const MaggingModel model = fit_magging(ds, spec, hp, 3, 7);
    REQUIRE(model.forests.size() == 3);
    REQUIRE(model.q.size() == 3);
    double qsum = 0.0;
    for (double q : model.q) {
        REQUIRE(q >= -1e-12);
        qsum += q;
    }
    REQUIRE(qsum == Approx(1.0).margin(1e-9));

    // the reported risk is attained by the mixture's in-sample predictions
    const std::vector<double> preds = predict_magging(model, ds);
    const RiskValue rv = prediction_risks(ds, preds, spec);
    REQUIRE(rv.z == Approx(model.max_in_sample_risk).margin(1e-9));
}

TEST_CASE("mixing over a single environment is a point mass", "[baselines]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = 50;
    cfg.seed = 4;
    const EnvDataset env0 = single_env_subset(gen_dataset(cfg).train, 0);
    TreeHyperparams hp;
    hp.min_leaf_size = 10;
    const MaggingModel model = fit_magging(env0, RiskSpec::mse(1), hp, 2, 9);
    REQUIRE(model.q.size() == 1);
    REQUIRE(model.q[0] == Approx(1.0).margin(1e-12));
}

TEST_CASE("leaf-size scaling restores per-environment granularity", "[baselines]") {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = 70;
    cfg.seed = 31;
    const EnvDataset ds = gen_dataset(cfg).train;
    const RiskSpec spec = RiskSpec::mse(ds.n_envs);
    TreeHyperparams hp;
    hp.min_leaf_size = 30;

    const MaggingModel coarse = fit_magging(ds, spec, hp, 2, 11, SolverConfig{}, false);
    const MaggingModel fine = fit_magging(ds, spec, hp, 2, 11, SolverConfig{}, true);
    auto total_leaves = [](const MaggingModel& m) {
        int total = 0;
        for (const Forest& f : m.forests)
            for (const Tree& t : f.trees) total += t.n_leaves();
        return total;
    };
    REQUIRE(total_leaves(fine) > total_leaves(coarse));
}

TEST_CASE("mixing rejects an empty environment by name", "[baselines]") {
    std::vector<double> x{0.0, 1.0, 2.0, 3.0};
    std::vector<double> y{0.0, 1.0, 2.0, 3.0};
    std::vector<int> env{0, 0, 1, 1};
    const EnvDataset gap =
        EnvDataset::create(std::move(x), std::move(y), std::move(env), 1, 3);
    REQUIRE_THROWS_WITH(
        fit_magging(gap, RiskSpec::mse(3), TreeHyperparams{}, 1, 1),
        Catch::Matchers::ContainsSubstring("environment 2"));
}
