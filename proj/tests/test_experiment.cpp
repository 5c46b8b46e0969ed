#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "maxrm/experiment.hpp"

using namespace maxrm;
using Catch::Approx;
using nlohmann::json;

namespace {

json minimal_config() {
    return json::parse(R"({
        "dgp": {"setting": "pwl", "n_per_env": 40},
        "methods": [{"kind": "rf", "n_trees": 2, "min_leaf": 10}],
        "repetitions": 2
    })");
}

}  // namespace

TEST_CASE("t quantiles match table values", "[experiment]") {
    REQUIRE(detail::student_t_q975(1) == Approx(12.706).margin(0.01));
    REQUIRE(detail::student_t_q975(2) == Approx(4.303).margin(0.005));
    REQUIRE(detail::student_t_q975(19) == Approx(2.093).margin(0.005));
    REQUIRE(detail::student_t_q975(29) == Approx(2.045).margin(0.005));
    REQUIRE(detail::student_t_q975(100000) == Approx(1.95996).margin(0.001));
}

TEST_CASE("config parsing applies defaults", "[experiment]") {
    const ExperimentConfig cfg = parse_experiment_config(minimal_config());
    REQUIRE(cfg.analysis == AnalysisKind::Methods);
    REQUIRE(cfg.dgp.setting == DgpSetting::PiecewiseLinear);
    REQUIRE(cfg.dgp.n_per_env == 40);
    REQUIRE(cfg.dgp.n_envs == 3);     // setting default
    REQUIRE(cfg.dgp.noise_sd == 0.5); // setting default
    REQUIRE(cfg.methods.size() == 1);
    REQUIRE(cfg.methods[0].name == "rf");  // name falls back to kind
    REQUIRE(cfg.repetitions == 2);
    REQUIRE(cfg.metrics == std::vector<std::string>{"max_mse", "pooled_mse"});
    REQUIRE(cfg.risk_kinds() == std::vector<RiskKind>{RiskKind::Mse});

    json j = minimal_config();
    j["analysis"] = "bias-variance";
    j["metrics"] = {"max_mse", "max_nrw", "mise"};
    const ExperimentConfig bv = parse_experiment_config(j);
    REQUIRE(bv.analysis == AnalysisKind::BiasVariance);
    REQUIRE(bv.risk_kinds() == std::vector<RiskKind>{RiskKind::Mse, RiskKind::Nrw});

    j = minimal_config();
    j["methods"][0]["solver"] = {{"method", "bcd"}, {"gamma", 0.2}};
    const ExperimentConfig sv = parse_experiment_config(j);
    REQUIRE(sv.methods[0].solver.method == SolverMethod::Bcd);
    REQUIRE(sv.methods[0].solver.gamma == Approx(0.2));
    REQUIRE(sv.methods[0].solver.patience == SolverConfig::defaults_for(SolverMethod::Bcd).patience);
}

TEST_CASE("config parsing rejects unknown keys at every level", "[experiment]") {
    json j = minimal_config();
    j["bogus"] = 1;
    REQUIRE_THROWS_WITH(parse_experiment_config(j),
                        Catch::Matchers::ContainsSubstring("bogus"));

    j = minimal_config();
    j["dgp"]["rows"] = 10;
    REQUIRE_THROWS_WITH(parse_experiment_config(j),
                        Catch::Matchers::ContainsSubstring("rows"));

    j = minimal_config();
    j["methods"][0]["depth"] = 3;
    REQUIRE_THROWS_WITH(parse_experiment_config(j),
                        Catch::Matchers::ContainsSubstring("depth"));

    j = minimal_config();
    j["methods"][0]["solver"] = {{"step", 0.1}};
    REQUIRE_THROWS_WITH(parse_experiment_config(j),
                        Catch::Matchers::ContainsSubstring("step"));

    j = minimal_config();
    j["consistency"] = {{"grid", {10}}};
    REQUIRE_THROWS_WITH(parse_experiment_config(j),
                        Catch::Matchers::ContainsSubstring("grid"));
}

TEST_CASE("config parsing rejects bad values", "[experiment]") {
    json j = minimal_config();
    j["analysis"] = "nope";
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);

    j = minimal_config();
    j.erase("dgp");
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);

    j = minimal_config();
    j["methods"][0].erase("kind");
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);

    j = minimal_config();
    j["methods"] = 5;
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);

    j = minimal_config();
    j["metrics"] = {"max_mse", "accuracy"};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);

    // integrated squared error needs a setting with a closed-form oracle
    j = minimal_config();
    j["dgp"] = {{"setting", "gp-noshift"}};
    j["metrics"] = {"mise"};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);

    j = minimal_config();
    j["analysis"] = "bias-variance";
    j["methods"][0]["kind"] = "magging";
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);

    REQUIRE_THROWS_AS(load_experiment_config("/nonexistent/config.json"), ConfigError);
    const std::string bad_path = "/tmp/maxrm_test_bad.json";
    std::ofstream(bad_path) << "{ not json";
    REQUIRE_THROWS_AS(load_experiment_config(bad_path), ConfigError);
    std::remove(bad_path.c_str());
}

TEST_CASE("aggregation reproduces mean and confidence interval", "[experiment]") {
    ResultTable table;
    table.rows = {{"a", 0, "m", 1.0}, {"a", 1, "m", 2.0}, {"a", 2, "m", 3.0},
                  {"b", 0, "m", 5.0}};
    const std::vector<AggregateRow> agg = table.aggregate();
    REQUIRE(agg.size() == 2);
    REQUIRE(agg[0].method == "a");
    REQUIRE(agg[0].mean == Approx(2.0));
    REQUIRE(agg[0].count == 3);
    // sd = 1, so the half-width is t_{0.975,2} / sqrt(3)
    REQUIRE(agg[0].ci_half.has_value());
    REQUIRE(*agg[0].ci_half == Approx(detail::student_t_q975(2) / std::sqrt(3.0)).margin(1e-9));
    REQUIRE(agg[1].count == 1);
    REQUIRE_FALSE(agg[1].ci_half.has_value());  // one repetition, no spread

    REQUIRE(table.values("a", "m") == std::vector<double>{1.0, 2.0, 3.0});
    REQUIRE(table.values("c", "m").empty());
}

TEST_CASE("repetition runner produces a full deterministic table", "[experiment]") {
    json j = json::parse(R"({
        "dgp": {"setting": "pwl", "n_per_env": 40},
        "methods": [
            {"kind": "rf", "n_trees": 2, "min_leaf": 10},
            {"name": "ph", "kind": "posthoc", "n_trees": 2, "min_leaf": 10}
        ],
        "repetitions": 2,
        "metrics": ["max_mse", "pooled_mse", "mise", "fit_seconds"],
        "seed": 42
    })");
    const ExperimentConfig cfg = parse_experiment_config(j);
    const ResultTable table = run_experiment(cfg);
    REQUIRE(table.errors.empty());
    REQUIRE(table.rows.size() == 2 * 2 * 4);  // methods x reps x metrics
    for (const auto& r : table.rows) REQUIRE(std::isfinite(r.value));

    // the posthoc fits report their claimed risks exactly
    REQUIRE(table.worst_feasibility_gap > -1e30);
    REQUIRE(table.worst_feasibility_gap <= 1e-9);

    const ResultTable again = run_experiment(cfg);
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        if (table.rows[i].metric == "fit_seconds") continue;  // wall clock
        REQUIRE(again.rows[i].method == table.rows[i].method);
        REQUIRE(again.rows[i].value == table.rows[i].value);
    }

    const std::string rows_path = "/tmp/maxrm_test_rows.csv";
    const std::string agg_path = "/tmp/maxrm_test_agg.csv";
    write_rows_csv(table, rows_path);
    write_aggregate_csv(table, agg_path);
    std::ifstream rows_in(rows_path);
    std::string header;
    std::getline(rows_in, header);
    REQUIRE(header == "method,rep,metric,value");
    int lines = 0;
    for (std::string line; std::getline(rows_in, line);) ++lines;
    REQUIRE(lines == static_cast<int>(table.rows.size()));
    std::ifstream agg_in(agg_path);
    std::getline(agg_in, header);
    REQUIRE(header == "method,metric,mean,ci_half");
    std::remove(rows_path.c_str());
    std::remove(agg_path.c_str());
    REQUIRE_THROWS_AS(write_rows_csv(table, "/nonexistent/rows.csv"), DataError);
}

TEST_CASE("per-cell failures are captured, not fatal", "[experiment]") {
    // regret offsets refuse environments smaller than the leaf size, so this
    // method fails every repetition while rf still runs
    json j = json::parse(R"({
        "dgp": {"setting": "pwl", "n_per_env": 1},
        "methods": [
            {"kind": "rf", "n_trees": 1},
            {"name": "ph-reg", "kind": "posthoc", "risk": "reg", "n_trees": 1, "min_leaf": 5}
        ],
        "repetitions": 2,
        "metrics": ["max_mse"],
        "seed": 7
    })");
    const ResultTable table = run_experiment(parse_experiment_config(j));
    REQUIRE(table.errors.size() == 2);
    for (const auto& e : table.errors) {
        REQUIRE(e.method == "ph-reg");
        REQUIRE_FALSE(e.message.empty());
    }
    REQUIRE(table.rows.size() == 2);  // rf rows only
    for (const auto& r : table.rows) REQUIRE(r.method == "rf");
}

TEST_CASE("bias-variance decomposition is internally consistent", "[experiment]") {
    json j = json::parse(R"({
        "analysis": "bias-variance",
        "dgp": {"setting": "pwl", "n_per_env": 60},
        "methods": [{"kind": "rf", "n_trees": 3, "min_leaf": 10}],
        "repetitions": 5,
        "seed": 3
    })");
    const ExperimentConfig cfg = parse_experiment_config(j);
    const BiasVarianceReport rep = run_bias_variance(cfg, 100);
    REQUIRE(rep.reps == 5);
    REQUIRE(rep.n_eval == 100);
    const double r = static_cast<double>(rep.reps);
    // mse = bias^2 + (R-1)/R * variance, pointwise and hence on average
    REQUIRE(rep.tree_mse ==
            Approx(rep.tree_bias2 + (r - 1.0) / r * rep.tree_variance).margin(1e-9));
    REQUIRE(rep.forest_mse ==
            Approx(rep.forest_bias2 + (r - 1.0) / r * rep.forest_variance).margin(1e-9));
    REQUIRE(rep.forest_variance < rep.tree_variance);  // bagging smooths

    const std::string path = "/tmp/maxrm_test_bv.csv";
    write_bias_variance_csv(rep, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "component,bias2,variance,mse");
    std::remove(path.c_str());

    ExperimentConfig wrong = cfg;
    wrong.analysis = AnalysisKind::Methods;
    REQUIRE_THROWS_AS(run_bias_variance(wrong, 10), ConfigError);
}

TEST_CASE("indeterminate leaves are counted and reverted", "[experiment]") {
    json j = json::parse(R"({
        "analysis": "indeterminacy",
        "dgp": {"setting": "pwl", "n_per_env": 60},
        "methods": [{"kind": "posthoc", "n_trees": 2, "min_leaf": 15}],
        "repetitions": 2,
        "seed": 5
    })");
    const ExperimentConfig cfg = parse_experiment_config(j);
    const IndeterminacyReport rep = run_indeterminacy(cfg);
    REQUIRE(rep.rel_change.size() == 2);
    REQUIRE(rep.indeterminate_fraction.size() == 2);
    double mean_rc = 0.0, mean_fr = 0.0;
    for (int r = 0; r < 2; ++r) {
        REQUIRE(rep.rel_change[r] >= 0.0);
        REQUIRE(std::isfinite(rep.rel_change[r]));
        REQUIRE(rep.indeterminate_fraction[r] >= 0.0);
        REQUIRE(rep.indeterminate_fraction[r] <= 1.0);
        mean_rc += rep.rel_change[r];
        mean_fr += rep.indeterminate_fraction[r];
    }
    REQUIRE(rep.mean_rel_change == Approx(mean_rc / 2));
    REQUIRE(rep.mean_fraction == Approx(mean_fr / 2));

    ExperimentConfig wrong = cfg;
    wrong.analysis = AnalysisKind::Methods;
    REQUIRE_THROWS_AS(run_indeterminacy(wrong), ConfigError);
}

TEST_CASE("consistency wrapper honours its settings", "[experiment]") {
    json j = json::parse(R"({
        "analysis": "consistency",
        "dgp": {"setting": "pwl"},
        "repetitions": 1,
        "seed": 9,
        "consistency": {
            "n_grid": [50, 200],
            "reps": 3,
            "partition_n": 200,
            "partition_min_leaf": 60,
            "n_reference": 5000
        }
    })");
    const ExperimentConfig cfg = parse_experiment_config(j);
    const ConsistencyReport rep = run_consistency(cfg);
    REQUIRE(rep.n_grid == std::vector<std::int64_t>{50, 200});
    REQUIRE(rep.median_excess.size() == 2);
    for (const double e : rep.median_excess) REQUIRE(std::isfinite(e));
    REQUIRE(rep.reference_risk > 0.0);

    const std::string path = "/tmp/maxrm_test_cons.csv";
    write_consistency_csv(rep, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "n,median_excess");
    std::remove(path.c_str());

    ExperimentConfig wrong = cfg;
    wrong.analysis = AnalysisKind::Methods;
    wrong.methods.push_back(MethodSpec{.name = "rf", .kind = "rf"});
    REQUIRE_THROWS_AS(run_consistency(wrong), ConfigError);
}
