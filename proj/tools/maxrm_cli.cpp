// Command-line front end: dataset simulation, model fitting/serialization,
// evaluation, and one-command benchmark runs with CSV and SVG output.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 solver error.
// The MAXRM_LOG environment variable (error|warn|info|debug) controls log
// verbosity on stderr.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "maxrm/maxrm.hpp"

namespace {

using namespace maxrm;

std::string iso_timestamp() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

std::string brief(double v) {
    std::ostringstream os;
    os.precision(5);
    os << v;
    return os.str();
}

// ----------------------------------------------------------------------------
// simulate
// ----------------------------------------------------------------------------

struct SimulateArgs {
    std::string setting;
    std::string out;
    std::uint64_t seed = 1;
    std::uint64_t param_seed = 0;
    std::int64_t n_per_env = 0;  // 0 keeps the setting default
    int n_envs = 0;
    int p = 0;
    double noise_sd = -1.0;
    double lengthscale = -1.0;
};

int run_simulate(const SimulateArgs& a) {
    DgpConfig cfg = DgpConfig::defaults_for(parse_dgp_setting(a.setting));
    cfg.seed = a.seed;
    cfg.param_seed = a.param_seed;
    if (a.n_per_env > 0) cfg.n_per_env = a.n_per_env;
    if (a.n_envs > 0) cfg.n_envs = a.n_envs;
    if (a.p > 0) cfg.p = a.p;
    if (a.noise_sd >= 0.0) cfg.noise_sd = a.noise_sd;
    if (a.lengthscale > 0.0) cfg.gp_lengthscale = a.lengthscale;
    cfg.validate();

    std::filesystem::create_directories(a.out);
    const SimData sim = gen_dataset(cfg);
    const std::string train_path = (std::filesystem::path(a.out) / "train.csv").string();
    const std::string test_path = (std::filesystem::path(a.out) / "test.csv").string();
    save_csv(sim.train, train_path);
    save_csv(sim.test, test_path);

    const auto describe = [](const EnvDataset& ds) {
        std::ostringstream os;
        os << ds.size() << " rows, " << ds.n_envs << " environments (";
        for (int e = 0; e < ds.n_envs; ++e) os << (e ? "/" : "") << ds.env_counts[e];
        os << ")";
        return os.str();
    };
    std::cout << "setting " << dgp_setting_name(cfg.setting) << ", seed " << cfg.seed << "\n"
              << "train " << train_path << ": " << describe(sim.train) << "\n"
              << "test  " << test_path << ": " << describe(sim.test) << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// fit
// ----------------------------------------------------------------------------

struct FitArgs {
    std::string data;
    std::string out;
    std::string report;
    std::string kind = "posthoc";
    std::string risk = "mse";
    std::string solver;
    int n_trees = 100;
    std::int64_t min_leaf = 15;
    int max_depth = -1;
    int m_try = 0;
    double gamma = -1.0;
    double delta = -1.0;
    int t_max = 0;
    int patience = 0;
    int block_size = 0;
    double holdout_fraction = 0.3;
    bool scale_min_leaf = false;
    std::uint64_t seed = 1;
    int workers = 1;
};

MethodSpec method_from_fit_args(const FitArgs& a) {
    MethodSpec m;
    m.kind = a.kind;
    m.name = a.kind;
    m.risk = parse_risk_kind(a.risk);
    m.n_trees = a.n_trees;
    m.hp.min_leaf_size = a.min_leaf;
    m.hp.max_depth = a.max_depth;
    m.hp.m_try = a.m_try;
    if (!a.solver.empty())
        m.solver = SolverConfig::defaults_for(parse_solver_method(a.solver));
    if (a.gamma > 0.0) m.solver.gamma = a.gamma;
    if (a.delta > 0.0) m.solver.delta = a.delta;
    if (a.t_max > 0) m.solver.t_max = a.t_max;
    if (a.patience > 0) m.solver.patience = a.patience;
    if (a.block_size > 0) m.solver.block_size = a.block_size;
    m.holdout_fraction = a.holdout_fraction;
    m.scale_min_leaf = a.scale_min_leaf;
    return m;
}

/// In-sample worst-case risk with offsets derived exactly as `eval` derives
/// them, so evaluating a model on its training file reproduces this number.
double in_sample_max_risk(const FittedMethod& model, const EnvDataset& ds, RiskKind risk,
                          TreeHyperparams hp, std::uint64_t seed) {
    hp.seed = derive_seed(seed, kTagOffsets);
    const RiskSpec spec = risk_offsets(ds, risk, hp);
    return prediction_risks(ds, method_predictions(model, ds), spec).z;
}

int run_fit(const FitArgs& a) {
    const EnvDataset ds = load_csv(a.data);
    MethodSpec m = method_from_fit_args(a);
    m.validate(ds.p);

    const FittedMethod model = fit_method(m, ds, a.seed, a.workers);
    save_model(a.out, model, m.kind, m.risk, ds.p, ds.n_envs, m.hp, a.seed);

    nlohmann::json report{
        {"kind", m.kind},
        {"risk", risk_kind_name(m.risk)},
        {"n_trees", m.n_trees},
        {"seed", a.seed},
        {"in_sample_max_risk", in_sample_max_risk(model, ds, m.risk, m.hp, a.seed)},
    };
    if (const auto* mrf = std::get_if<MaxRmForest>(&model)) {
        nlohmann::json trees = nlohmann::json::array();
        for (int b = 0; b < mrf->forest.n_trees(); ++b)
            trees.push_back({{"z", mrf->tree_max_risk[b]},
                             {"claimed_z", mrf->tree_claimed_risk[b]},
                             {"active_envs", mrf->tree_active_envs[b]}});
        report["per_tree"] = std::move(trees);
        if (mrf->strategy.reweight) report["holdout_max_risk"] = mrf->holdout_max_risk;
    } else if (const auto* mag = std::get_if<MaggingModel>(&model)) {
        report["q"] = mag->q;
        report["max_in_sample_weight_risk"] = mag->max_in_sample_risk;
    }
    const std::string report_path = a.report.empty() ? a.out + ".report.json" : a.report;
    std::ofstream rep(report_path);
    if (!rep) throw DataError("fit: cannot write '" + report_path + "'");
    rep << report.dump(1, '\t') << '\n';

    std::cout << "fit " << m.kind << " (" << risk_kind_name(m.risk) << ", " << m.n_trees
              << " trees) on " << ds.size() << " rows\n"
              << "in-sample max " << risk_kind_name(m.risk) << " risk: "
              << brief(report["in_sample_max_risk"].get<double>()) << "\n"
              << "model:  " << a.out << "\nreport: " << report_path << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------------

struct EvalArgs {
    std::string model;
    std::string data;
    std::string out;
    std::vector<std::string> metrics;
};

int run_eval(const EvalArgs& a) {
    const ModelFile file = load_model(a.model);
    const EnvDataset ds = load_csv(a.data);
    if (ds.p != file.p)
        throw DataError("eval: model expects " + std::to_string(file.p) +
                        " covariates, data has " + std::to_string(ds.p));

    std::vector<std::string> metric_names = a.metrics;
    if (metric_names.empty())
        metric_names = {std::string("max_") + risk_kind_name(file.risk), "pooled_mse"};
    std::vector<RiskKind> kinds;
    bool want_pooled = false;
    for (const auto& name : metric_names) {
        if (name == "pooled_mse") want_pooled = true;
        else if (name.starts_with("max_")) kinds.push_back(parse_risk_kind(name.substr(4)));
        else throw ConfigError("eval: unknown metric '" + name + "'");
    }

    TreeHyperparams eval_hp = file.hp;
    eval_hp.seed = derive_seed(file.seed, kTagOffsets);
    const std::vector<double> preds = file.predict(ds);
    const Metrics mets = evaluate(preds, ds, kinds, eval_hp);
    for (const auto& w : mets.warnings) log_warn(w);

    std::ofstream out(a.out);
    if (!out) throw DataError("eval: cannot write '" + a.out + "'");
    out << "metric,value\n";
    for (const auto& set : mets.risks) {
        out << "max_" << risk_kind_name(set.kind) << ',' << format_double(set.max) << '\n';
        for (std::size_t e = 0; e < set.env_risks.size(); ++e)
            out << risk_kind_name(set.kind) << "_env" << e << ','
                << format_double(set.env_risks[e]) << '\n';
    }
    if (want_pooled) out << "pooled_mse," << format_double(mets.pooled_mse) << '\n';
    if (!out) throw DataError("eval: write failure on '" + a.out + "'");

    for (const auto& set : mets.risks)
        std::cout << "max_" << risk_kind_name(set.kind) << " = " << brief(set.max) << "\n";
    if (want_pooled) std::cout << "pooled_mse = " << brief(mets.pooled_mse) << "\n";
    std::cout << "metrics: " << a.out << "\n";
    return 0;
}

// ----------------------------------------------------------------------------
// benchmark
// ----------------------------------------------------------------------------

struct BenchmarkArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;  // 0 keeps the config's seed
    int workers = 0;
};

void write_meta(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                const std::string& config_path, const ResultTable* table) {
    nlohmann::json meta{
        {"timestamp", iso_timestamp()},
        {"config", config_path},
        {"seed", cfg.seed},
        {"repetitions", cfg.repetitions},
        {"note", cfg.note},
    };
    if (table) {
        nlohmann::json errors = nlohmann::json::array();
        for (const auto& e : table->errors)
            errors.push_back({{"method", e.method}, {"rep", e.rep}, {"message", e.message}});
        meta["cell_errors"] = std::move(errors);
        if (std::isfinite(table->worst_feasibility_gap))
            meta["worst_feasibility_gap"] = table->worst_feasibility_gap;
    }
    std::ofstream out(dir / "run_meta.json");
    if (!out) throw DataError("benchmark: cannot write metadata in '" + dir.string() + "'");
    out << meta.dump(1, '\t') << '\n';
}

void write_method_plots(const ResultTable& table, const ExperimentConfig& cfg,
                        const std::filesystem::path& dir) {
    const auto agg = table.aggregate();
    for (const auto& metric : cfg.metrics) {
        std::vector<std::string> labels;
        std::vector<double> means, errs;
        for (const auto& a : agg) {
            if (a.metric != metric) continue;
            labels.push_back(a.method);
            means.push_back(a.mean);
            errs.push_back(a.ci_half.value_or(0.0));
        }
        if (labels.empty()) continue;
        write_bar_svg((dir / (metric + ".svg")).string(),
                      metric + " on " + dgp_setting_name(cfg.dgp.setting), metric, labels,
                      means, errs);
    }
}

int run_benchmark(const BenchmarkArgs& a) {
    ExperimentConfig cfg = load_experiment_config(a.config);
    if (a.seed != 0) cfg.seed = a.seed;
    if (a.workers > 0) cfg.workers = a.workers;

    std::filesystem::path dir = a.out.empty() ? cfg.out_dir : a.out;
    if (dir.empty())
        dir = std::filesystem::path("results") / std::filesystem::path(a.config).stem();
    std::filesystem::create_directories(dir);

    switch (cfg.analysis) {
        case AnalysisKind::Methods: {
            const ResultTable table = run_experiment(cfg);
            write_rows_csv(table, (dir / "per_rep.csv").string());
            write_aggregate_csv(table, (dir / "aggregate.csv").string());
            write_method_plots(table, cfg, dir);
            write_meta(dir, cfg, a.config, &table);
            for (const auto& a : table.aggregate()) {
                std::cout << a.method << " " << a.metric << ": " << brief(a.mean);
                if (a.ci_half) std::cout << " +/- " << brief(*a.ci_half);
                std::cout << "\n";
            }
            for (const auto& e : table.errors)
                log_warn("cell failed: method '" + e.method + "', rep " +
                         std::to_string(e.rep) + ": " + e.message);
            std::cout << "results: " << dir.string() << "\n";
            return 0;  // partial failures are warnings, not a failed run
        }
        case AnalysisKind::BiasVariance: {
            const BiasVarianceReport rep = run_bias_variance(cfg);
            write_bias_variance_csv(rep, (dir / "bias_variance.csv").string());
            write_bar_svg((dir / "bias_variance.svg").string(),
                          "bias-variance decomposition", "value",
                          {"tree bias^2", "tree var", "forest bias^2", "forest var"},
                          {rep.tree_bias2, rep.tree_variance, rep.forest_bias2,
                           rep.forest_variance},
                          {});
            write_meta(dir, cfg, a.config, nullptr);
            std::cout << "tree:   bias^2 " << brief(rep.tree_bias2) << ", variance "
                      << brief(rep.tree_variance) << ", mse " << brief(rep.tree_mse) << "\n"
                      << "forest: bias^2 " << brief(rep.forest_bias2) << ", variance "
                      << brief(rep.forest_variance) << ", mse " << brief(rep.forest_mse)
                      << "\nresults: " << dir.string() << "\n";
            return 0;
        }
        case AnalysisKind::Indeterminacy: {
            const IndeterminacyReport rep = run_indeterminacy(cfg);
            write_indeterminacy_csv(rep, (dir / "indeterminacy.csv").string());
            write_meta(dir, cfg, a.config, nullptr);
            std::cout << "mean |max-MSE change| when reverting: "
                      << brief(100.0 * rep.mean_rel_change) << "%\n"
                      << "mean indeterminate-leaf fraction:     "
                      << brief(100.0 * rep.mean_fraction) << "%\nresults: " << dir.string()
                      << "\n";
            return 0;
        }
        case AnalysisKind::Consistency: {
            const ConsistencyReport rep = run_consistency(cfg);
            write_consistency_csv(rep, (dir / "consistency.csv").string());
            SvgSeries series;
            series.label = "median excess";
            for (std::size_t i = 0; i < rep.n_grid.size(); ++i) {
                series.x.push_back(static_cast<double>(rep.n_grid[i]));
                series.y.push_back(rep.median_excess[i]);
            }
            write_line_svg((dir / "consistency.svg").string(),
                           "posthoc excess worst-case risk vs sample size", "rows per env",
                           "median excess risk", {series});
            write_meta(dir, cfg, a.config, nullptr);
            for (std::size_t i = 0; i < rep.n_grid.size(); ++i)
                std::cout << "n = " << rep.n_grid[i] << ": median excess "
                          << brief(rep.median_excess[i]) << "\n";
            std::cout << (rep.non_increasing ? "sequence is non-increasing"
                                             : "sequence is NOT non-increasing")
                      << "\nresults: " << dir.string() << "\n";
            return 0;
        }
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "maxrm: regression forests minimizing the worst-case risk across environments"};
    app.require_subcommand(1);

    SimulateArgs sim;
    CLI::App* c_sim = app.add_subcommand("simulate", "Generate train/test CSVs from a DGP");
    c_sim->add_option("--setting", sim.setting,
                      "DGP setting: pwl|gp-noshift|gp-betashift|gp-identical|mixture")
        ->required();
    c_sim->add_option("--seed", sim.seed, "Master seed");
    c_sim->add_option("--param-seed", sim.param_seed,
                      "Stream for per-env fixed parameters (0 = derive from seed)");
    c_sim->add_option("--out", sim.out, "Output directory")->required();
    c_sim->add_option("--n-per-env", sim.n_per_env, "Rows per environment");
    c_sim->add_option("--n-envs", sim.n_envs, "Number of environments");
    c_sim->add_option("--p", sim.p, "Covariate dimension");
    c_sim->add_option("--noise-sd", sim.noise_sd, "Noise standard deviation");
    c_sim->add_option("--lengthscale", sim.lengthscale, "GP kernel lengthscale");

    FitArgs fit;
    CLI::App* c_fit = app.add_subcommand("fit", "Fit a model on an environment CSV");
    c_fit->add_option("--data", fit.data, "Training CSV (x1..xp,y,env)")->required();
    c_fit->add_option("--out", fit.out, "Model JSON path")->required();
    c_fit->add_option("--report", fit.report, "Fit report path (default <out>.report.json)");
    c_fit->add_option("--strategy", fit.kind,
                      "rf | magging | posthoc|local|global|global-nondfs|weights (with "
                      "optional -w suffix)");
    c_fit->add_option("--risk", fit.risk, "Risk kind: mse|nrw|reg");
    c_fit->add_option("--solver", fit.solver, "Leaf-value solver: eg|bcd");
    c_fit->add_option("--trees", fit.n_trees, "Number of trees");
    c_fit->add_option("--min-leaf", fit.min_leaf, "Minimum rows per leaf");
    c_fit->add_option("--max-depth", fit.max_depth, "Maximum depth (-1 = unlimited)");
    c_fit->add_option("--m-try", fit.m_try, "Features per split (0 = all)");
    c_fit->add_option("--gamma", fit.gamma, "Solver step size");
    c_fit->add_option("--delta", fit.delta, "Solver improvement tolerance");
    c_fit->add_option("--t-max", fit.t_max, "Solver iteration cap");
    c_fit->add_option("--patience", fit.patience, "Solver early-stop patience");
    c_fit->add_option("--block-size", fit.block_size, "BCD block size");
    c_fit->add_option("--holdout-fraction", fit.holdout_fraction,
                      "Holdout share for tree reweighting");
    c_fit->add_flag("--scale-min-leaf", fit.scale_min_leaf,
                    "magging: divide min leaf size by the environment count");
    c_fit->add_option("--seed", fit.seed, "Master seed");
    c_fit->add_option("--workers", fit.workers, "Worker threads");

    EvalArgs ev;
    CLI::App* c_eval = app.add_subcommand("eval", "Evaluate a saved model on a CSV");
    c_eval->add_option("--model", ev.model, "Model JSON path")->required();
    c_eval->add_option("--data", ev.data, "Evaluation CSV")->required();
    c_eval->add_option("--out", ev.out, "Metrics CSV path")->required();
    c_eval->add_option("--metrics", ev.metrics,
                       "Metric names (max_mse, max_nrw, max_reg, pooled_mse)");

    BenchmarkArgs bench;
    CLI::App* c_bench =
        app.add_subcommand("benchmark", "Run an experiment config end to end");
    c_bench->add_option("config", bench.config, "ExperimentConfig JSON path")->required();
    c_bench->add_option("--out", bench.out, "Output directory");
    c_bench->add_option("--seed", bench.seed, "Override the config's master seed");
    c_bench->add_option("--workers", bench.workers, "Override worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (c_sim->parsed()) return run_simulate(sim);
        if (c_fit->parsed()) return run_fit(fit);
        if (c_eval->parsed()) return run_eval(ev);
        if (c_bench->parsed()) return run_benchmark(bench);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const SolverError& e) {
        std::fprintf(stderr, "solver error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
