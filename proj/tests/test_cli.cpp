#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "maxrm/csv.hpp"

using namespace maxrm;
using Catch::Approx;

namespace {

namespace fs = std::filesystem;

struct CliResult {
    int exit_code = -1;
    std::string output;  ///< stdout and stderr combined
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(MAXRM_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    CliResult res;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (std::fgets(buf.data(), buf.size(), pipe)) res.output += buf.data();
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("/tmp") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

/// Value of a `metric,value` CSV row.
double metric_value(const fs::path& csv, const std::string& name) {
    std::ifstream in(csv);
    for (std::string line; std::getline(in, line);) {
        if (line.rfind(name + ",", 0) == 0) return std::stod(line.substr(name.size() + 1));
    }
    FAIL("metric '" << name << "' not found in " << csv.string());
    return 0.0;
}

}  // namespace

TEST_CASE("simulate writes deterministic csv pairs", "[cli]") {
    TempDir a("maxrm_cli_sim_a"), b("maxrm_cli_sim_b");
    const CliResult ra =
        run_cli("simulate --setting pwl --seed 5 --n-per-env 20 --out " + a.path.string());
    REQUIRE(ra.exit_code == 0);
    REQUIRE(ra.output.find("train") != std::string::npos);

    const CliResult rb =
        run_cli("simulate --setting pwl --seed 5 --n-per-env 20 --out " + b.path.string());
    REQUIRE(rb.exit_code == 0);
    REQUIRE(slurp(a.path / "train.csv") == slurp(b.path / "train.csv"));
    REQUIRE(slurp(a.path / "test.csv") == slurp(b.path / "test.csv"));

    const EnvDataset train = load_csv((a.path / "train.csv").string());
    REQUIRE(train.size() == 60);
    REQUIRE(train.n_envs == 3);
    std::ifstream in(a.path / "train.csv");
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "x1,y,env");
}

TEST_CASE("simulate rejects unknown settings", "[cli]") {
    const CliResult r = run_cli("simulate --setting nope --out /tmp/maxrm_cli_nope");
    REQUIRE(r.exit_code == 1);
    REQUIRE(r.output.find("config error") != std::string::npos);
}

TEST_CASE("eval on the training file reproduces the fit report", "[cli]") {
    TempDir dir("maxrm_cli_fit");
    REQUIRE(run_cli("simulate --setting pwl --seed 7 --n-per-env 40 --out " +
                    dir.path.string())
                .exit_code == 0);
    const std::string train = (dir.path / "train.csv").string();
    const std::string model = (dir.path / "model.json").string();

    const CliResult fit = run_cli("fit --data " + train + " --out " + model +
                                  " --strategy posthoc --trees 3 --min-leaf 10 --seed 3");
    REQUIRE(fit.exit_code == 0);
    REQUIRE(fs::exists(model));
    REQUIRE(fs::exists(model + ".report.json"));

    nlohmann::json report;
    std::ifstream(model + ".report.json") >> report;
    const double claimed = report.at("in_sample_max_risk").get<double>();

    const std::string metrics = (dir.path / "metrics.csv").string();
    const CliResult ev =
        run_cli("eval --model " + model + " --data " + train + " --out " + metrics);
    REQUIRE(ev.exit_code == 0);
    REQUIRE(metric_value(metrics, "max_mse") == Approx(claimed).margin(1e-9));
}

TEST_CASE("fit reports data errors with exit code 2", "[cli]") {
    TempDir dir("maxrm_cli_tiny");
    REQUIRE(run_cli("simulate --setting pwl --seed 2 --n-per-env 1 --out " +
                    dir.path.string())
                .exit_code == 0);
    const CliResult r = run_cli("fit --data " + (dir.path / "train.csv").string() +
                                " --out " + (dir.path / "m.json").string() +
                                " --risk reg --min-leaf 5 --trees 1");
    REQUIRE(r.exit_code == 2);
    REQUIRE(r.output.find("data error") != std::string::npos);
}

TEST_CASE("eval rejects covariate-dimension mismatches", "[cli]") {
    TempDir dir("maxrm_cli_mismatch");
    REQUIRE(run_cli("simulate --setting pwl --seed 4 --n-per-env 30 --out " +
                    dir.path.string() + "/pwl")
                .exit_code == 0);
    REQUIRE(run_cli("simulate --setting gp-noshift --seed 4 --n-per-env 20 --n-envs 2 "
                    "--p 3 --out " +
                    dir.path.string() + "/gp")
                .exit_code == 0);
    const std::string model = (dir.path / "m.json").string();
    REQUIRE(run_cli("fit --data " + dir.path.string() + "/pwl/train.csv --out " + model +
                    " --strategy rf --trees 1")
                .exit_code == 0);
    const CliResult r = run_cli("eval --model " + model + " --data " + dir.path.string() +
                                "/gp/train.csv --out " + (dir.path / "x.csv").string());
    REQUIRE(r.exit_code == 2);
}

TEST_CASE("benchmark produces tables, plots, and metadata", "[cli]") {
    TempDir dir("maxrm_cli_bench");
    const fs::path cfg_path = dir.path / "config.json";
    std::ofstream(cfg_path) << R"({
        "_note": "cli smoke test",
        "dgp": {"setting": "pwl", "n_per_env": 30},
        "methods": [
            {"kind": "rf", "n_trees": 2, "min_leaf": 10},
            {"kind": "posthoc", "n_trees": 2, "min_leaf": 10}
        ],
        "repetitions": 2,
        "metrics": ["max_mse", "pooled_mse"],
        "seed": 11
    })";
    const fs::path out = dir.path / "results";
    const CliResult r = run_cli("benchmark " + cfg_path.string() + " --out " + out.string());
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.output.find("results:") != std::string::npos);
    REQUIRE(fs::exists(out / "per_rep.csv"));
    REQUIRE(fs::exists(out / "aggregate.csv"));
    REQUIRE(fs::exists(out / "run_meta.json"));
    REQUIRE(fs::exists(out / "max_mse.svg"));
    REQUIRE(fs::exists(out / "pooled_mse.svg"));

    nlohmann::json meta;
    std::ifstream(out / "run_meta.json") >> meta;
    REQUIRE(meta.at("seed").get<std::uint64_t>() == 11);
    REQUIRE(meta.at("cell_errors").empty());
    REQUIRE(meta.at("worst_feasibility_gap").get<double>() <= 1e-9);
}

TEST_CASE("usage errors exit with code 1", "[cli]") {
    REQUIRE(run_cli("").exit_code == 1);
    REQUIRE(run_cli("frobnicate").exit_code == 1);
    REQUIRE(run_cli("benchmark /nonexistent/config.json").exit_code == 1);
    REQUIRE(run_cli("--help").exit_code == 0);
}
