#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "maxrm/dgp.hpp"
#include "maxrm/experiment.hpp"
#include "maxrm/model_io.hpp"

using namespace maxrm;
using Catch::Approx;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(std::string p) : path(std::move(p)) {}
    ~TempFile() { std::remove(path.c_str()); }
};

SimData pwl_sim(std::int64_t n_per_env, std::uint64_t seed) {
    DgpConfig cfg = DgpConfig::defaults_for(DgpSetting::PiecewiseLinear);
    cfg.n_per_env = n_per_env;
    cfg.seed = seed;
    return gen_dataset(cfg);
}

}  // namespace

TEST_CASE("saved models predict identically after loading", "[model_io]") {
    const SimData sim = pwl_sim(50, 11);
    TreeHyperparams hp;
    hp.min_leaf_size = 10;

    const struct {
        const char* kind;
        const char* file;
    } cases[] = {
        {"rf", "/tmp/maxrm_test_rf.json"},
        {"magging", "/tmp/maxrm_test_mag.json"},
        {"posthoc", "/tmp/maxrm_test_ph.json"},
        {"posthoc-w", "/tmp/maxrm_test_phw.json"},
    };
    for (const auto& c : cases) {
        MethodSpec m;
        m.name = c.kind;
        m.kind = c.kind;
        m.hp = hp;
        m.n_trees = 3;
        const FittedMethod model = fit_method(m, sim.train, 77);
        const std::vector<double> before = method_predictions(model, sim.test);

        TempFile tmp(c.file);
        save_model(tmp.path, model, c.kind, m.risk, sim.train.p, sim.train.n_envs, hp, 77);
        const ModelFile loaded = load_model(tmp.path);
        REQUIRE(loaded.kind == c.kind);
        REQUIRE(loaded.risk == RiskKind::Mse);
        REQUIRE(loaded.p == 1);
        REQUIRE(loaded.n_envs == 3);
        REQUIRE(loaded.hp.min_leaf_size == 10);
        REQUIRE(loaded.seed == 77);

        const std::vector<double> after = loaded.predict(sim.test);
        REQUIRE(after.size() == before.size());
        for (std::size_t i = 0; i < before.size(); ++i)
            REQUIRE(after[i] == before[i]);  // bit-exact round trip
    }
}

TEST_CASE("worst-case forest diagnostics survive the round trip", "[model_io]") {
    const SimData sim = pwl_sim(50, 13);
    MethodSpec m;
    m.name = "posthoc";
    m.kind = "posthoc";
    m.hp.min_leaf_size = 10;
    m.n_trees = 2;
    const FittedMethod model = fit_method(m, sim.train, 5);
    const auto& mrf = std::get<MaxRmForest>(model);

    TempFile tmp("/tmp/maxrm_test_diag.json");
    save_model(tmp.path, model, m.kind, m.risk, sim.train.p, sim.train.n_envs, m.hp, 5);
    const ModelFile loaded = load_model(tmp.path);
    const auto& back = std::get<MaxRmForest>(loaded.model);
    REQUIRE(back.tree_claimed_risk == mrf.tree_claimed_risk);
    REQUIRE(back.tree_max_risk == mrf.tree_max_risk);
    REQUIRE(back.tree_active_envs == mrf.tree_active_envs);
    REQUIRE(back.offsets == mrf.offsets);
    REQUIRE(back.forest.weights == mrf.forest.weights);
}

TEST_CASE("model files reject foreign or stale content", "[model_io]") {
    REQUIRE_THROWS_AS(load_model("/nonexistent/model.json"), DataError);

    TempFile bad("/tmp/maxrm_test_badmodel.json");
    std::ofstream(bad.path) << "{ garbage";
    REQUIRE_THROWS_AS(load_model(bad.path), DataError);

    std::ofstream(bad.path) << R"({"format": "something-else", "version": 1})";
    REQUIRE_THROWS_AS(load_model(bad.path), DataError);

    std::ofstream(bad.path) << R"({"format": "maxrm-model", "version": 999})";
    REQUIRE_THROWS_AS(load_model(bad.path), DataError);

    // right header, missing body
    std::ofstream(bad.path) << R"({"format": "maxrm-model", "version": 1, "kind": "rf"})";
    REQUIRE_THROWS_AS(load_model(bad.path), DataError);
}
