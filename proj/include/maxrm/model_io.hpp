#pragma once

// Versioned JSON (de)serialization for fitted models: plain forests,
// worst-case-risk forests (with their per-tree diagnostics), and magging
// ensembles. Leaf statistics are not persisted; a loaded model predicts and
// evaluates but cannot be re-solved without refitting.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "maxrm/baselines.hpp"
#include "maxrm/cart.hpp"
#include "maxrm/errors.hpp"
#include "maxrm/experiment.hpp"
#include "maxrm/risk.hpp"
#include "maxrm/strategies.hpp"

namespace maxrm {

inline constexpr const char* kModelFormat = "maxrm-model";
inline constexpr int kModelVersion = 1;

// ============================================================================
// Tree / forest JSON
// ============================================================================

inline nlohmann::json tree_to_json(const Tree& tree) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& n : tree.nodes)
        nodes.push_back({n.feature, n.threshold, n.left, n.right, n.leaf});
    return {{"nodes", std::move(nodes)}, {"leaf_values", tree.leaf_values}};
}

inline Tree tree_from_json(const nlohmann::json& obj) {
    Tree tree;
    try {
        for (const auto& n : obj.at("nodes")) {
            TreeNode node;
            node.feature = n.at(0).get<int>();
            node.threshold = n.at(1).get<double>();
            node.left = n.at(2).get<std::int32_t>();
            node.right = n.at(3).get<std::int32_t>();
            node.leaf = n.at(4).get<std::int32_t>();
            tree.nodes.push_back(node);
        }
        tree.leaf_values = obj.at("leaf_values").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model: malformed tree: ") + e.what());
    }
    if (tree.nodes.empty()) throw DataError("model: tree has no nodes");
    return tree;
}

inline nlohmann::json forest_to_json(const Forest& forest) {
    nlohmann::json trees = nlohmann::json::array();
    for (const Tree& t : forest.trees) trees.push_back(tree_to_json(t));
    return {{"weights", forest.weights}, {"trees", std::move(trees)}};
}

inline Forest forest_from_json(const nlohmann::json& obj) {
    Forest forest;
    try {
        forest.weights = obj.at("weights").get<std::vector<double>>();
        for (const auto& t : obj.at("trees")) forest.trees.push_back(tree_from_json(t));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model: malformed forest: ") + e.what());
    }
    if (forest.trees.empty() || forest.trees.size() != forest.weights.size())
        throw DataError("model: forest trees/weights mismatch");
    return forest;
}

// ============================================================================
// Model files
// ============================================================================

struct ModelFile {
    std::string kind = "rf";  ///< rf | magging | strategy name
    RiskKind risk = RiskKind::Mse;
    int p = 1;
    int n_envs = 1;
    TreeHyperparams hp;
    std::uint64_t seed = 0;
    FittedMethod model;

    std::vector<double> predict(const EnvDataset& ds) const {
        return method_predictions(model, ds);
    }
};

inline void save_model(const std::string& path, const FittedMethod& model,
                       const std::string& kind, RiskKind risk, int p, int n_envs,
                       const TreeHyperparams& hp, std::uint64_t seed) {
    nlohmann::json root{
        {"format", kModelFormat},
        {"version", kModelVersion},
        {"kind", kind},
        {"risk", risk_kind_name(risk)},
        {"p", p},
        {"n_envs", n_envs},
        {"hp",
         {{"min_leaf", hp.min_leaf_size}, {"max_depth", hp.max_depth}, {"m_try", hp.m_try}}},
        {"seed", seed},
    };
    if (const auto* forest = std::get_if<Forest>(&model)) {
        root["forest"] = forest_to_json(*forest);
    } else if (const auto* mrf = std::get_if<MaxRmForest>(&model)) {
        root["forest"] = forest_to_json(mrf->forest);
        root["holdout_fraction"] = mrf->strategy.holdout_fraction;
        root["offsets"] = mrf->offsets;
        nlohmann::json diag{{"tree_claimed_risk", mrf->tree_claimed_risk},
                            {"tree_max_risk", mrf->tree_max_risk},
                            {"tree_active_envs", mrf->tree_active_envs}};
        // NaN marks "no reweighting step"; JSON has no NaN, so omit the key
        if (std::isfinite(mrf->holdout_max_risk))
            diag["holdout_max_risk"] = mrf->holdout_max_risk;
        root["diagnostics"] = std::move(diag);
    } else if (const auto* mag = std::get_if<MaggingModel>(&model)) {
        nlohmann::json forests = nlohmann::json::array();
        for (const Forest& f : mag->forests) forests.push_back(forest_to_json(f));
        root["forests"] = std::move(forests);
        root["q"] = mag->q;
        root["diagnostics"] = {{"max_in_sample_risk", mag->max_in_sample_risk},
                               {"iterations", mag->iterations},
                               {"converged", mag->converged}};
    }
    std::ofstream out(path);
    if (!out) throw DataError("model: cannot write '" + path + "'");
    out << root.dump(1, '\t') << '\n';
    if (!out) throw DataError("model: write failure on '" + path + "'");
}

inline ModelFile load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("model: cannot open '" + path + "'");
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("model: invalid JSON in '" + path + "': " + e.what());
    }
    try {
        if (root.value("format", "") != kModelFormat)
            throw DataError("model: '" + path + "' is not a model file");
        if (root.value("version", -1) != kModelVersion)
            throw DataError("model: unsupported version in '" + path + "'");
        ModelFile file;
        file.kind = root.at("kind").get<std::string>();
        file.risk = parse_risk_kind(root.at("risk").get<std::string>());
        file.p = root.at("p").get<int>();
        file.n_envs = root.at("n_envs").get<int>();
        const auto& hp = root.at("hp");
        file.hp.min_leaf_size = hp.at("min_leaf").get<std::int64_t>();
        file.hp.max_depth = hp.at("max_depth").get<int>();
        file.hp.m_try = hp.at("m_try").get<int>();
        file.seed = root.at("seed").get<std::uint64_t>();

        if (file.kind == "rf") {
            file.model = forest_from_json(root.at("forest"));
        } else if (file.kind == "magging") {
            MaggingModel mag;
            mag.risk_kind = file.risk;
            for (const auto& f : root.at("forests"))
                mag.forests.push_back(forest_from_json(f));
            mag.q = root.at("q").get<std::vector<double>>();
            if (mag.q.size() != mag.forests.size())
                throw DataError("model: magging q/forest size mismatch");
            if (root.contains("diagnostics")) {
                const auto& d = root.at("diagnostics");
                mag.max_in_sample_risk = d.value("max_in_sample_risk", mag.max_in_sample_risk);
                mag.iterations = d.value("iterations", 0);
                mag.converged = d.value("converged", false);
            }
            file.model = std::move(mag);
        } else {
            MaxRmForest mrf;
            mrf.strategy = parse_strategy(file.kind);
            mrf.strategy.holdout_fraction =
                root.value("holdout_fraction", mrf.strategy.holdout_fraction);
            mrf.risk_kind = file.risk;
            mrf.hp = file.hp;
            mrf.seed = file.seed;
            mrf.forest = forest_from_json(root.at("forest"));
            if (root.contains("offsets"))
                mrf.offsets = root.at("offsets").get<std::vector<double>>();
            if (root.contains("diagnostics")) {
                const auto& d = root.at("diagnostics");
                mrf.tree_claimed_risk =
                    d.value("tree_claimed_risk", std::vector<double>{});
                mrf.tree_max_risk = d.value("tree_max_risk", std::vector<double>{});
                mrf.tree_active_envs =
                    d.value("tree_active_envs", std::vector<std::vector<int>>{});
                if (d.contains("holdout_max_risk") && d.at("holdout_max_risk").is_number())
                    mrf.holdout_max_risk = d.at("holdout_max_risk").get<double>();
            }
            file.model = std::move(mrf);
        }
        return file;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("model: malformed '" + path + "': " + e.what());
    }
}

}  // namespace maxrm
