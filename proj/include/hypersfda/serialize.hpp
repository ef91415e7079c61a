#pragma once

// JSON views of configuration, metrics and (for debugging) hypergraphs.

#include "hypersfda/hypergraph.hpp"
#include "hypersfda/trainer.hpp"

#include "json.hpp"

#include <string>

namespace hypersfda {

using json = nlohmann::ordered_json;

inline json to_json(const AdaptConfig& c) {
    return json{{"k", c.k},
                {"t_in", c.t_in},
                {"alpha", c.alpha},
                {"h", c.h},
                {"gamma", c.gamma},
                {"delta", c.delta},
                {"eta", c.eta},
                {"beta", c.beta},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"momentum", c.momentum},
                {"epochs", c.epochs},
                {"m_prime", c.m_prime},
                {"seed", c.seed},
                {"open_set", c.open_set},
                {"self_loops", c.self_loops},
                {"high_order", c.high_order},
                {"eval_every", c.eval_every}};
}

/// Overlays the fields present in `j` onto `base`. Unknown keys are rejected.
inline AdaptConfig config_from_json(const json& j, AdaptConfig base = {}) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        const json& v = it.value();
        try {
            if (key == "k") base.k = v.get<int>();
            else if (key == "t_in") base.t_in = v.get<int>();
            else if (key == "alpha") base.alpha = v.get<double>();
            else if (key == "h") base.h = v.get<int>();
            else if (key == "gamma") base.gamma = v.get<double>();
            else if (key == "delta") base.delta = v.get<double>();
            else if (key == "eta") base.eta = v.get<double>();
            else if (key == "beta") base.beta = v.get<double>();
            else if (key == "batch_size") base.batch_size = v.get<int>();
            else if (key == "lr") base.lr = v.get<double>();
            else if (key == "momentum") base.momentum = v.get<double>();
            else if (key == "epochs") base.epochs = v.get<int>();
            else if (key == "m_prime") base.m_prime = v.get<int>();
            else if (key == "seed") base.seed = v.get<std::uint64_t>();
            else if (key == "open_set") base.open_set = v.get<bool>();
            else if (key == "self_loops") base.self_loops = v.get<bool>();
            else if (key == "high_order") base.high_order = v.get<bool>();
            else if (key == "eval_every") base.eval_every = v.get<int>();
            else throw ConfigError("unknown config field '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config field '" + key + "': " + e.what());
        }
    }
    return base;
}

inline json to_json(const MetricsRecord& r) {
    json j;
    j["iter"] = r.iter;
    if (r.loss) {
        j["total"] = r.loss->total;
        j["l_ada_pull"] = r.loss->l_ada_pull;
        j["l_ada_push"] = r.loss->l_ada_push;
        j["l_reg"] = r.loss->l_reg;
        j["lambda"] = r.loss->lambda_used;
    } else {
        j["total"] = nullptr;
        j["l_ada_pull"] = nullptr;
        j["l_ada_push"] = nullptr;
        j["l_reg"] = nullptr;
        j["lambda"] = nullptr;
    }
    j["acc"] = r.acc ? json(*r.acc) : json(nullptr);
    j["neighbor_agreement"] = r.neighbor_agreement ? json(*r.neighbor_agreement) : json(nullptr);
    if (!r.misleading_ratio.empty()) j["misleading_ratio"] = r.misleading_ratio;
    if (r.open_set) j["open_set"] = json{{"known", r.open_set->known}, {"unknown", r.open_set->unknown}};
    if (r.final) j["final"] = true;
    return j;
}

/// Debug dump: {nodes, edges:[{anchor, neighbors, affinity}], selfloops:[...]}.
inline json to_json(const Hypergraph& g) {
    json edges = json::array();
    for (const auto& e : g.merged) {
        json aff = json::array();
        for (Index j = 0; j < e.affinity.size(); ++j) aff.push_back(e.affinity(j));
        edges.push_back(json{{"anchor", e.anchor}, {"neighbors", e.neighbors}, {"affinity", aff}});
    }
    json loops = json::array();
    for (Index i = 0; i < g.self_loops.values.size(); ++i) loops.push_back(g.self_loops.values(i));
    return json{{"nodes", static_cast<Index>(g.merged.size())}, {"edges", edges}, {"selfloops", loops}};
}

}  // namespace hypersfda
