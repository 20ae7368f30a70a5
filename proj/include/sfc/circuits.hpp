#pragma once

// Circuit extraction by thresholding, faithfulness with free sites, overlap
// metrics (IoU / recall), and feature-activation statistics.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attribution.hpp"
#include "parallel.hpp"
#include "sae.hpp"

namespace sfc {

struct Circuit {
    std::vector<AttributionScore> nodes;  // sorted by coord for diffability
    std::vector<EdgeScore> edges;         // sorted by (up, down)
    double node_threshold = 0.0;
    double edge_threshold = 0.0;
    std::vector<SubmoduleId> free_sites;
    AttrMethod method = AttrMethod::atp_ig;
    std::string metric;   // provenance: metric description
    std::string dataset;  // provenance: dataset identifier

    bool has_node(const FeatureCoord& c) const {
        return std::any_of(nodes.begin(), nodes.end(),
                           [&](const AttributionScore& n) { return n.coord == c; });
    }

    bool is_free(const SubmoduleId& site) const {
        return std::find(free_sites.begin(), free_sites.end(), site) != free_sites.end();
    }
};

// Embedding plus the first `free_layers` transformer layers.
inline std::vector<SubmoduleId> free_site_set(int n_layers, int free_layers = 1) {
    require(free_layers >= 0 && free_layers <= n_layers, "free layer count out of range");
    std::vector<SubmoduleId> out{{SiteKind::embedding, 0}};
    for (int l = 0; l < free_layers; ++l) {
        out.push_back({SiteKind::attn_out, l});
        out.push_back({SiteKind::mlp_out, l});
        out.push_back({SiteKind::residual, l});
    }
    return out;
}

inline std::vector<SubmoduleId> quarter_free_site_set(int n_layers) {
    return free_site_set(n_layers, (n_layers + 3) / 4);
}

inline Circuit extract_circuit(const std::vector<AttributionScore>& node_scores,
                               const std::vector<EdgeScore>& edge_scores,
                               double node_threshold = 0.1, double edge_threshold = 0.001) {
    Circuit c;
    c.node_threshold = node_threshold;
    c.edge_threshold = edge_threshold;
    bool have_method = false;
    auto check_method = [&](AttrMethod m) {
        if (!have_method) {
            c.method = m;
            have_method = true;
        } else {
            require(m == c.method, "mixed attribution methods in circuit scores");
        }
    };
    std::set<FeatureCoord> kept;
    for (const auto& n : node_scores) {
        check_method(n.method);
        if (std::abs(n.score) >= node_threshold) {
            c.nodes.push_back(n);
            kept.insert(n.coord);
        }
    }
    for (const auto& e : edge_scores) {
        check_method(e.method);
        if (std::abs(e.score) >= edge_threshold && kept.count(e.up) && kept.count(e.down))
            c.edges.push_back(e);
    }
    std::sort(c.nodes.begin(), c.nodes.end(),
              [](const AttributionScore& a, const AttributionScore& b) {
                  return a.coord < b.coord;
              });
    std::sort(c.edges.begin(), c.edges.end(), [](const EdgeScore& a, const EdgeScore& b) {
        return std::tie(a.up, a.down) < std::tie(b.up, b.down);
    });
    return c;
}

// --- faithfulness -----------------------------------------------------------

struct FaithfulnessConfig {
    double denominator_floor = 1e-6;
    unsigned threads = 0;
};

struct FaithfulnessResult {
    double value = 0.0;
    int n_used = 0;
    std::vector<int> excluded;  // dataset indices below the denominator floor
};

namespace detail {

// keep_mask edits zeroing every feature at non-free spliced sites except the
// circuit's nodes at their resolved positions.
inline EditSet ablation_edits(const SplicedModel& spliced, const Circuit& circuit,
                              const Stimulus& st, bool keep_circuit_nodes) {
    const int T = static_cast<int>(st.tokens.size());
    EditSet es;
    for (const auto& site : spliced.spliced_sites()) {
        if (circuit.is_free(site)) continue;
        const int F = spliced.sae(site).d_features();
        HookEdit& e = es.at_hook(feature_hook_name(site));
        e.keep_mask.emplace(static_cast<std::size_t>(T) * F, uint8_t{0});
        if (!keep_circuit_nodes) continue;
        for (const auto& n : circuit.nodes) {
            if (n.coord.site != site) continue;
            require(n.coord.feature >= 0 && n.coord.feature < F,
                    "circuit feature out of range at " + site.str());
            auto& mask = *e.keep_mask;
            if (n.coord.position.kind == PositionKind::all) {
                for (int r = 0; r < T; ++r)
                    mask[static_cast<std::size_t>(r) * F + n.coord.feature] = 1;
            } else {
                const int r = st.resolve(n.coord.position);
                require(r >= 0 && r < T, "circuit node position out of range");
                mask[static_cast<std::size_t>(r) * F + n.coord.feature] = 1;
            }
        }
    }
    return es;
}

}  // namespace detail

// F = E[(m(C,x) - m(0,x)) / (m(M,x) - m(0,x))]; examples whose denominator is
// below the floor are excluded and reported.
inline FaithfulnessResult faithfulness(const SplicedModel& spliced, const Circuit& circuit,
                                       const std::vector<Stimulus>& dataset,
                                       const MetricSpec& metric,
                                       const FaithfulnessConfig& cfg = {}) {
    require(!dataset.empty(), "faithfulness needs a nonempty dataset");
    require(metric.mode == MetricMode::logit_diff, "faithfulness requires the logit_diff metric");

    struct Term {
        double num = 0.0, den = 0.0;
    };
    auto terms = parallel_map<Term>(
        dataset.size(),
        [&](std::size_t i) {
            const Stimulus& st = dataset[i];
            const auto toks = spliced.model().tokenizer().encode(st.tokens);
            const double m_full = spliced.metric_value(toks, metric);
            const double m_circ = spliced.metric_value(
                toks, metric, detail::ablation_edits(spliced, circuit, st, true));
            const double m_empty = spliced.metric_value(
                toks, metric, detail::ablation_edits(spliced, circuit, st, false));
            return Term{m_circ - m_empty, m_full - m_empty};
        },
        cfg.threads);

    FaithfulnessResult res;
    double sum = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (std::abs(terms[i].den) < cfg.denominator_floor) {
            res.excluded.push_back(static_cast<int>(i));
            continue;
        }
        sum += terms[i].num / terms[i].den;
        ++res.n_used;
    }
    require(res.n_used > 0, "all faithfulness examples fell below the denominator floor");
    res.value = sum / res.n_used;
    return res;
}

// --- overlap metrics --------------------------------------------------------

struct IouResult {
    double value = 0.0;
    bool both_empty = false;
};

namespace detail {

inline std::set<std::string> node_keys(const std::vector<AttributionScore>& nodes,
                                       bool ignore_position) {
    std::set<std::string> keys;
    for (const auto& n : nodes)
        keys.insert(ignore_position ? n.coord.site.str() + "/" + std::to_string(n.coord.feature)
                                    : n.coord.str());
    return keys;
}

inline std::set<std::string> coord_keys(const std::vector<FeatureCoord>& coords,
                                        bool ignore_position) {
    std::set<std::string> keys;
    for (const auto& c : coords)
        keys.insert(ignore_position ? c.site.str() + "/" + std::to_string(c.feature) : c.str());
    return keys;
}

}  // namespace detail

inline IouResult circuit_iou(const Circuit& a, const Circuit& b, bool ignore_position = true) {
    const auto ka = detail::node_keys(a.nodes, ignore_position);
    const auto kb = detail::node_keys(b.nodes, ignore_position);
    if (ka.empty() && kb.empty()) return {0.0, true};
    std::size_t inter = 0;
    for (const auto& k : ka) inter += kb.count(k);
    const std::size_t uni = ka.size() + kb.size() - inter;
    return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

inline double feature_recall(const std::vector<FeatureCoord>& reference,
                             const std::vector<FeatureCoord>& candidate,
                             bool ignore_position = true) {
    require(!reference.empty(), "feature_recall requires a nonempty reference set");
    const auto kr = detail::coord_keys(reference, ignore_position);
    const auto kc = detail::coord_keys(candidate, ignore_position);
    std::size_t hit = 0;
    for (const auto& k : kr) hit += kc.count(k);
    return static_cast<double>(hit) / static_cast<double>(kr.size());
}

// --- feature activation statistics ------------------------------------------

struct GroupedNode {
    FeatureCoord coord;
    std::string group;
};

struct GroupStats {
    double mean_activation = 0.0;
    double fraction_active = 0.0;
    int n_pairs = 0;  // (feature, example) pairs
};

inline std::map<std::string, GroupStats> feature_activation_stats(
    const SplicedModel& spliced, const std::vector<Stimulus>& dataset,
    const std::vector<GroupedNode>& nodes, unsigned threads = 0) {
    require(!dataset.empty(), "feature_activation_stats needs a nonempty dataset");
    struct Row {
        std::vector<double> acts;  // per node, aligned with `nodes`
    };
    auto rows = parallel_map<Row>(
        dataset.size(),
        [&](std::size_t i) {
            const Stimulus& st = dataset[i];
            const auto toks = spliced.model().tokenizer().encode(st.tokens);
            auto ev = spliced.forward(toks);
            Row row;
            row.acts.reserve(nodes.size());
            for (const auto& gn : nodes) {
                const Tensor& f = ev.value(feature_hook_name(gn.coord.site));
                const int r = st.resolve(gn.coord.position);
                require(r >= 0 && r < static_cast<int>(f.dim(0)),
                        "node position out of range in activation stats");
                require(gn.coord.feature >= 0 &&
                            gn.coord.feature < static_cast<int>(f.dim(1)),
                        "node feature out of range in activation stats");
                row.acts.push_back(f.at2(static_cast<std::size_t>(r),
                                         static_cast<std::size_t>(gn.coord.feature)));
            }
            return row;
        },
        threads);

    std::map<std::string, GroupStats> out;
    for (std::size_t j = 0; j < nodes.size(); ++j) {
        GroupStats& g = out[nodes[j].group];
        for (const auto& row : rows) {
            g.mean_activation += row.acts[j];
            g.fraction_active += row.acts[j] > 0.0 ? 1.0 : 0.0;
            ++g.n_pairs;
        }
    }
    for (auto& [name, g] : out) {
        g.mean_activation /= g.n_pairs;
        g.fraction_active /= g.n_pairs;
    }
    return out;
}

// --- serialization ----------------------------------------------------------

namespace detail {

inline FeatureCoord parse_coord(const std::string& s) {
    const auto slash = s.rfind('/');
    const auto at = s.rfind('@');
    require(slash != std::string::npos && at != std::string::npos && slash < at,
            "bad feature coordinate: " + s);
    FeatureCoord c;
    c.site = SubmoduleId::parse(s.substr(0, slash));
    c.feature = std::stoi(s.substr(slash + 1, at - slash - 1));
    c.position = PositionSelector::parse(s.substr(at + 1));
    return c;
}

}  // namespace detail

inline nlohmann::ordered_json circuit_to_json(const Circuit& c) {
    nlohmann::ordered_json free_sites = nlohmann::ordered_json::array();
    for (const auto& s : c.free_sites) free_sites.push_back(s.str());
    nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
    for (const auto& n : c.nodes)
        nodes.push_back({{"site", n.coord.site.str()},
                         {"feature", n.coord.feature},
                         {"position", n.coord.position.str()},
                         {"score", n.score}});
    nlohmann::ordered_json edges = nlohmann::ordered_json::array();
    for (const auto& e : c.edges)
        edges.push_back({{"src", e.up.str()}, {"dst", e.down.str()}, {"score", e.score}});
    return {{"metadata",
             {{"metric", c.metric},
              {"dataset", c.dataset},
              {"method", attr_method_name(c.method)},
              {"node_threshold", c.node_threshold},
              {"edge_threshold", c.edge_threshold},
              {"free_sites", free_sites}}},
            {"nodes", nodes},
            {"edges", edges}};
}

inline Circuit circuit_from_json(const nlohmann::json& j) {
    Circuit c;
    const auto& md = j.at("metadata");
    c.metric = md.at("metric").get<std::string>();
    c.dataset = md.at("dataset").get<std::string>();
    c.method = attr_method_from_name(md.at("method").get<std::string>());
    c.node_threshold = md.at("node_threshold").get<double>();
    c.edge_threshold = md.at("edge_threshold").get<double>();
    for (const auto& s : md.at("free_sites"))
        c.free_sites.push_back(SubmoduleId::parse(s.get<std::string>()));
    for (const auto& n : j.at("nodes")) {
        AttributionScore a;
        a.coord.site = SubmoduleId::parse(n.at("site").get<std::string>());
        a.coord.feature = n.at("feature").get<int>();
        a.coord.position = PositionSelector::parse(n.at("position").get<std::string>());
        a.score = n.at("score").get<double>();
        a.method = c.method;
        c.nodes.push_back(a);
    }
    for (const auto& e : j.at("edges")) {
        EdgeScore es;
        es.up = detail::parse_coord(e.at("src").get<std::string>());
        es.down = detail::parse_coord(e.at("dst").get<std::string>());
        es.score = e.at("score").get<double>();
        es.method = c.method;
        c.edges.push_back(es);
    }
    return c;
}

inline void save_circuit(const Circuit& c, const std::string& path) {
    write_file(path, circuit_to_json(c).dump(2) + "\n");
}

inline Circuit load_circuit(const std::string& path) {
    return circuit_from_json(nlohmann::json::parse(read_file(path)));
}

}  // namespace sfc
