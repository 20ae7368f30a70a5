#pragma once

// Run configuration (JSON, unknown keys rejected, errors reported
// exhaustively), FNV-1a artifact hashing, and per-output manifests.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "container.hpp"
#include "model.hpp"
#include "sae.hpp"
#include "types.hpp"

namespace sfc {

inline constexpr const char* kToolkitVersion = "0.1.0";

inline uint64_t fnv1a(const void* data, std::size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string hash_file(const std::string& path) {
    return hash_hex(fnv1a(read_file(path)));
}

// ---- run configuration ----

struct AttributionConfig {
    std::string method = "atp_ig";
    int K = 10;
    std::string ig_rule = "as_written";
    double node_threshold = 0.1;
    double edge_threshold = 0.001;
    std::vector<std::string> positions = {"verb", "final_noun"};
};

struct CircuitConfig {
    int free_layers = 1;  // embedding + this many leading layers stay free
};

struct InterventionConfig {
    int group_size = 20;
    double clamp_value = 0.0;  // 0 => calibrated from mean top-decile activation
    uint64_t control_seed = 0;
    int n_control_seeds = 20;
};

struct StimuliConfig {
    uint64_t grammar_seed = 1;
    int corpus_sentences = 3000;
    int items_per_condition = 24;
    uint64_t stimuli_seed = 2;
};

struct ProbeConfig {
    int layer = 2;
    int hidden = 128;
    double learning_rate = 1e-3;
    int epochs = 10;
    int batch_size = 64;
    uint64_t rng_seed = 0;
};

struct RunConfig {
    ModelConfig model;  // vocab_size filled from the grammar
    LmTrainConfig lm;
    SaeTrainConfig sae;
    std::vector<std::string> sae_sites = {"residual.1", "residual.2"};
    AttributionConfig attribution;
    CircuitConfig circuit;
    InterventionConfig intervention;
    StimuliConfig stimuli;
    ProbeConfig probe;
    std::string out_dir = "out";
    unsigned threads = 0;

    nlohmann::ordered_json to_json() const {
        return {
            {"model",
             {{"n_layers", model.n_layers},
              {"d_model", model.d_model},
              {"n_heads", model.n_heads},
              {"d_mlp", model.d_mlp},
              {"max_seq_len", model.max_seq_len},
              {"rng_seed", model.rng_seed}}},
            {"lm",
             {{"epochs", lm.epochs},
              {"batch_size", lm.batch_size},
              {"learning_rate", lm.learning_rate},
              {"shuffle_seed", lm.shuffle_seed}}},
            {"sae",
             {{"d_features", sae.d_features},
              {"sparsity_weight", sae.sparsity_weight},
              {"learning_rate", sae.learning_rate},
              {"lr_final_fraction", sae.lr_final_fraction},
              {"steps", sae.steps},
              {"batch_size", sae.batch_size},
              {"dead_check_interval", sae.dead_check_interval},
              {"rng_seed", sae.rng_seed},
              {"sites", sae_sites}}},
            {"attribution",
             {{"method", attribution.method},
              {"K", attribution.K},
              {"ig_rule", attribution.ig_rule},
              {"node_threshold", attribution.node_threshold},
              {"edge_threshold", attribution.edge_threshold},
              {"positions", attribution.positions}}},
            {"circuit", {{"free_layers", circuit.free_layers}}},
            {"intervention",
             {{"group_size", intervention.group_size},
              {"clamp_value", intervention.clamp_value},
              {"control_seed", intervention.control_seed},
              {"n_control_seeds", intervention.n_control_seeds}}},
            {"stimuli",
             {{"grammar_seed", stimuli.grammar_seed},
              {"corpus_sentences", stimuli.corpus_sentences},
              {"items_per_condition", stimuli.items_per_condition},
              {"stimuli_seed", stimuli.stimuli_seed}}},
            {"probe",
             {{"layer", probe.layer},
              {"hidden", probe.hidden},
              {"learning_rate", probe.learning_rate},
              {"epochs", probe.epochs},
              {"batch_size", probe.batch_size},
              {"rng_seed", probe.rng_seed}}},
            {"out_dir", out_dir},
            {"threads", threads},
        };
    }

    std::string hash() const { return hash_hex(fnv1a(to_json().dump())); }

    // Parses a (possibly partial) JSON document over the documented defaults.
    // Unknown keys are rejected; all problems are collected, not just the
    // first.
    static RunConfig from_json(const nlohmann::json& j, std::vector<std::string>& errors) {
        RunConfig cfg;
        const nlohmann::ordered_json defaults = cfg.to_json();
        if (!j.is_object()) {
            errors.push_back("config root must be a JSON object");
            return cfg;
        }
        for (const auto& [section, body] : j.items()) {
            if (!defaults.contains(section)) {
                errors.push_back("unknown config key: " + section);
                continue;
            }
            if (defaults.at(section).is_object()) {
                if (!body.is_object()) {
                    errors.push_back("config section must be an object: " + section);
                    continue;
                }
                for (const auto& [key, val] : body.items())
                    if (!defaults.at(section).contains(key))
                        errors.push_back("unknown config key: " + section + "." + key);
            }
        }
        auto get = [&](const char* section, const char* key, auto& slot) {
            using T = std::remove_reference_t<decltype(slot)>;
            if (!j.contains(section) || !j.at(section).is_object() ||
                !j.at(section).contains(key))
                return;
            try {
                slot = j.at(section).at(key).template get<T>();
            } catch (const nlohmann::json::exception&) {
                errors.push_back(std::string("bad value for ") + section + "." + key);
            }
        };
        get("model", "n_layers", cfg.model.n_layers);
        get("model", "d_model", cfg.model.d_model);
        get("model", "n_heads", cfg.model.n_heads);
        get("model", "d_mlp", cfg.model.d_mlp);
        get("model", "max_seq_len", cfg.model.max_seq_len);
        get("model", "rng_seed", cfg.model.rng_seed);
        get("lm", "epochs", cfg.lm.epochs);
        get("lm", "batch_size", cfg.lm.batch_size);
        get("lm", "learning_rate", cfg.lm.learning_rate);
        get("lm", "shuffle_seed", cfg.lm.shuffle_seed);
        get("sae", "d_features", cfg.sae.d_features);
        get("sae", "sparsity_weight", cfg.sae.sparsity_weight);
        get("sae", "learning_rate", cfg.sae.learning_rate);
        get("sae", "lr_final_fraction", cfg.sae.lr_final_fraction);
        get("sae", "steps", cfg.sae.steps);
        get("sae", "batch_size", cfg.sae.batch_size);
        get("sae", "dead_check_interval", cfg.sae.dead_check_interval);
        get("sae", "rng_seed", cfg.sae.rng_seed);
        get("sae", "sites", cfg.sae_sites);
        get("attribution", "method", cfg.attribution.method);
        get("attribution", "K", cfg.attribution.K);
        get("attribution", "ig_rule", cfg.attribution.ig_rule);
        get("attribution", "node_threshold", cfg.attribution.node_threshold);
        get("attribution", "edge_threshold", cfg.attribution.edge_threshold);
        get("attribution", "positions", cfg.attribution.positions);
        get("circuit", "free_layers", cfg.circuit.free_layers);
        get("intervention", "group_size", cfg.intervention.group_size);
        get("intervention", "clamp_value", cfg.intervention.clamp_value);
        get("intervention", "control_seed", cfg.intervention.control_seed);
        get("intervention", "n_control_seeds", cfg.intervention.n_control_seeds);
        get("stimuli", "grammar_seed", cfg.stimuli.grammar_seed);
        get("stimuli", "corpus_sentences", cfg.stimuli.corpus_sentences);
        get("stimuli", "items_per_condition", cfg.stimuli.items_per_condition);
        get("stimuli", "stimuli_seed", cfg.stimuli.stimuli_seed);
        get("probe", "layer", cfg.probe.layer);
        get("probe", "hidden", cfg.probe.hidden);
        get("probe", "learning_rate", cfg.probe.learning_rate);
        get("probe", "epochs", cfg.probe.epochs);
        get("probe", "batch_size", cfg.probe.batch_size);
        get("probe", "rng_seed", cfg.probe.rng_seed);
        if (j.contains("out_dir")) {
            if (j.at("out_dir").is_string())
                cfg.out_dir = j.at("out_dir").get<std::string>();
            else
                errors.push_back("bad value for out_dir");
        }
        if (j.contains("threads")) {
            if (j.at("threads").is_number_unsigned())
                cfg.threads = j.at("threads").get<unsigned>();
            else
                errors.push_back("bad value for threads");
        }
        // semantic checks, collected exhaustively
        if (cfg.model.n_layers < 1) errors.push_back("model.n_layers must be >= 1");
        if (cfg.model.d_model < 1) errors.push_back("model.d_model must be >= 1");
        if (cfg.model.n_heads < 1) errors.push_back("model.n_heads must be >= 1");
        if (cfg.model.n_heads >= 1 && cfg.model.d_model % cfg.model.n_heads != 0)
            errors.push_back("model.d_model must be divisible by model.n_heads");
        if (cfg.sae.d_features < cfg.model.d_model)
            errors.push_back("sae.d_features must be >= model.d_model");
        if (cfg.attribution.method != "atp" && cfg.attribution.method != "atp_ig" &&
            cfg.attribution.method != "exact")
            errors.push_back("attribution.method must be one of atp, atp_ig, exact");
        if (cfg.attribution.ig_rule != "as_written" && cfg.attribution.ig_rule != "trapezoid")
            errors.push_back("attribution.ig_rule must be as_written or trapezoid");
        if (cfg.attribution.K < 1) errors.push_back("attribution.K must be >= 1");
        if (cfg.circuit.free_layers < 0 || cfg.circuit.free_layers > cfg.model.n_layers)
            errors.push_back("circuit.free_layers out of range");
        if (cfg.probe.layer < 0 || cfg.probe.layer >= cfg.model.n_layers)
            errors.push_back("probe.layer out of range");
        if (cfg.stimuli.corpus_sentences < 1)
            errors.push_back("stimuli.corpus_sentences must be >= 1");
        if (cfg.stimuli.items_per_condition < 1)
            errors.push_back("stimuli.items_per_condition must be >= 1");
        for (const auto& s : cfg.sae_sites) {
            try {
                const SubmoduleId id = SubmoduleId::parse(s);
                if (id.kind != SiteKind::embedding && id.layer >= cfg.model.n_layers)
                    errors.push_back("sae site layer out of range: " + s);
            } catch (const Error&) {
                errors.push_back("bad sae site: " + s);
            }
        }
        return cfg;
    }

    static RunConfig load(const std::string& path, std::vector<std::string>& errors) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
            errors.push_back(std::string("config parse error: ") + e.what());
            return {};
        }
        return from_json(j, errors);
    }
};

// ---- manifests ----

// Written beside every output as <output>.manifest.json.
inline void write_manifest(const std::string& output_path, const RunConfig& cfg,
                           const std::vector<std::string>& input_paths,
                           const std::vector<uint64_t>& seeds) {
    nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
    for (const auto& p : input_paths) inputs[p] = hash_file(p);
    nlohmann::ordered_json m{{"toolkit_version", kToolkitVersion},
                             {"config_hash", cfg.hash()},
                             {"inputs", inputs},
                             {"seeds", seeds},
                             {"output", output_path},
                             {"output_hash", hash_file(output_path)}};
    write_file(output_path + ".manifest.json", m.dump(2) + "\n");
}

}  // namespace sfc
