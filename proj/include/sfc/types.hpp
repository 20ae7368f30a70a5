#pragma once

// Domain types shared across modules: activation-site addresses, feature
// coordinates, position selectors, and behavioral metric specs.

#include <compare>
#include <string>
#include <vector>

#include "sfc/tensor.hpp"

namespace sfc {

enum class SiteKind : uint8_t { embedding, residual, attn_out, mlp_out };

inline const char* site_kind_name(SiteKind k) {
    switch (k) {
        case SiteKind::embedding: return "embedding";
        case SiteKind::residual: return "residual";
        case SiteKind::attn_out: return "attn_out";
        case SiteKind::mlp_out: return "mlp_out";
    }
    return "?";
}

inline SiteKind site_kind_from_name(const std::string& s) {
    if (s == "embedding") return SiteKind::embedding;
    if (s == "residual") return SiteKind::residual;
    if (s == "attn_out") return SiteKind::attn_out;
    if (s == "mlp_out") return SiteKind::mlp_out;
    fail("unknown site kind: " + s);
}

struct SubmoduleId {
    SiteKind kind = SiteKind::residual;
    int layer = 0;  // ignored for embedding

    auto operator<=>(const SubmoduleId&) const = default;

    std::string str() const {
        if (kind == SiteKind::embedding) return "embedding";
        return std::string(site_kind_name(kind)) + "." + std::to_string(layer);
    }

    static SubmoduleId parse(const std::string& s) {
        if (s == "embedding") return {SiteKind::embedding, 0};
        auto dot = s.find('.');
        require(dot != std::string::npos, "bad submodule id: " + s);
        return {site_kind_from_name(s.substr(0, dot)), std::stoi(s.substr(dot + 1))};
    }

    // Order of computation within the forward pass; strictly earlier sites can
    // causally affect strictly later ones.
    int stage() const {
        if (kind == SiteKind::embedding) return 0;
        int base = 1 + 3 * layer;
        if (kind == SiteKind::attn_out) return base;
        if (kind == SiteKind::mlp_out) return base + 1;
        return base + 2;  // residual (post-layer)
    }
};

// Token position addressing that generalizes across stimuli of different
// lengths.
enum class PositionKind : uint8_t { absolute, verb, final_noun, all };

struct PositionSelector {
    PositionKind kind = PositionKind::absolute;
    int index = 0;  // for absolute

    auto operator<=>(const PositionSelector&) const = default;

    static PositionSelector at(int i) { return {PositionKind::absolute, i}; }
    static PositionSelector verb() { return {PositionKind::verb, 0}; }
    static PositionSelector final_noun() { return {PositionKind::final_noun, 0}; }
    static PositionSelector all() { return {PositionKind::all, 0}; }

    std::string str() const {
        switch (kind) {
            case PositionKind::absolute: return std::to_string(index);
            case PositionKind::verb: return "verb";
            case PositionKind::final_noun: return "final_noun";
            case PositionKind::all: return "all";
        }
        return "?";
    }

    static PositionSelector parse(const std::string& s) {
        if (s == "verb") return verb();
        if (s == "final_noun") return final_noun();
        if (s == "all") return all();
        return at(std::stoi(s));
    }
};

struct FeatureCoord {
    SubmoduleId site;
    int feature = 0;
    PositionSelector position;

    auto operator<=>(const FeatureCoord&) const = default;

    std::string str() const {
        return site.str() + "/" + std::to_string(feature) + "@" + position.str();
    }
};

enum class MetricMode : uint8_t { prob_diff, logit_diff };

inline const char* metric_mode_name(MetricMode m) {
    return m == MetricMode::prob_diff ? "prob_diff" : "logit_diff";
}

inline MetricMode metric_mode_from_name(const std::string& s) {
    if (s == "prob_diff") return MetricMode::prob_diff;
    if (s == "logit_diff") return MetricMode::logit_diff;
    fail("unknown metric mode: " + s);
}

// m = sum over positive-side tokens minus sum over negative-side tokens, in
// probability or logit space, at a fixed evaluation position (default: last).
struct MetricSpec {
    MetricMode mode = MetricMode::prob_diff;
    std::vector<int> positive_tokens;
    std::vector<int> negative_tokens;
    int position = -1;  // -1 => last

    void validate() const {
        require(!positive_tokens.empty() && !negative_tokens.empty(),
                "metric token sets must be nonempty");
        for (int a : positive_tokens)
            for (int b : negative_tokens)
                require(a != b, "metric token sets must be disjoint");
    }
};

enum class GpStructure : uint8_t { NPZ, NPS, MVRR };

inline const char* structure_name(GpStructure s) {
    switch (s) {
        case GpStructure::NPZ: return "NPZ";
        case GpStructure::NPS: return "NPS";
        case GpStructure::MVRR: return "MVRR";
    }
    return "?";
}

inline GpStructure structure_from_name(const std::string& s) {
    if (s == "NPZ") return GpStructure::NPZ;
    if (s == "NPS") return GpStructure::NPS;
    if (s == "MVRR") return GpStructure::MVRR;
    fail("unknown structure: " + s);
}

enum class GpCondition : uint8_t { ambiguous, gp, non_gp };

inline const char* condition_name(GpCondition c) {
    switch (c) {
        case GpCondition::ambiguous: return "ambiguous";
        case GpCondition::gp: return "gp";
        case GpCondition::non_gp: return "non_gp";
    }
    return "?";
}

inline GpCondition condition_from_name(const std::string& s) {
    if (s == "ambiguous") return GpCondition::ambiguous;
    if (s == "gp") return GpCondition::gp;
    if (s == "non_gp") return GpCondition::non_gp;
    fail("unknown condition: " + s);
}

// A garden-path test item with annotated positions.
struct Stimulus {
    std::vector<std::string> tokens;
    GpStructure structure = GpStructure::NPZ;
    GpCondition condition = GpCondition::ambiguous;
    int verb_position = 0;
    int final_noun_position = 0;
    std::string gp_token;
    std::string nongp_token;

    std::string text() const {
        std::string s;
        for (std::size_t i = 0; i < tokens.size(); ++i) s += (i ? " " : "") + tokens[i];
        return s;
    }

    int resolve(const PositionSelector& sel) const {
        switch (sel.kind) {
            case PositionKind::absolute:
                require(sel.index >= 0 && sel.index < static_cast<int>(tokens.size()),
                        "absolute position out of range");
                return sel.index;
            case PositionKind::verb: return verb_position;
            case PositionKind::final_noun: return final_noun_position;
            case PositionKind::all: fail("'all' selector has no single position");
        }
        fail("bad position selector");
    }
};

}  // namespace sfc
