#pragma once

// Indirect-effect attribution over SAE features: exact zero-ablation, the AtP
// linear approximation a * dm/da, and AtP-IG, which averages the gradient over
// K+1 evenly spaced overrides of the feature between a baseline a' and the
// clean value a (sum_{k=0..K} with 1/K normalization, as written; a trapezoid
// variant is available behind a switch). Positive score means the feature
// promotes the metric's positive side.

#include <sstream>

#include "sfc/parallel.hpp"
#include "sfc/sae.hpp"
#include "sfc/stimuli.hpp"

namespace sfc {

enum class AttrMethod : uint8_t { exact, atp, atp_ig };

inline const char* attr_method_name(AttrMethod m) {
    switch (m) {
        case AttrMethod::exact: return "exact";
        case AttrMethod::atp: return "atp";
        case AttrMethod::atp_ig: return "atp_ig";
    }
    return "?";
}

inline AttrMethod attr_method_from_name(const std::string& s) {
    if (s == "exact") return AttrMethod::exact;
    if (s == "atp") return AttrMethod::atp;
    if (s == "atp_ig") return AttrMethod::atp_ig;
    fail("unknown attribution method: " + s);
}

// Eq. 4 as written uses K+1 summands normalized by 1/K; the trapezoid rule
// halves the endpoint terms (see decisions).
enum class IgRule : uint8_t { as_written, trapezoid };

struct AttributionScore {
    FeatureCoord coord;
    double score = 0.0;
    AttrMethod method = AttrMethod::atp;
    int n_examples = 0;
};

namespace detail {

struct CoordAt {
    std::string hook;
    int row = 0;
    int col = 0;
};

inline CoordAt resolve_coord(const SplicedModel& m, const FeatureCoord& coord, int seq_len,
                             const Stimulus* ann) {
    const SaeParams& s = m.sae(coord.site);
    require(coord.feature >= 0 && coord.feature < s.d_features(),
            "feature index out of range at " + coord.site.str());
    int row;
    if (coord.position.kind == PositionKind::absolute) {
        row = coord.position.index;
    } else {
        require(ann != nullptr, "position selector needs stimulus annotations");
        row = ann->resolve(coord.position);
    }
    require(row >= 0 && row < seq_len, "coord position out of range");
    return {feature_hook_name(coord.site), row, coord.feature};
}

inline EditSet coord_override(const CoordAt& at, double value) {
    EditSet e;
    e.at_hook(at.hook).sets.emplace_back(at.row, at.col, value);
    return e;
}

}  // namespace detail

// m(clean) - m(feature zeroed); zero by construction when the feature is
// inactive on this input.
inline double exact_ie(const SplicedModel& model, const MetricSpec& metric,
                       const FeatureCoord& coord, const std::vector<int>& tokens,
                       const Stimulus* ann = nullptr) {
    const int T = static_cast<int>(tokens.size());
    const auto at = detail::resolve_coord(model, coord, T, ann);
    auto ft = model.tape_for(T, &metric);
    Evaluation clean(ft->tape, model.inputs_for(tokens));
    const double a = clean.value(at.hook).at2(static_cast<std::size_t>(at.row),
                                              static_cast<std::size_t>(at.col));
    if (a == 0.0) return 0.0;
    const double m_clean = clean.value("metric").item();
    Evaluation ablated(ft->tape, model.inputs_for(tokens), detail::coord_override(at, 0.0));
    return m_clean - ablated.value("metric").item();
}

// Eq. 3: a * dm/da on the clean run.
inline double atp(const SplicedModel& model, const MetricSpec& metric, const FeatureCoord& coord,
                  const std::vector<int>& tokens, const Stimulus* ann = nullptr) {
    const int T = static_cast<int>(tokens.size());
    const auto at = detail::resolve_coord(model, coord, T, ann);
    auto ft = model.tape_for(T, &metric);
    Evaluation clean(ft->tape, model.inputs_for(tokens));
    const double a = clean.value(at.hook).at2(static_cast<std::size_t>(at.row),
                                              static_cast<std::size_t>(at.col));
    if (a == 0.0) return 0.0;
    Tensor g = clean.gradient(ft->tape.named("metric"), ft->tape.named(at.hook));
    return a * g.at2(static_cast<std::size_t>(at.row), static_cast<std::size_t>(at.col));
}

// Eq. 4 core on an arbitrary tape: (a - a') * (1/K) * sum_{k=0..K} dm/da with
// the hook element overridden to a' + (k/K)(a - a'); each term from a separate
// edited forward+backward pass.
inline double ig_estimate(const Tape& tape, const InputLookup& inputs, NodeId metric_node,
                          const std::string& hook, int row, int col, double a, double baseline,
                          int K, IgRule rule = IgRule::as_written) {
    require(K >= 1, "atp_ig requires K >= 1");
    if (a == baseline) return 0.0;
    const NodeId hnode = tape.named(hook);
    double gsum = 0.0;
    for (int k = 0; k <= K; ++k) {
        const double v = baseline + (double(k) / double(K)) * (a - baseline);
        Evaluation ev(tape, inputs, detail::coord_override({hook, row, col}, v));
        const double g = ev.gradient(metric_node, hnode)
                             .at2(static_cast<std::size_t>(row), static_cast<std::size_t>(col));
        const double w = (rule == IgRule::trapezoid && (k == 0 || k == K)) ? 0.5 : 1.0;
        gsum += w * g;
    }
    return (a - baseline) * gsum / double(K);
}

inline double atp_ig(const SplicedModel& model, const MetricSpec& metric,
                     const FeatureCoord& coord, const std::vector<int>& tokens, int K = 10,
                     double baseline = 0.0, const Stimulus* ann = nullptr,
                     IgRule rule = IgRule::as_written) {
    const int T = static_cast<int>(tokens.size());
    const auto at = detail::resolve_coord(model, coord, T, ann);
    auto ft = model.tape_for(T, &metric);
    Evaluation clean(ft->tape, model.inputs_for(tokens));
    const double a = clean.value(at.hook).at2(static_cast<std::size_t>(at.row),
                                              static_cast<std::size_t>(at.col));
    return ig_estimate(ft->tape, model.inputs_for(tokens), ft->tape.named("metric"), at.hook,
                       at.row, at.col, a, baseline, K, rule);
}

// ---- dataset-level node scores ----

struct NodeScoreConfig {
    AttrMethod method = AttrMethod::atp_ig;
    int K = 10;
    double baseline = 0.0;
    IgRule ig_rule = IgRule::as_written;
    std::vector<PositionSelector> positions = {PositionSelector::verb(),
                                               PositionSelector::final_noun()};
    double active_threshold = 0.0;  // |a| must exceed this to be scored
    unsigned threads = 0;           // 0 => hardware concurrency
};

// Per-(site, feature, selector) scores, arithmetic mean over the dataset;
// examples where the feature is inactive contribute zero. Deterministic
// ordering: score descending, coordinate ascending as tiebreak.
inline std::vector<AttributionScore> node_scores(const SplicedModel& model,
                                                 const MetricSpec& metric,
                                                 const std::vector<Stimulus>& dataset,
                                                 const NodeScoreConfig& cfg = {}) {
    require(!dataset.empty(), "node_scores needs a nonempty dataset");
    require(!cfg.positions.empty(), "node_scores needs at least one position selector");
    bool aligned = true;
    for (const auto& st : dataset) {
        if (st.tokens.size() != dataset.front().tokens.size()) aligned = false;
        for (const auto& sel : cfg.positions)
            require(sel.kind != PositionKind::all, "'all' selector not valid for node scores");
    }
    if (!aligned)
        for (const auto& sel : cfg.positions)
            require(sel.kind != PositionKind::absolute,
                    "misaligned dataset requires non-absolute position selectors");

    const auto sites = model.spliced_sites();
    const Tokenizer& tok = model.model().tokenizer();

    using ExampleScores = std::map<FeatureCoord, double>;
    auto score_example = [&](std::size_t idx) -> ExampleScores {
        const Stimulus& st = dataset[idx];
        const std::vector<int> tokens = tok.encode(st.tokens);
        const int T = static_cast<int>(tokens.size());
        auto ft = model.tape_for(T, &metric);
        Evaluation clean(ft->tape, model.inputs_for(tokens));
        const NodeId mnode = ft->tape.named("metric");

        // gradients at every feature hook in one backward pass (atp path)
        std::vector<Tensor> grads;
        if (cfg.method == AttrMethod::atp) grads = clean.backward(mnode);
        const double m_clean =
            cfg.method == AttrMethod::exact ? clean.value("metric").item() : 0.0;

        ExampleScores out;
        for (const auto& site : sites) {
            const NodeId hnode = ft->tape.named(feature_hook_name(site));
            const Tensor& f = clean.value(hnode);
            for (const auto& sel : cfg.positions) {
                const int row = st.resolve(sel);
                require(row >= 0 && row < T, "annotated position out of range");
                for (std::size_t j = 0; j < f.dim(1); ++j) {
                    const double a = f.at2(static_cast<std::size_t>(row), j);
                    if (!(std::abs(a) > cfg.active_threshold)) continue;
                    const FeatureCoord coord{site, static_cast<int>(j), sel};
                    double s = 0.0;
                    switch (cfg.method) {
                        case AttrMethod::atp: {
                            const Tensor& g = grads[static_cast<std::size_t>(hnode)];
                            if (g.numel() != 0)
                                s = a * g.at2(static_cast<std::size_t>(row), j);
                            break;
                        }
                        case AttrMethod::exact: {
                            const detail::CoordAt at{feature_hook_name(site), row,
                                                     static_cast<int>(j)};
                            Evaluation abl(ft->tape, model.inputs_for(tokens),
                                           detail::coord_override(at, 0.0));
                            s = m_clean - abl.value("metric").item();
                            break;
                        }
                        case AttrMethod::atp_ig:
                            s = atp_ig(model, metric, coord, tokens, cfg.K, cfg.baseline, &st,
                                       cfg.ig_rule);
                            break;
                    }
                    out[coord] += s;
                }
            }
        }
        return out;
    };

    auto per_example =
        parallel_map<ExampleScores>(dataset.size(), score_example, cfg.threads);
    std::map<FeatureCoord, double> sums;
    for (const auto& ex : per_example)
        for (const auto& [coord, s] : ex) sums[coord] += s;

    std::vector<AttributionScore> scores;
    scores.reserve(sums.size());
    const int n = static_cast<int>(dataset.size());
    for (const auto& [coord, s] : sums)
        scores.push_back({coord, s / double(n), cfg.method, n});
    std::stable_sort(scores.begin(), scores.end(),
                     [](const AttributionScore& a, const AttributionScore& b) {
                         if (a.score != b.score) return a.score > b.score;
                         return a.coord < b.coord;
                     });
    return scores;
}

// ---- edge scores ----

struct EdgeScore {
    FeatureCoord up;
    FeatureCoord down;
    double score = 0.0;
    AttrMethod method = AttrMethod::atp;
    int n_examples = 0;
};

struct EdgeScoreConfig {
    AttrMethod method = AttrMethod::atp;  // atp or atp_ig (gradient factor only)
    int K = 10;
    double baseline = 0.0;
    IgRule ig_rule = IgRule::as_written;
    std::vector<PositionSelector> positions = {PositionSelector::verb(),
                                               PositionSelector::final_noun()};
    double active_threshold = 0.0;
    unsigned threads = 0;
};

// IE(u -> d) = (dm/da_d) * (da_d/da_u) * a_u, averaged over the dataset. The
// middle factor is one vector-Jacobian (backward) pass per downstream node on
// the clean run; the IG variant averages only the dm/da_d factor along the
// atp_ig interpolation path of a_d.
inline std::vector<EdgeScore> edge_scores(const SplicedModel& model, const MetricSpec& metric,
                                          const std::vector<Stimulus>& dataset,
                                          const SubmoduleId& up_site,
                                          const SubmoduleId& down_site,
                                          const EdgeScoreConfig& cfg = {}) {
    require(!dataset.empty(), "edge_scores needs a nonempty dataset");
    require(cfg.method != AttrMethod::exact, "edge scores are gradient-based (atp or atp_ig)");
    require(model.has_sae(up_site) && model.has_sae(down_site),
            "edge endpoints must be spliced sites");
    require(up_site.stage() < down_site.stage(),
            "upstream site must be strictly earlier than downstream site: " + up_site.str() +
                " vs " + down_site.str());
    const Tokenizer& tok = model.model().tokenizer();

    using ExampleScores = std::map<std::pair<FeatureCoord, FeatureCoord>, double>;
    auto score_example = [&](std::size_t idx) -> ExampleScores {
        const Stimulus& st = dataset[idx];
        const std::vector<int> tokens = tok.encode(st.tokens);
        const int T = static_cast<int>(tokens.size());

        // private tape copy so Element probe nodes can be appended
        auto shared = model.tape_for(T, &metric);
        Tape t = shared->tape;
        const NodeId up_hook = t.named(feature_hook_name(up_site));
        const NodeId down_hook = t.named(feature_hook_name(down_site));
        const NodeId mnode = t.named("metric");

        Evaluation probe_clean(t, model.inputs_for(tokens));
        const Tensor& fd = probe_clean.value(down_hook);
        const Tensor& fu = probe_clean.value(up_hook);

        // active downstream nodes and their element probe nodes
        struct Down {
            int row, col;
            NodeId element;
            PositionSelector sel;
        };
        std::vector<Down> downs;
        for (const auto& sel : cfg.positions) {
            const int row = st.resolve(sel);
            require(row >= 0 && row < T, "annotated position out of range");
            for (std::size_t j = 0; j < fd.dim(1); ++j)
                if (std::abs(fd.at2(static_cast<std::size_t>(row), j)) > cfg.active_threshold)
                    downs.push_back(
                        {row, static_cast<int>(j),
                         t.element(down_hook, row, static_cast<int>(j)), sel});
        }

        Evaluation ev(t, model.inputs_for(tokens));
        ExampleScores out;
        std::vector<Tensor> gm = ev.backward(mnode);
        for (const auto& dn : downs) {
            double m_grad;
            if (cfg.method == AttrMethod::atp) {
                const Tensor& g = gm[static_cast<std::size_t>(down_hook)];
                m_grad = g.numel() ? g.at2(static_cast<std::size_t>(dn.row),
                                           static_cast<std::size_t>(dn.col))
                                   : 0.0;
            } else {
                // average dm/da_d over the interpolation path of a_d
                const double a = fd.at2(static_cast<std::size_t>(dn.row),
                                        static_cast<std::size_t>(dn.col));
                const detail::CoordAt at{feature_hook_name(down_site), dn.row, dn.col};
                double gsum = 0.0;
                for (int k = 0; k <= cfg.K; ++k) {
                    const double v =
                        cfg.baseline + (double(k) / double(cfg.K)) * (a - cfg.baseline);
                    Evaluation evk(t, model.inputs_for(tokens), detail::coord_override(at, v));
                    const double g = evk.gradient(mnode, down_hook)
                                         .at2(static_cast<std::size_t>(dn.row),
                                              static_cast<std::size_t>(dn.col));
                    const double w =
                        (cfg.ig_rule == IgRule::trapezoid && (k == 0 || k == cfg.K)) ? 0.5 : 1.0;
                    gsum += w * g;
                }
                m_grad = gsum / double(cfg.K);  // same 1/K normalization as Eq. 4
            }
            if (m_grad == 0.0) continue;
            Tensor gd = ev.gradient(dn.element, up_hook);
            const FeatureCoord down{down_site, dn.col, dn.sel};
            for (const auto& sel : cfg.positions) {
                const int row = st.resolve(sel);
                for (std::size_t j = 0; j < fu.dim(1); ++j) {
                    const double au = fu.at2(static_cast<std::size_t>(row), j);
                    if (!(std::abs(au) > cfg.active_threshold)) continue;
                    const double jac = gd.at2(static_cast<std::size_t>(row), j);
                    if (jac == 0.0) continue;
                    const FeatureCoord up{up_site, static_cast<int>(j), sel};
                    out[{up, down}] += m_grad * jac * au;
                }
            }
        }
        return out;
    };

    auto per_example =
        parallel_map<ExampleScores>(dataset.size(), score_example, cfg.threads);
    std::map<std::pair<FeatureCoord, FeatureCoord>, double> sums;
    for (const auto& ex : per_example)
        for (const auto& [k, s] : ex) sums[k] += s;

    std::vector<EdgeScore> scores;
    const int n = static_cast<int>(dataset.size());
    for (const auto& [k, s] : sums)
        scores.push_back({k.first, k.second, s / double(n), cfg.method, n});
    std::stable_sort(scores.begin(), scores.end(), [](const EdgeScore& a, const EdgeScore& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.up != b.up) return a.up < b.up;
        return a.down < b.down;
    });
    return scores;
}

// ---- structured-text dump ----

inline std::string node_scores_tsv(const std::vector<AttributionScore>& scores) {
    std::ostringstream os;
    os << "site\tfeature\tposition\tscore\tmethod\tn_examples\n";
    os.precision(17);
    for (const auto& s : scores)
        os << s.coord.site.str() << "\t" << s.coord.feature << "\t" << s.coord.position.str()
           << "\t" << s.score << "\t" << attr_method_name(s.method) << "\t" << s.n_examples
           << "\n";
    return os.str();
}

inline std::string edge_scores_tsv(const std::vector<EdgeScore>& scores) {
    std::ostringstream os;
    os << "up_site\tup_feature\tup_position\tdown_site\tdown_feature\tdown_position\tscore\t"
          "method\tn_examples\n";
    os.precision(17);
    for (const auto& s : scores)
        os << s.up.site.str() << "\t" << s.up.feature << "\t" << s.up.position.str() << "\t"
           << s.down.site.str() << "\t" << s.down.feature << "\t" << s.down.position.str() << "\t"
           << s.score << "\t" << attr_method_name(s.method) << "\t" << s.n_examples << "\n";
    return os.str();
}

namespace detail {

inline std::vector<std::string> split_tsv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
        auto tab = line.find('\t', start);
        cells.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return cells;
}

inline std::vector<std::vector<std::string>> parse_tsv(const std::string& text,
                                                       const std::string& expected_header,
                                                       std::size_t n_cols) {
    std::istringstream is(text);
    std::string line;
    require(std::getline(is, line) && line == expected_header, "unexpected TSV header");
    std::vector<std::vector<std::string>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = split_tsv_line(line);
        require(cells.size() == n_cols, "malformed TSV row: " + line);
        rows.push_back(std::move(cells));
    }
    return rows;
}

}  // namespace detail

inline std::vector<AttributionScore> parse_node_scores_tsv(const std::string& text) {
    auto rows = detail::parse_tsv(text, "site\tfeature\tposition\tscore\tmethod\tn_examples", 6);
    std::vector<AttributionScore> out;
    for (const auto& c : rows)
        out.push_back({{SubmoduleId::parse(c[0]), std::stoi(c[1]), PositionSelector::parse(c[2])},
                       std::stod(c[3]), attr_method_from_name(c[4]), std::stoi(c[5])});
    return out;
}

inline std::vector<EdgeScore> parse_edge_scores_tsv(const std::string& text) {
    auto rows = detail::parse_tsv(
        text,
        "up_site\tup_feature\tup_position\tdown_site\tdown_feature\tdown_position\tscore\t"
        "method\tn_examples",
        9);
    std::vector<EdgeScore> out;
    for (const auto& c : rows)
        out.push_back({{SubmoduleId::parse(c[0]), std::stoi(c[1]), PositionSelector::parse(c[2])},
                       {SubmoduleId::parse(c[3]), std::stoi(c[4]), PositionSelector::parse(c[5])},
                       std::stod(c[6]), attr_method_from_name(c[7]), std::stoi(c[8])});
    return out;
}

}  // namespace sfc
