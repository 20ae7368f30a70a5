#pragma once

// Grouped feature clamping with matched random controls.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "parallel.hpp"
#include "rng.hpp"
#include "sae.hpp"
#include "stimuli.hpp"

namespace sfc {

struct FeatureGroup {
    std::string label;
    std::vector<FeatureCoord> members;
    double clamp_value = 0.0;
};

struct InterventionPlan {
    std::vector<FeatureGroup> groups;
    uint64_t control_seed = 0;

    void validate() const {
        std::map<std::pair<std::string, int>, double> seen;  // (site/pos key, feature) -> value
        for (const auto& g : groups) {
            require(!g.members.empty(), "feature group '" + g.label + "' has no members");
            require(g.clamp_value >= 0.0,
                    "clamp value must be >= 0 (features are post-ReLU) in group '" + g.label +
                        "'");
            for (const auto& c : g.members) {
                auto key = std::make_pair(c.site.str() + "@" + c.position.str(), c.feature);
                auto [it, inserted] = seen.emplace(key, g.clamp_value);
                if (!inserted)
                    require(it->second == g.clamp_value,
                            "coordinate " + c.str() + " appears in two groups with different "
                            "clamp values");
            }
        }
    }

    std::vector<ActivationEdit> edits() const {
        std::vector<ActivationEdit> out;
        for (const auto& g : groups)
            for (const auto& c : g.members)
                out.push_back({c.site, c.position, EditMode::set_feature, c.feature,
                               g.clamp_value});
        return out;
    }
};

struct InterventionCell {
    int n = 0;
    double mean_p_gp = 0.0;
    double mean_p_nongp = 0.0;
    double mean_m = 0.0;
    double sem_m = 0.0;
};

struct InterventionReport {
    InterventionCell baseline;
    InterventionCell intervention;
    InterventionCell control;
    std::vector<int> skipped;  // stimulus indices with unresolvable selectors
};

// Same group sizes, clamp values, and position selectors; member features drawn
// uniformly without replacement from the same sites, disjoint from the
// original plan's members.
inline InterventionPlan make_random_control(const InterventionPlan& plan,
                                            const SplicedModel& spliced, uint64_t seed) {
    plan.validate();
    std::map<std::string, std::set<int>> taken;  // site -> features excluded per site
    for (const auto& g : plan.groups)
        for (const auto& c : g.members) taken[c.site.str()].insert(c.feature);

    Rng rng(seed);
    InterventionPlan control;
    control.control_seed = seed;
    for (const auto& g : plan.groups) {
        FeatureGroup cg;
        cg.label = g.label + " (random control)";
        cg.clamp_value = g.clamp_value;
        for (const auto& c : g.members) {
            const int F = spliced.sae(c.site).d_features();
            auto& used = taken[c.site.str()];
            require(static_cast<int>(used.size()) < F,
                    "feature space too small for a disjoint control at " + c.site.str());
            int feat;
            do {
                feat = static_cast<int>(rng.index(static_cast<std::size_t>(F)));
            } while (used.count(feat));
            used.insert(feat);
            cg.members.push_back({c.site, feat, c.position});
        }
        control.groups.push_back(cg);
    }
    return control;
}

// Default clamp magnitude: 2.0 scaled by the SAE's mean top-decile activation.
inline double suggested_clamp_value(const SplicedModel& spliced, const SubmoduleId& site,
                                    const std::vector<Stimulus>& stimuli) {
    require(!stimuli.empty(), "clamp calibration needs stimuli");
    std::vector<double> acts;
    for (const auto& st : stimuli) {
        const auto toks = spliced.model().tokenizer().encode(st.tokens);
        auto ev = spliced.forward(toks);
        for (double a : ev.value(feature_hook_name(site)).data())
            if (a > 0.0) acts.push_back(a);
    }
    require(!acts.empty(), "no active features at " + site.str() + " for clamp calibration");
    std::sort(acts.begin(), acts.end(), std::greater<>());
    const std::size_t k = std::max<std::size_t>(1, acts.size() / 10);
    double mean = 0.0;
    for (std::size_t i = 0; i < k; ++i) mean += acts[i];
    return 2.0 * mean / static_cast<double>(k);
}

namespace detail {

struct PgPn {
    double p_gp = 0.0, p_nongp = 0.0;
    bool skipped = false;
};

inline PgPn next_token_probs(const SplicedModel& spliced, const Stimulus& st,
                             const std::vector<ActivationEdit>& edits) {
    const Tokenizer& tok = spliced.model().tokenizer();
    const auto toks = tok.encode(st.tokens);
    auto ev = spliced.forward_with_edits(toks, edits, &st);
    const Tensor lg = ev.value("logits");
    const std::size_t v = lg.dim(1);
    std::vector<double> p(v);
    softmax_row(lg.data().data() + (toks.size() - 1) * v, p.data(), v);
    return {p[static_cast<std::size_t>(tok.id(st.gp_token))],
            p[static_cast<std::size_t>(tok.id(st.nongp_token))], false};
}

inline InterventionCell summarize(const std::vector<PgPn>& rows) {
    InterventionCell cell;
    std::vector<double> ms;
    for (const auto& r : rows) {
        if (r.skipped) continue;
        cell.mean_p_gp += r.p_gp;
        cell.mean_p_nongp += r.p_nongp;
        ms.push_back(r.p_gp - r.p_nongp);
    }
    cell.n = static_cast<int>(ms.size());
    if (cell.n == 0) return cell;
    cell.mean_p_gp /= cell.n;
    cell.mean_p_nongp /= cell.n;
    for (double m : ms) cell.mean_m += m;
    cell.mean_m /= cell.n;
    if (cell.n > 1) {
        double var = 0.0;
        for (double m : ms) var += (m - cell.mean_m) * (m - cell.mean_m);
        var /= cell.n - 1;
        cell.sem_m = std::sqrt(var / cell.n);
    }
    return cell;
}

}  // namespace detail

inline InterventionReport run_intervention(const SplicedModel& spliced,
                                           const InterventionPlan& plan,
                                           const std::vector<Stimulus>& stimuli,
                                           unsigned threads = 0) {
    plan.validate();
    require(!stimuli.empty(), "run_intervention needs stimuli");
    const InterventionPlan control = make_random_control(plan, spliced, plan.control_seed);
    const auto plan_edits = plan.edits();
    const auto control_edits = control.edits();

    struct Row {
        detail::PgPn base, clamp, ctrl;
    };
    auto rows = parallel_map<Row>(
        stimuli.size(),
        [&](std::size_t i) {
            const Stimulus& st = stimuli[i];
            Row row;
            try {
                row.clamp = detail::next_token_probs(spliced, st, plan_edits);
                row.ctrl = detail::next_token_probs(spliced, st, control_edits);
                row.base = detail::next_token_probs(spliced, st, {});
            } catch (const Error&) {
                row.base.skipped = row.clamp.skipped = row.ctrl.skipped = true;
            }
            return row;
        },
        threads);

    InterventionReport rep;
    std::vector<detail::PgPn> base, clamp, ctrl;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].base.skipped) {
            rep.skipped.push_back(static_cast<int>(i));
            continue;
        }
        base.push_back(rows[i].base);
        clamp.push_back(rows[i].clamp);
        ctrl.push_back(rows[i].ctrl);
    }
    require(!base.empty(), "every stimulus was skipped in run_intervention");
    rep.baseline = detail::summarize(base);
    rep.intervention = detail::summarize(clamp);
    rep.control = detail::summarize(ctrl);
    return rep;
}

}  // namespace sfc
