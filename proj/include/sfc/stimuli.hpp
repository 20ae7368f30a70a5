#pragma once

// Garden-path stimulus generation and behavioral evaluation. Each structure
// has one fixed frame; the three conditions differ only in the verb's
// subcategorization class, so items within a triplet are length-matched:
//   NPZ : "sub the N1 V the N2"   gp ","  non-gp "was"
//   NPS : "the N1 V the N2"       gp "."  non-gp "was"
//   MVRR: "the N1 V the N2"       gp "."  non-gp "was"
// The gp token is the continuation consistent with the locally preferred
// (garden-path) attachment of N2; the non-gp token is consistent with the
// alternative reading.

#include <sstream>

#include "sfc/grammar.hpp"
#include "sfc/model.hpp"

namespace sfc {

struct GardenPathTemplate {
    GpStructure structure;
    bool has_subordinator = false;
    int verb_position = 0;
    int final_noun_position = 0;
    std::string gp_token;
    std::string nongp_token;
};

inline GardenPathTemplate gp_template(GpStructure s) {
    switch (s) {
        case GpStructure::NPZ: return {s, true, 3, 5, ",", "was"};
        case GpStructure::NPS: return {s, false, 2, 4, ".", "was"};
        case GpStructure::MVRR: return {s, false, 2, 4, ".", "was"};
    }
    fail("bad structure");
}

inline const std::vector<std::string>& condition_verb_class(const GrammarSpec& g, GpStructure s,
                                                            GpCondition c) {
    if (c == GpCondition::gp) return g.verbs_trans;
    switch (s) {
        case GpStructure::NPZ:
            return c == GpCondition::ambiguous ? g.verbs_ambitrans : g.verbs_intrans;
        case GpStructure::NPS:
            return c == GpCondition::ambiguous ? g.verbs_nps_ambiguous : g.verbs_sc_only;
        case GpStructure::MVRR:
            return c == GpCondition::ambiguous ? g.verbs_mvrr_ambiguous
                                               : g.verbs_participle_only;
    }
    fail("bad structure");
}

constexpr GpCondition kConditions[] = {GpCondition::ambiguous, GpCondition::gp,
                                       GpCondition::non_gp};
constexpr GpStructure kStructures[] = {GpStructure::NPZ, GpStructure::NPS, GpStructure::MVRR};

// Matched triplets: nouns and determiners are sampled once per item, the verb
// per condition. Output order is structure-major, then item, then condition.
inline std::vector<Stimulus> generate_stimuli(const GrammarSpec& grammar, int items_per_cell,
                                              uint64_t seed) {
    grammar.validate();
    require(items_per_cell >= 1, "items_per_cell must be >= 1");
    Rng rng(seed);
    auto choose = [&](const std::vector<std::string>& v) { return v[rng.index(v.size())]; };
    std::vector<Stimulus> out;
    for (GpStructure s : kStructures) {
        const auto tpl = gp_template(s);
        for (int item = 0; item < items_per_cell; ++item) {
            const std::string sub = choose(grammar.subordinators);
            const std::string d1 = choose(grammar.determiners);
            const std::string d2 = choose(grammar.determiners);
            const std::string n1 = choose(grammar.nouns);
            std::string n2 = choose(grammar.nouns);
            while (n2 == n1) n2 = choose(grammar.nouns);
            for (GpCondition c : kConditions) {
                Stimulus st;
                st.structure = s;
                st.condition = c;
                st.verb_position = tpl.verb_position;
                st.final_noun_position = tpl.final_noun_position;
                st.gp_token = tpl.gp_token;
                st.nongp_token = tpl.nongp_token;
                if (tpl.has_subordinator) st.tokens.push_back(sub);
                st.tokens.push_back(d1);
                st.tokens.push_back(n1);
                st.tokens.push_back(choose(condition_verb_class(grammar, s, c)));
                st.tokens.push_back(d2);
                st.tokens.push_back(n2);
                out.push_back(std::move(st));
            }
            // Conditions within a triplet must be length-matched.
            const std::size_t k = out.size();
            require(out[k - 1].tokens.size() == out[k - 2].tokens.size() &&
                        out[k - 2].tokens.size() == out[k - 3].tokens.size(),
                    "stimulus conditions not length-matched");
        }
    }
    return out;
}

// ---- TSV io ----

inline std::string stimuli_tsv(const std::vector<Stimulus>& stimuli) {
    std::ostringstream os;
    os << "structure\tcondition\ttext\tverb_position\tfinal_noun_position\tgp_token\tnongp_token\n";
    for (const auto& s : stimuli)
        os << structure_name(s.structure) << "\t" << condition_name(s.condition) << "\t"
           << s.text() << "\t" << s.verb_position << "\t" << s.final_noun_position << "\t"
           << s.gp_token << "\t" << s.nongp_token << "\n";
    return os.str();
}

inline std::vector<Stimulus> parse_stimuli_tsv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), "empty stimulus file");
    require(line.rfind("structure\t", 0) == 0, "missing stimulus TSV header");
    std::vector<Stimulus> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i)
            if (i == line.size() || line[i] == '\t') {
                f.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        require(f.size() == 7, "bad stimulus TSV line: " + line);
        Stimulus s;
        s.structure = structure_from_name(f[0]);
        s.condition = condition_from_name(f[1]);
        s.tokens = Tokenizer::split(f[2]);
        s.verb_position = std::stoi(f[3]);
        s.final_noun_position = std::stoi(f[4]);
        s.gp_token = f[5];
        s.nongp_token = f[6];
        require(s.verb_position >= 0 && s.verb_position < static_cast<int>(s.tokens.size()) &&
                    s.final_noun_position >= 0 &&
                    s.final_noun_position < static_cast<int>(s.tokens.size()),
                "stimulus annotation out of range");
        out.push_back(std::move(s));
    }
    return out;
}

// Metric for one stimulus: positive side is the gp-consistent token so that
// m = p(GP) - p(non-GP) (or the logit difference).
inline MetricSpec stimulus_metric(const Stimulus& s, const Tokenizer& tok,
                                  MetricMode mode = MetricMode::prob_diff) {
    MetricSpec m;
    m.mode = mode;
    m.positive_tokens = {tok.id(s.gp_token)};
    m.negative_tokens = {tok.id(s.nongp_token)};
    return m;
}

// ---- behavioral eval ----

struct BehavioralCell {
    GpStructure structure;
    GpCondition condition;
    int n = 0;
    double mean_p_gp = 0.0;
    double mean_p_nongp = 0.0;
    double mean_m = 0.0;
    double sem_m = 0.0;
};

struct BehavioralResult {
    std::vector<BehavioralCell> cells;  // structure-major, condition order as kConditions

    const BehavioralCell& cell(GpStructure s, GpCondition c) const {
        for (const auto& x : cells)
            if (x.structure == s && x.condition == c) return x;
        fail("no behavioral cell for " + std::string(structure_name(s)) + "/" +
             condition_name(c));
    }
};

inline BehavioralResult behavioral_eval(const TransformerModel& model,
                                        const std::vector<Stimulus>& stimuli) {
    BehavioralResult res;
    for (GpStructure s : kStructures) {
        for (GpCondition c : kConditions) {
            BehavioralCell cell{s, c};
            std::vector<double> ms;
            for (const auto& st : stimuli) {
                if (st.structure != s || st.condition != c) continue;
                const auto toks = model.tokenizer().encode(st.tokens);
                const Tensor lg = model.logits(toks);
                const std::size_t v = lg.dim(1);
                std::vector<double> p(v);
                detail::softmax_row(lg.data().data() + (toks.size() - 1) * v, p.data(), v);
                const double pg = p[static_cast<std::size_t>(model.tokenizer().id(st.gp_token))];
                const double pn =
                    p[static_cast<std::size_t>(model.tokenizer().id(st.nongp_token))];
                cell.mean_p_gp += pg;
                cell.mean_p_nongp += pn;
                ms.push_back(pg - pn);
            }
            if (ms.empty()) continue;
            cell.n = static_cast<int>(ms.size());
            cell.mean_p_gp /= cell.n;
            cell.mean_p_nongp /= cell.n;
            for (double m : ms) cell.mean_m += m;
            cell.mean_m /= cell.n;
            double var = 0.0;
            for (double m : ms) var += (m - cell.mean_m) * (m - cell.mean_m);
            if (cell.n > 1) {
                var /= cell.n - 1;
                cell.sem_m = std::sqrt(var / cell.n);
            }
            res.cells.push_back(cell);
        }
    }
    return res;
}

inline std::string behavioral_tsv(const BehavioralResult& res) {
    std::ostringstream os;
    os << "structure\tcondition\tn\tmean_p_gp\tmean_p_nongp\tmean_m\tsem_m\n";
    for (const auto& c : res.cells)
        os << structure_name(c.structure) << "\t" << condition_name(c.condition) << "\t" << c.n
           << "\t" << c.mean_p_gp << "\t" << c.mean_p_nongp << "\t" << c.mean_m << "\t" << c.sem_m
           << "\n";
    return os.str();
}

}  // namespace sfc
