#pragma once

// Synthetic grammar: a small probabilistic grammar over a ~60-word lexicon
// whose sentences carry projective gold dependency trees. The grammar is built
// so both readings of NP/Z and NP/S ambiguities occur in training:
//   "subordinator subject verb object , main-clause ."   (attachment reading)
//   "subordinator subject verb main-subject was ..."     (zero-complement reading)
//   "subject sc-verb object ." / "subject sc-verb subject was ..." (NP/S)
// plus reduced-relative frames for MV/RR.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sfc/rng.hpp"
#include "sfc/tensor.hpp"
#include "sfc/tokenizer.hpp"
#include "sfc/types.hpp"

namespace sfc {

struct DepTree {
    std::vector<std::string> tokens;
    std::vector<int> heads;  // 1-based head index per token, 0 = root

    std::string text() const {
        std::string s;
        for (std::size_t i = 0; i < tokens.size(); ++i) s += (i ? " " : "") + tokens[i];
        return s;
    }
};

inline bool is_single_rooted(const DepTree& t) {
    int roots = 0;
    for (int h : t.heads) roots += (h == 0);
    return roots == 1;
}

// Returns {-1,-1} if projective, else a crossing arc pair (token indices,
// 0-based).
inline std::pair<int, int> find_crossing_arcs(const DepTree& t) {
    const int n = static_cast<int>(t.tokens.size());
    for (int d1 = 0; d1 < n; ++d1) {
        if (t.heads[static_cast<std::size_t>(d1)] == 0) continue;
        int h1 = t.heads[static_cast<std::size_t>(d1)] - 1;
        int a1 = std::min(d1, h1), b1 = std::max(d1, h1);
        for (int d2 = d1 + 1; d2 < n; ++d2) {
            if (t.heads[static_cast<std::size_t>(d2)] == 0) continue;
            int h2 = t.heads[static_cast<std::size_t>(d2)] - 1;
            int a2 = std::min(d2, h2), b2 = std::max(d2, h2);
            const bool crosses = (a1 < a2 && a2 < b1 && b1 < b2) || (a2 < a1 && a1 < b2 && b2 < b1);
            if (crosses) return {d1, d2};
        }
    }
    return {-1, -1};
}

inline bool is_projective(const DepTree& t) { return find_crossing_arcs(t).first < 0; }

struct GrammarSpec {
    // Lexicon, partitioned by verb subcategorization class.
    std::vector<std::string> determiners = {"the", "a"};
    std::vector<std::string> nouns = {"senator", "politician", "lawyer",  "farmer", "guitarist",
                                      "teacher", "student",    "woman",   "bill",   "law",
                                      "song",    "letter",     "mail",    "horse",  "boat",
                                      "dog"};
    std::vector<std::string> verbs_ambitrans = {"attacked", "signed",   "studied",
                                                "watched",  "visited",  "followed"};
    std::vector<std::string> verbs_trans = {"rejected", "grabbed", "carried", "fixed"};
    std::vector<std::string> verbs_intrans = {"arrived", "slept", "departed", "smiled"};
    std::vector<std::string> verbs_nps_ambiguous = {"knew", "heard", "believed", "saw"};
    std::vector<std::string> verbs_sc_only = {"said", "thought", "hoped", "claimed"};
    std::vector<std::string> verbs_participle_only = {"shown", "given", "lent"};
    std::vector<std::string> verbs_mvrr_ambiguous = {"brought", "moved", "paid"};
    std::vector<std::string> subordinators = {"after", "when", "while", "because", "although"};
    std::vector<std::string> adjectives = {"old", "gone", "new", "late", "happy", "vetoed"};

    // Production probabilities; each map sums to 1.
    std::map<std::string, double> p_sentence = {
        {"subcl_main", 0.45}, {"main", 0.40}, {"rr", 0.15}};
    std::map<std::string, double> p_subclause_vp = {
        {"ambi_trans", 0.30}, {"trans", 0.15}, {"ambi_intrans", 0.25}, {"intrans", 0.30}};
    std::map<std::string, double> p_main_vp = {
        {"was_adj", 0.20}, {"intrans", 0.12}, {"trans", 0.15},     {"ambi_trans", 0.13},
        {"mvrr_trans", 0.10}, {"nps_obj", 0.12}, {"nps_scomp", 0.10}, {"sc_scomp", 0.08}};
    std::map<std::string, double> p_scomp = {{"was_adj", 0.70}, {"intrans", 0.30}};
    std::map<std::string, double> p_rr_verb = {{"participle", 0.50}, {"mvrr", 0.50}};
    // Comma probability after an objectless subordinate clause; clauses with an
    // object are always followed by a comma.
    double p_comma_after_intrans = 0.25;

    uint64_t rng_seed = 1;

    void validate() const {
        auto check_dist = [](const std::map<std::string, double>& p, const std::string& name) {
            double sum = 0.0;
            for (const auto& [k, v] : p) {
                require(v >= 0.0, "negative probability in " + name + ": " + k);
                sum += v;
            }
            require(std::abs(sum - 1.0) < 1e-9, "probabilities in " + name + " do not sum to 1");
        };
        check_dist(p_sentence, "p_sentence");
        check_dist(p_subclause_vp, "p_subclause_vp");
        check_dist(p_main_vp, "p_main_vp");
        check_dist(p_scomp, "p_scomp");
        check_dist(p_rr_verb, "p_rr_verb");
        require(p_comma_after_intrans >= 0.0 && p_comma_after_intrans <= 1.0,
                "p_comma_after_intrans out of range");
        for (const auto* cls :
             {&nouns, &verbs_ambitrans, &verbs_trans, &verbs_intrans, &verbs_nps_ambiguous,
              &verbs_sc_only, &verbs_participle_only, &verbs_mvrr_ambiguous, &subordinators,
              &determiners, &adjectives})
            require(!cls->empty(), "empty lexicon class");
    }

    std::vector<std::string> vocabulary() const {
        std::vector<std::string> v;
        for (const auto* cls :
             {&determiners, &nouns, &verbs_ambitrans, &verbs_trans, &verbs_intrans,
              &verbs_nps_ambiguous, &verbs_sc_only, &verbs_participle_only, &verbs_mvrr_ambiguous,
              &subordinators, &adjectives})
            v.insert(v.end(), cls->begin(), cls->end());
        v.push_back("was");
        v.push_back(",");
        v.push_back(".");
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    }

    Tokenizer tokenizer() const { return Tokenizer(vocabulary()); }
};

namespace detail {

class SentenceBuilder {
public:
    explicit SentenceBuilder(const GrammarSpec& g, Rng& rng) : g_(g), rng_(rng) {}

    DepTree sentence() {
        const auto kind = pick(g_.p_sentence);
        if (kind == "rr") {
            rr_sentence();
        } else {
            int sub_verb = -1;
            if (kind == "subcl_main") sub_verb = subordinate_clause();
            const int main_verb = main_clause();
            if (sub_verb >= 0) t_.heads[static_cast<std::size_t>(sub_verb)] = main_verb + 1;
            emit(".", main_verb);
            t_.heads[static_cast<std::size_t>(main_verb)] = 0;
        }
        return std::move(t_);
    }

private:
    // Emits a token; head is a 0-based token index, -1 for "patch later",
    // -2 for root.
    int emit(const std::string& w, int head) {
        t_.tokens.push_back(w);
        t_.heads.push_back(head == -2 ? 0 : head + 1);
        return static_cast<int>(t_.tokens.size()) - 1;
    }

    const std::string& choose(const std::vector<std::string>& v) {
        return v[rng_.index(v.size())];
    }

    std::string pick(const std::map<std::string, double>& dist) {
        std::vector<double> w;
        std::vector<const std::string*> keys;
        for (const auto& [k, p] : dist) {
            keys.push_back(&k);
            w.push_back(p);
        }
        return *keys[rng_.choice(w)];
    }

    // Emits "det noun"; noun's head is patched by the caller. Returns the noun
    // index.
    int noun_phrase() {
        const int det = emit(choose(g_.determiners), -1);
        const int n = emit(choose(g_.nouns), -1);
        t_.heads[static_cast<std::size_t>(det)] = n + 1;
        return n;
    }

    // Returns the subordinate-clause verb index; comma position (if any) is
    // recorded for head patching.
    int subordinate_clause() {
        const int sub = emit(choose(g_.subordinators), -1);
        const int subj = noun_phrase();
        const auto vp = pick(g_.p_subclause_vp);
        const std::string* vw = nullptr;
        bool has_object = false;
        if (vp == "ambi_trans") { vw = &choose(g_.verbs_ambitrans); has_object = true; }
        else if (vp == "trans") { vw = &choose(g_.verbs_trans); has_object = true; }
        else if (vp == "ambi_intrans") vw = &choose(g_.verbs_ambitrans);
        else vw = &choose(g_.verbs_intrans);
        const int v = emit(*vw, -1);
        t_.heads[static_cast<std::size_t>(subj)] = v + 1;
        t_.heads[static_cast<std::size_t>(sub)] = v + 1;
        if (has_object) {
            const int obj = noun_phrase();
            t_.heads[static_cast<std::size_t>(obj)] = v + 1;
            emit(",", v);
        } else if (rng_.uniform() < g_.p_comma_after_intrans) {
            emit(",", v);
        }
        return v;
    }

    // Returns the main-clause head index (verb or "was").
    int main_clause() {
        const int subj = noun_phrase();
        const auto vp = pick(g_.p_main_vp);
        int head;
        if (vp == "was_adj") {
            head = emit("was", -1);
            emit(choose(g_.adjectives), head);
        } else if (vp == "intrans") {
            head = emit(choose(g_.verbs_intrans), -1);
        } else if (vp == "trans" || vp == "ambi_trans" || vp == "mvrr_trans" || vp == "nps_obj") {
            const auto& cls = vp == "trans"        ? g_.verbs_trans
                              : vp == "ambi_trans" ? g_.verbs_ambitrans
                              : vp == "mvrr_trans" ? g_.verbs_mvrr_ambiguous
                                                   : g_.verbs_nps_ambiguous;
            head = emit(choose(cls), -1);
            const int obj = noun_phrase();
            t_.heads[static_cast<std::size_t>(obj)] = head + 1;
        } else {  // nps_scomp | sc_scomp
            const auto& cls = vp == "nps_scomp" ? g_.verbs_nps_ambiguous : g_.verbs_sc_only;
            head = emit(choose(cls), -1);
            const int inner_subj = noun_phrase();
            const auto sc = pick(g_.p_scomp);
            int sc_head;
            if (sc == "was_adj") {
                sc_head = emit("was", head);
                emit(choose(g_.adjectives), sc_head);
            } else {
                sc_head = emit(choose(g_.verbs_intrans), head);
            }
            t_.heads[static_cast<std::size_t>(inner_subj)] = sc_head + 1;
        }
        t_.heads[static_cast<std::size_t>(subj)] = head + 1;
        return head;
    }

    // "the N shown the N was ADJ ."
    void rr_sentence() {
        const int subj = noun_phrase();
        const auto& cls =
            pick(g_.p_rr_verb) == "participle" ? g_.verbs_participle_only : g_.verbs_mvrr_ambiguous;
        const int part = emit(choose(cls), subj);
        const int obj = noun_phrase();
        t_.heads[static_cast<std::size_t>(obj)] = part + 1;
        const int was = emit("was", -2);
        emit(choose(g_.adjectives), was);
        t_.heads[static_cast<std::size_t>(subj)] = was + 1;
        emit(".", was);
    }

    const GrammarSpec& g_;
    Rng& rng_;
    DepTree t_;
};

}  // namespace detail

inline std::vector<DepTree> generate_corpus(const GrammarSpec& grammar, std::size_t n_sentences) {
    grammar.validate();
    Rng rng(grammar.rng_seed);
    std::vector<DepTree> out;
    out.reserve(n_sentences);
    for (std::size_t i = 0; i < n_sentences; ++i)
        out.push_back(detail::SentenceBuilder(grammar, rng).sentence());
    return out;
}

// ---- file formats ----

inline std::string corpus_text(const std::vector<DepTree>& corpus) {
    std::string s;
    for (const auto& t : corpus) {
        s += t.text();
        s += "\n";
    }
    return s;
}

// One token per line: "index form head", 1-based indices, 0 = root; blank line
// between sentences.
inline std::string treebank_text(const std::vector<DepTree>& corpus) {
    std::ostringstream os;
    for (const auto& t : corpus) {
        for (std::size_t i = 0; i < t.tokens.size(); ++i)
            os << (i + 1) << "\t" << t.tokens[i] << "\t" << t.heads[i] << "\n";
        os << "\n";
    }
    return os.str();
}

inline std::vector<DepTree> parse_treebank(const std::string& text) {
    std::vector<DepTree> out;
    DepTree cur;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) {
            if (!cur.tokens.empty()) out.push_back(std::move(cur));
            cur = DepTree{};
            continue;
        }
        std::istringstream ls(line);
        int idx, head;
        std::string form;
        require(static_cast<bool>(ls >> idx >> form >> head), "bad treebank line: " + line);
        require(idx == static_cast<int>(cur.tokens.size()) + 1, "non-sequential treebank index");
        cur.tokens.push_back(form);
        cur.heads.push_back(head);
    }
    if (!cur.tokens.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace sfc
