#pragma once

// Arc-standard incremental parse-action probes: oracle action extraction from
// gold trees, MLP action probe over paired hidden states, UAS/UUAS evaluation,
// probe readings on ambiguous stimuli, and probe-metric feature attribution.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attribution.hpp"
#include "grammar.hpp"
#include "parallel.hpp"
#include "sae.hpp"

namespace sfc {

enum class ActionKind : int { left_arc = 0, right_arc = 1, gen = 2 };

inline const char* action_name(ActionKind a) {
    switch (a) {
        case ActionKind::left_arc: return "LEFT_ARC";
        case ActionKind::right_arc: return "RIGHT_ARC";
        case ActionKind::gen: return "GEN";
    }
    return "?";
}

// Stack of subtree root token indices (1-based) plus a buffer cursor.
// LEFT_ARC pops s1 (top) and s2 and draws an arc from s1 to s2 (head[s2]=s1,
// s1 goes back on the stack); RIGHT_ARC is the reverse; GEN shifts a token.
struct ParserState {
    int n = 0;
    std::vector<int> stack;
    int next = 1;               // next buffer token, 1-based
    std::vector<int> head;      // [n+1], 0 = unattached / root

    static ParserState init(int n_tokens) {
        require(n_tokens >= 1, "parser needs at least one token");
        ParserState s;
        s.n = n_tokens;
        s.head.assign(static_cast<std::size_t>(n_tokens) + 1, 0);
        return s;
    }

    int s1() const { return stack[stack.size() - 1]; }  // top
    int s2() const { return stack[stack.size() - 2]; }

    bool done() const { return next > n && stack.size() == 1; }

    bool legal(ActionKind a) const {
        if (a == ActionKind::gen) return next <= n;
        return stack.size() >= 2;
    }

    void apply(ActionKind a) {
        require(legal(a), std::string("illegal action: ") + action_name(a));
        switch (a) {
            case ActionKind::gen:
                stack.push_back(next++);
                break;
            case ActionKind::left_arc: {
                const int top = s1(), below = s2();
                head[static_cast<std::size_t>(below)] = top;
                stack.pop_back();
                stack.pop_back();
                stack.push_back(top);
                break;
            }
            case ActionKind::right_arc: {
                const int top = s1(), below = s2();
                head[static_cast<std::size_t>(top)] = below;
                stack.pop_back();
                break;
            }
        }
    }
};

inline std::vector<ActionKind> oracle_actions(const DepTree& tree) {
    const int n = static_cast<int>(tree.tokens.size());
    require(n >= 1, "empty tree");
    require(is_single_rooted(tree), "oracle requires a single-rooted tree");
    const auto crossing = find_crossing_arcs(tree);
    require(crossing.first < 0, "non-projective tree: arcs at tokens " +
                                    std::to_string(crossing.first) + " and " +
                                    std::to_string(crossing.second) + " cross");

    std::vector<int> ndeps(static_cast<std::size_t>(n) + 1, 0);  // unattached dependents
    for (int h : tree.heads)
        if (h > 0) ++ndeps[static_cast<std::size_t>(h)];

    auto gold = [&](int i) { return tree.heads[static_cast<std::size_t>(i - 1)]; };
    ParserState st = ParserState::init(n);
    std::vector<ActionKind> actions;
    while (!st.done()) {
        ActionKind a = ActionKind::gen;
        if (st.stack.size() >= 2) {
            const int top = st.s1(), below = st.s2();
            if (gold(below) == top && ndeps[static_cast<std::size_t>(below)] == 0)
                a = ActionKind::left_arc;
            else if (gold(top) == below && ndeps[static_cast<std::size_t>(top)] == 0)
                a = ActionKind::right_arc;
        }
        require(a != ActionKind::gen || st.next <= st.n,
                "oracle stuck (tree is not arc-standard derivable)");
        if (a != ActionKind::gen) {
            const int dep = a == ActionKind::left_arc ? st.s2() : st.s1();
            --ndeps[static_cast<std::size_t>(gold(dep))];
        }
        st.apply(a);
        actions.push_back(a);
    }
    return actions;
}

// Replays an action sequence; returns 1-based heads (0 = root).
inline std::vector<int> replay_actions(int n_tokens, const std::vector<ActionKind>& actions) {
    ParserState st = ParserState::init(n_tokens);
    for (ActionKind a : actions) st.apply(a);
    require(st.done(), "action sequence does not finish the parse");
    return std::vector<int>(st.head.begin() + 1, st.head.end());
}

// The arc action that attaches the final noun (stack top) as a dependent of
// the verb below it, read off the oracle rather than hard-coded.
inline ActionKind gp_arc_action() {
    DepTree t;
    t.tokens = {"s", "v", "n"};
    t.heads = {2, 0, 2};  // subject and noun both attach to the verb
    ParserState st = ParserState::init(3);
    for (ActionKind a : oracle_actions(t)) {
        if (st.stack.size() >= 2 && st.s1() == 3 && st.s2() == 2) return a;
        st.apply(a);
    }
    fail("oracle never reached the (noun, verb) stack state");
}

// ---- action probe ----

// P(a) proportional to exp(e_a . relu(W1 [h1; h2] + b1) + b_a), h1 = stack
// top's representation, h2 = the one below.
struct ActionProbe {
    int layer = 0;  // residual stream layer the representations come from
    Tensor w1;      // [hidden, 2 d_model]
    Tensor b1;      // [hidden]
    Tensor e;       // [3, hidden]
    Tensor b;       // [3]

    int d_model() const { return static_cast<int>(w1.dim(1) / 2); }
    int hidden() const { return static_cast<int>(w1.dim(0)); }

    void validate() const {
        require(w1.rank() == 2 && w1.dim(1) % 2 == 0, "probe w1 must be [hidden, 2d]");
        require(b1.rank() == 1 && b1.dim(0) == w1.dim(0), "probe b1/w1 mismatch");
        require(e.rank() == 2 && e.dim(0) == 3 && e.dim(1) == w1.dim(0),
                "probe e must be [3, hidden]");
        require(b.rank() == 1 && b.dim(0) == 3, "probe b must be [3]");
        require(layer >= 0, "probe layer must be >= 0");
    }

    static ActionProbe random_init(int layer, int d_model, int hidden, uint64_t seed) {
        Rng rng(seed);
        ActionProbe p;
        p.layer = layer;
        p.w1 = rng.gaussian_tensor({static_cast<std::size_t>(hidden),
                                    static_cast<std::size_t>(2 * d_model)},
                                   std::sqrt(2.0 / (2 * d_model)));
        p.b1 = Tensor::zeros({static_cast<std::size_t>(hidden)});
        p.e = rng.gaussian_tensor({3, static_cast<std::size_t>(hidden)},
                                  std::sqrt(2.0 / hidden));
        p.b = Tensor::zeros({3});
        return p;
    }

    TensorMap params() const {
        return {{"probe.w1", w1}, {"probe.b1", b1}, {"probe.e", e}, {"probe.b", b}};
    }

    void set_params(const TensorMap& m) {
        w1 = m.at("probe.w1");
        b1 = m.at("probe.b1");
        e = m.at("probe.e");
        b = m.at("probe.b");
    }

    void save(const std::string& path) const {
        save_container(path, params());
        nlohmann::ordered_json sidecar{{"layer", layer}};
        write_file(path + ".json", sidecar.dump(2) + "\n");
    }

    static ActionProbe load(const std::string& path) {
        ActionProbe p;
        p.set_params(load_container(path));
        p.layer = nlohmann::json::parse(read_file(path + ".json")).at("layer").get<int>();
        p.validate();
        return p;
    }
};

// Declares probe parameter inputs on a tape and builds the 3-action logits for
// x = [h1; h2] of shape [1, 2d].
inline NodeId probe_logits_node(Tape& t, const ActionProbe& probe, NodeId x) {
    NodeId w1 = t.input("probe.w1", probe.w1.shape());
    NodeId b1 = t.input("probe.b1", probe.b1.shape());
    NodeId e = t.input("probe.e", probe.e.shape());
    NodeId b = t.input("probe.b", probe.b.shape());
    NodeId hid = t.relu(t.add_bias(t.matmul_nt(x, w1), b1));
    return t.add_bias(t.matmul_nt(hid, e), b);
}

inline std::array<double, 3> probe_forward(const ActionProbe& probe, const Tensor& h1,
                                           const Tensor& h2) {
    probe.validate();
    require(h1.rank() == 1 && h2.rank() == 1 && static_cast<int>(h1.dim(0)) == probe.d_model() &&
                static_cast<int>(h2.dim(0)) == probe.d_model(),
            "probe representation width mismatch");
    const int d = probe.d_model(), H = probe.hidden();
    std::vector<double> logits(3);
    for (int a = 0; a < 3; ++a) logits[static_cast<std::size_t>(a)] = probe.b.data()[a];
    for (int j = 0; j < H; ++j) {
        double pre = probe.b1.data()[static_cast<std::size_t>(j)];
        for (int k = 0; k < d; ++k) {
            pre += probe.w1.at2(static_cast<std::size_t>(j), static_cast<std::size_t>(k)) *
                   h1.data()[static_cast<std::size_t>(k)];
            pre += probe.w1.at2(static_cast<std::size_t>(j), static_cast<std::size_t>(d + k)) *
                   h2.data()[static_cast<std::size_t>(k)];
        }
        if (pre <= 0.0) continue;
        for (int a = 0; a < 3; ++a)
            logits[static_cast<std::size_t>(a)] +=
                probe.e.at2(static_cast<std::size_t>(a), static_cast<std::size_t>(j)) * pre;
    }
    std::array<double, 3> p{};
    detail::softmax_row(logits.data(), p.data(), 3);
    return p;
}

// ---- state collection and training ----

namespace detail {

inline Tensor tensor_row(const Tensor& m, int r) {
    Tensor out({m.dim(1)});
    auto d = out.mut();
    auto src = m.data();
    for (std::size_t j = 0; j < m.dim(1); ++j) d[j] = src[static_cast<std::size_t>(r) * m.dim(1) + j];
    return out;
}

}  // namespace detail

struct ProbeState {
    std::vector<double> x;  // [h_s1; h_s2]
    ActionKind action;
};

// Oracle states with >= 2 stack items, paired with residual representations of
// the top-two subtree head tokens.
inline std::vector<ProbeState> collect_probe_states(const TransformerModel& model,
                                                    const std::vector<DepTree>& treebank,
                                                    int layer, unsigned threads = 0) {
    require(!treebank.empty(), "empty treebank");
    require(layer >= 0 && layer < model.config().n_layers, "probe layer out of range");
    const SubmoduleId site{SiteKind::residual, layer};
    auto per_tree = parallel_map<std::vector<ProbeState>>(
        treebank.size(),
        [&](std::size_t i) {
            const DepTree& tree = treebank[i];
            const auto toks = model.tokenizer().encode(tree.tokens);
            auto ev = model.forward(toks);
            const Tensor& h = ev.value(raw_hook_name(site));
            const std::size_t d = h.dim(1);
            std::vector<ProbeState> states;
            ParserState st = ParserState::init(static_cast<int>(tree.tokens.size()));
            for (ActionKind a : oracle_actions(tree)) {
                if (st.stack.size() >= 2) {
                    ProbeState ps;
                    ps.action = a;
                    ps.x.resize(2 * d);
                    for (std::size_t j = 0; j < d; ++j) {
                        ps.x[j] = h.at2(static_cast<std::size_t>(st.s1() - 1), j);
                        ps.x[d + j] = h.at2(static_cast<std::size_t>(st.s2() - 1), j);
                    }
                    states.push_back(std::move(ps));
                }
                st.apply(a);
            }
            return states;
        },
        threads);
    std::vector<ProbeState> all;
    for (auto& v : per_tree)
        for (auto& s : v) all.push_back(std::move(s));
    return all;
}

struct ProbeTrainConfig {
    int hidden = 128;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 10;
    int batch_size = 64;
    uint64_t rng_seed = 0;
    unsigned threads = 0;
};

struct ProbeTrainLog {
    std::vector<double> epoch_loss;
    bool diverged = false;
    int n_states = 0;
};

inline ActionProbe train_probe(const TransformerModel& model,
                               const std::vector<DepTree>& treebank, int layer,
                               const ProbeTrainConfig& tc, ProbeTrainLog* log_out = nullptr) {
    const auto states = collect_probe_states(model, treebank, layer, tc.threads);
    require(!states.empty(), "no probe training states collected");
    const int d = model.config().d_model;
    const int B = std::min<int>(tc.batch_size, static_cast<int>(states.size()));

    ActionProbe probe = ActionProbe::random_init(layer, d, tc.hidden, tc.rng_seed);
    TensorMap params = probe.params();
    TensorMap last_good = params;
    Adam opt(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);

    Tape t;
    NodeId x = t.input("x", {static_cast<std::size_t>(B), static_cast<std::size_t>(2 * d)});
    NodeId targets = t.input("targets", {static_cast<std::size_t>(B)});
    NodeId logits = probe_logits_node(t, probe, x);
    t.mark("loss", t.cross_entropy_rows(logits, targets));

    ProbeTrainLog log;
    log.n_states = static_cast<int>(states.size());
    Rng shuffle_rng(tc.rng_seed + 1);
    std::vector<std::size_t> order(states.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start + static_cast<std::size_t>(B) <= order.size();
             start += static_cast<std::size_t>(B)) {
            Tensor xb({static_cast<std::size_t>(B), static_cast<std::size_t>(2 * d)});
            Tensor yb({static_cast<std::size_t>(B)});
            auto xd = xb.mut();
            auto yd = yb.mut();
            for (int r = 0; r < B; ++r) {
                const ProbeState& s = states[order[start + static_cast<std::size_t>(r)]];
                std::copy(s.x.begin(), s.x.end(),
                          xd.begin() + static_cast<std::ptrdiff_t>(r) * 2 * d);
                yd[static_cast<std::size_t>(r)] = static_cast<double>(s.action);
            }
            Evaluation ev(t, lookup_maps({{"x", std::move(xb)}, {"targets", std::move(yb)}},
                                         params));
            const double loss = ev.value("loss").item();
            if (!std::isfinite(loss)) {
                log.diverged = true;
                probe.set_params(last_good);
                if (log_out) *log_out = log;
                return probe;
            }
            epoch_loss += loss;
            ++batches;
            auto grads = ev.backward(t.named("loss"));
            TensorMap gmap;
            for (const auto& [name, p] : params) {
                Tensor& g = grads[static_cast<std::size_t>(t.named(name))];
                if (g.numel() != 0) gmap.emplace(name, std::move(g));
            }
            opt.step(params, gmap);
        }
        require(batches > 0, "no full probe batches");
        log.epoch_loss.push_back(epoch_loss / batches);
        last_good = params;
    }
    probe.set_params(params);
    if (log_out) *log_out = log;
    return probe;
}

// ---- evaluation ----

struct ProbeEval {
    double uas = 0.0;
    double uuas = 0.0;
    double action_accuracy = 0.0;
    int n_sentences = 0;
    int n_failures = 0;  // decoder livelocks
};

namespace detail {

inline ActionKind argmax_legal(const std::array<double, 3>& p, const ParserState& st) {
    int best = -1;
    for (int a = 0; a < 3; ++a) {
        if (!st.legal(static_cast<ActionKind>(a))) continue;
        if (best < 0 || p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(best)])
            best = a;
    }
    require(best >= 0, "no legal action");
    return static_cast<ActionKind>(best);
}

}  // namespace detail

// Greedy decode with the probe; masked softmax over legal actions only.
inline std::vector<int> probe_decode(const TransformerModel& model, const ActionProbe& probe,
                                     const std::vector<std::string>& tokens, bool* failed) {
    const auto toks = model.tokenizer().encode(tokens);
    auto ev = model.forward(toks);
    const Tensor& h = ev.value(raw_hook_name({SiteKind::residual, probe.layer}));
    const int n = static_cast<int>(tokens.size());
    ParserState st = ParserState::init(n);
    if (failed) *failed = false;
    const std::size_t max_steps = 4 * static_cast<std::size_t>(n) + 8;
    std::size_t steps = 0;
    while (!st.done()) {
        if (++steps > max_steps) {
            if (failed) *failed = true;
            break;
        }
        if (st.stack.size() < 2) {
            if (!st.legal(ActionKind::gen)) {
                if (failed) *failed = true;
                break;
            }
            st.apply(ActionKind::gen);
            continue;
        }
        const auto p = probe_forward(probe, detail::tensor_row(h, st.s1() - 1),
                                     detail::tensor_row(h, st.s2() - 1));
        st.apply(detail::argmax_legal(p, st));
    }
    return std::vector<int>(st.head.begin() + 1, st.head.end());
}

inline ProbeEval eval_probe(const TransformerModel& model, const ActionProbe& probe,
                            const std::vector<DepTree>& treebank, unsigned threads = 0) {
    require(!treebank.empty(), "empty treebank");
    struct Row {
        int correct = 0, correct_undir = 0, tokens = 0, edges = 0;
        int action_hits = 0, action_states = 0;
        bool failed = false;
    };
    auto rows = parallel_map<Row>(
        treebank.size(),
        [&](std::size_t i) {
            const DepTree& tree = treebank[i];
            Row row;
            const auto pred = probe_decode(model, probe, tree.tokens, &row.failed);
            const int n = static_cast<int>(tree.tokens.size());
            row.tokens = n;
            std::set<std::pair<int, int>> gold_edges;
            for (int k = 0; k < n; ++k) {
                const int g = tree.heads[static_cast<std::size_t>(k)];
                if (pred[static_cast<std::size_t>(k)] == g) ++row.correct;
                if (g > 0) gold_edges.insert({std::min(k + 1, g), std::max(k + 1, g)});
            }
            row.edges = static_cast<int>(gold_edges.size());
            for (int k = 0; k < n; ++k) {
                const int p = pred[static_cast<std::size_t>(k)];
                if (p > 0 && gold_edges.count({std::min(k + 1, p), std::max(k + 1, p)}))
                    ++row.correct_undir;
            }
            // teacher-forced action accuracy over oracle states
            const auto toks = model.tokenizer().encode(tree.tokens);
            auto ev = model.forward(toks);
            const Tensor& h = ev.value(raw_hook_name({SiteKind::residual, probe.layer}));
            ParserState st = ParserState::init(n);
            for (ActionKind a : oracle_actions(tree)) {
                if (st.stack.size() >= 2) {
                    const auto p = probe_forward(probe, detail::tensor_row(h, st.s1() - 1),
                                                 detail::tensor_row(h, st.s2() - 1));
                    if (detail::argmax_legal(p, st) == a) ++row.action_hits;
                    ++row.action_states;
                }
                st.apply(a);
            }
            return row;
        },
        threads);

    ProbeEval out;
    long tokens = 0, correct = 0, edges = 0, undir = 0, hits = 0, states = 0;
    for (const auto& r : rows) {
        tokens += r.tokens;
        correct += r.correct;
        edges += r.edges;
        undir += r.correct_undir;
        hits += r.action_hits;
        states += r.action_states;
        out.n_failures += r.failed ? 1 : 0;
    }
    out.n_sentences = static_cast<int>(treebank.size());
    out.uas = tokens ? static_cast<double>(correct) / tokens : 0.0;
    out.uuas = edges ? static_cast<double>(undir) / edges : 0.0;
    out.action_accuracy = states ? static_cast<double>(hits) / states : 0.0;
    return out;
}

// ---- probe readings ----

// Action distribution at the state where the noun-headed subtree (stack top)
// sits above the verb-headed subtree.
inline std::array<double, 3> probe_reading(const TransformerModel& model,
                                           const ActionProbe& probe, const Stimulus& st) {
    const auto toks = model.tokenizer().encode(st.tokens);
    auto ev = model.forward(toks);
    const Tensor& h = ev.value(raw_hook_name({SiteKind::residual, probe.layer}));
    return probe_forward(probe, detail::tensor_row(h, st.final_noun_position),
                         detail::tensor_row(h, st.verb_position));
}

inline std::array<double, 3> mean_probe_reading(const TransformerModel& model,
                                                const ActionProbe& probe,
                                                const std::vector<Stimulus>& stimuli,
                                                unsigned threads = 0) {
    require(!stimuli.empty(), "mean_probe_reading needs stimuli");
    auto rows = parallel_map<std::array<double, 3>>(
        stimuli.size(), [&](std::size_t i) { return probe_reading(model, probe, stimuli[i]); },
        threads);
    std::array<double, 3> mean{};
    for (const auto& r : rows)
        for (int a = 0; a < 3; ++a) mean[static_cast<std::size_t>(a)] += r[static_cast<std::size_t>(a)];
    for (int a = 0; a < 3; ++a) mean[static_cast<std::size_t>(a)] /= static_cast<double>(rows.size());
    return mean;
}

// ---- probe-metric attribution (probe-feature recall experiment) ----

struct ProbeAttribConfig {
    AttrMethod method = AttrMethod::atp_ig;
    int K = 10;
    double baseline = 0.0;
    IgRule ig_rule = IgRule::as_written;
    double active_threshold = 0.0;
    unsigned threads = 0;
};

// Node scores against the probe metric P(positive) - P(negative) evaluated at
// the (final noun, verb) reading state, features taken at the same positions
// as circuit discovery (verb and final noun).
inline std::vector<AttributionScore> probe_node_scores(const SplicedModel& spliced,
                                                       const ActionProbe& probe,
                                                       ActionKind positive, ActionKind negative,
                                                       const std::vector<Stimulus>& dataset,
                                                       const ProbeAttribConfig& cfg = {}) {
    require(!dataset.empty(), "probe_node_scores needs a nonempty dataset");
    require(cfg.method != AttrMethod::exact,
            "exact ablation is defined against token metrics, not probe metrics");
    probe.validate();
    const auto sites = spliced.spliced_sites();
    const Tokenizer& tok = spliced.model().tokenizer();
    const std::vector<PositionSelector> positions = {PositionSelector::verb(),
                                                     PositionSelector::final_noun()};
    const SubmoduleId stream_site{SiteKind::residual, probe.layer};
    const auto probe_params = std::make_shared<InputMap>(probe.params());

    using ExampleScores = std::map<FeatureCoord, double>;
    auto score_example = [&](std::size_t idx) -> ExampleScores {
        const Stimulus& st = dataset[idx];
        const std::vector<int> tokens = tok.encode(st.tokens);
        const int T = static_cast<int>(tokens.size());
        auto ft = spliced.tape_for(T);
        Tape t = ft->tape;  // private copy: append the probe metric
        const std::string spliced_name = "spliced." + stream_site.str();
        NodeId resid = t.has_named(spliced_name) ? t.named(spliced_name)
                                                 : t.named(raw_hook_name(stream_site));
        NodeId x = t.concat_cols({t.row(resid, st.resolve(PositionSelector::final_noun())),
                                  t.row(resid, st.resolve(PositionSelector::verb()))});
        NodeId logits3 = probe_logits_node(t, probe, x);
        NodeId probs = t.softmax_vec(t.row(logits3, 0));
        NodeId metric = t.index_sum_diff(probs, {static_cast<int>(positive)},
                                         {static_cast<int>(negative)});
        auto base = spliced.inputs_for(tokens);
        InputLookup inputs = [base, probe_params](const std::string& name) -> const Tensor& {
            auto it = probe_params->find(name);
            return it != probe_params->end() ? it->second : base(name);
        };
        Evaluation clean(t, inputs);
        std::vector<Tensor> grads;
        if (cfg.method == AttrMethod::atp) grads = clean.backward(metric);

        ExampleScores out;
        for (const auto& site : sites) {
            const NodeId hnode = t.named(feature_hook_name(site));
            const Tensor& f = clean.value(hnode);
            for (const auto& sel : positions) {
                const int row = st.resolve(sel);
                require(row >= 0 && row < T, "annotated position out of range");
                for (std::size_t j = 0; j < f.dim(1); ++j) {
                    const double a = f.at2(static_cast<std::size_t>(row), j);
                    if (!(std::abs(a) > cfg.active_threshold)) continue;
                    const FeatureCoord coord{site, static_cast<int>(j), sel};
                    double s = 0.0;
                    if (cfg.method == AttrMethod::atp) {
                        const Tensor& g = grads[static_cast<std::size_t>(hnode)];
                        if (g.numel() != 0) s = a * g.at2(static_cast<std::size_t>(row), j);
                    } else {
                        s = ig_estimate(t, inputs, metric, feature_hook_name(site), row,
                                        static_cast<int>(j), a, cfg.baseline, cfg.K,
                                        cfg.ig_rule);
                    }
                    out[coord] += s;
                }
            }
        }
        return out;
    };

    auto per_example = parallel_map<ExampleScores>(dataset.size(), score_example, cfg.threads);
    std::map<FeatureCoord, double> sums;
    for (const auto& ex : per_example)
        for (const auto& [coord, s] : ex) sums[coord] += s;
    std::vector<AttributionScore> scores;
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

}  // namespace sfc
