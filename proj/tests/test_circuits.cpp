#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "sfc/circuits.hpp"

using namespace sfc;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.max_seq_len = 8;
    c.rng_seed = 5;
    return c;
}

Tokenizer tiny_vocab() {
    std::vector<std::string> v;
    for (int i = 0; i < 11; ++i) v.push_back("w" + std::to_string(i));
    return Tokenizer(v);
}

SaeParams random_sae(SubmoduleId site, std::size_t F, std::size_t d, uint64_t seed) {
    Rng rng(seed);
    return {site, rng.gaussian_tensor({F, d}, 0.3), rng.gaussian_tensor({F}, 0.1),
            rng.gaussian_tensor({d, F}, 0.3), rng.gaussian_tensor({d}, 0.1)};
}

Stimulus make_stim(std::vector<std::string> words, int verb, int noun) {
    Stimulus s;
    s.tokens = std::move(words);
    s.verb_position = verb;
    s.final_noun_position = noun;
    s.gp_token = "w9";
    s.nongp_token = "w8";
    return s;
}

MetricSpec test_metric() {
    MetricSpec m;
    m.mode = MetricMode::logit_diff;
    m.positive_tokens = {9};
    m.negative_tokens = {8};
    return m;
}

struct Fixture {
    TransformerModel model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    SplicedModel spliced{model,
                         {random_sae({SiteKind::residual, 0}, 40, 16, 31),
                          random_sae({SiteKind::residual, 1}, 40, 16, 32)}};

    std::vector<Stimulus> stims() const {
        return {make_stim({"w3", "w1", "w4", "w1", "w5"}, 1, 3),
                make_stim({"w2", "w6", "w0", "w7", "w3"}, 1, 3),
                make_stim({"w5", "w5", "w1", "w2", "w9"}, 1, 3)};
    }

    // one node per feature per spliced site, position 'all' => keeps everything
    Circuit full_circuit() const {
        Circuit c;
        for (const auto& site : spliced.spliced_sites())
            for (int j = 0; j < spliced.sae(site).d_features(); ++j)
                c.nodes.push_back({{site, j, PositionSelector::all()}, 1.0, AttrMethod::atp, 1});
        return c;
    }
};

AttributionScore node(SubmoduleId site, int feat, double score,
                      AttrMethod m = AttrMethod::atp_ig) {
    return {{site, feat, PositionSelector::verb()}, score, m, 1};
}

EdgeScore edge(const FeatureCoord& up, const FeatureCoord& down, double score,
               AttrMethod m = AttrMethod::atp_ig) {
    return {up, down, score, m, 1};
}

}  // namespace

TEST_CASE("extract_circuit thresholds and ordering") {
    const SubmoduleId r0{SiteKind::residual, 0}, r1{SiteKind::residual, 1};
    std::vector<AttributionScore> ns = {node(r1, 3, 0.25), node(r0, 7, -0.5), node(r0, 2, 0.05),
                                        node(r1, 9, -0.02)};
    std::vector<EdgeScore> es = {edge(ns[1].coord, ns[0].coord, 0.01),
                                 edge(ns[2].coord, ns[0].coord, 0.9),   // dangling src
                                 edge(ns[1].coord, ns[3].coord, 0.9),   // dangling dst
                                 edge(ns[1].coord, ns[0].coord, 5e-4)}; // below threshold

    SECTION("absolute-score thresholds keep signed scores; dangling edges drop") {
        Circuit c = extract_circuit(ns, es, 0.1, 0.001);
        REQUIRE(c.nodes.size() == 2);
        CHECK(c.nodes[0].coord == ns[1].coord);  // residual.0 sorts before residual.1
        CHECK(c.nodes[1].coord == ns[0].coord);
        REQUIRE(c.edges.size() == 1);
        CHECK(c.edges[0].score == 0.01);
    }
    SECTION("threshold above max |score| gives an empty circuit") {
        Circuit c = extract_circuit(ns, es, 0.6, 0.001);
        CHECK(c.nodes.empty());
        CHECK(c.edges.empty());
    }
    SECTION("zero thresholds keep every scored node and non-dangling edge") {
        Circuit c = extract_circuit(ns, es, 0.0, 0.0);
        CHECK(c.nodes.size() == ns.size());
        CHECK(c.edges.size() == es.size());
    }
    SECTION("raising the node threshold never adds nodes") {
        std::size_t prev = ns.size() + 1;
        for (double thr : {0.0, 0.03, 0.1, 0.3, 0.6}) {
            Circuit c = extract_circuit(ns, es, thr, 0.0);
            CHECK(c.nodes.size() <= prev);
            prev = c.nodes.size();
        }
    }
    SECTION("mixed methods rejected") {
        auto bad = ns;
        bad[1].method = AttrMethod::exact;
        CHECK_THROWS_AS(extract_circuit(bad, es, 0.0, 0.0), Error);
        auto bad_edges = es;
        bad_edges[0].method = AttrMethod::atp;
        CHECK_THROWS_AS(extract_circuit(ns, bad_edges, 0.0, 0.0), Error);
    }
}

TEST_CASE("faithfulness endpoints and free sites") {
    Fixture fx;
    const auto metric = test_metric();
    const auto data = fx.stims();

    SECTION("all features kept gives F = 1") {
        auto res = faithfulness(fx.spliced, fx.full_circuit(), data, metric);
        CHECK(res.n_used == static_cast<int>(data.size()));
        CHECK_THAT(res.value, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
    SECTION("empty circuit with no free sites gives F = 0") {
        auto res = faithfulness(fx.spliced, Circuit{}, data, metric);
        CHECK_THAT(res.value, Catch::Matchers::WithinAbs(0.0, 1e-6));
    }
    SECTION("free sites are never ablated in either the circuit or the empty run") {
        Circuit c;
        c.free_sites = free_site_set(2, 1);
        const SubmoduleId r0{SiteKind::residual, 0}, r1{SiteKind::residual, 1};
        auto edits = detail::ablation_edits(fx.spliced, c, data[0], false);
        CHECK(edits.hooks.count(feature_hook_name(r0)) == 0);
        CHECK(edits.hooks.count(feature_hook_name(r1)) == 1);
        // the empty circuit's numerator is identically zero, but its empty-run
        // baseline shifts because the free layer keeps contributing
        const auto toks = fx.model.tokenizer().encode(data[0].tokens);
        const double with_free = fx.spliced.metric_value(toks, metric, edits);
        const double without_free = fx.spliced.metric_value(
            toks, metric, detail::ablation_edits(fx.spliced, Circuit{}, data[0], false));
        CHECK(with_free != without_free);
        auto res = faithfulness(fx.spliced, c, data, metric);
        CHECK(res.n_used == static_cast<int>(data.size()));
        CHECK_THAT(res.value, Catch::Matchers::WithinAbs(0.0, 1e-6));
    }
    SECTION("every site free makes the ratio undefined and every example excluded") {
        Circuit c;
        c.free_sites = free_site_set(2, 2);
        CHECK_THROWS_AS(faithfulness(fx.spliced, c, data, metric), Error);
    }
    SECTION("partial circuits land between the endpoints and grow with coverage") {
        // keep the first k features of each site at every position
        auto partial = [&](int k) {
            Circuit c;
            for (const auto& site : fx.spliced.spliced_sites())
                for (int j = 0; j < k; ++j)
                    c.nodes.push_back(
                        {{site, j, PositionSelector::all()}, 1.0, AttrMethod::atp, 1});
            return c;
        };
        const double f10 = faithfulness(fx.spliced, partial(10), data, metric).value;
        const double f40 = faithfulness(fx.spliced, partial(40), data, metric).value;
        CHECK_THAT(f40, Catch::Matchers::WithinAbs(1.0, 1e-6));
        CHECK(f10 != 0.0);
        CHECK(std::abs(f10 - 1.0) > 1e-6);
    }
    SECTION("denominator floor excludes examples and reports them") {
        FaithfulnessConfig cfg;
        cfg.denominator_floor = 1e12;  // everything excluded
        CHECK_THROWS_AS(faithfulness(fx.spliced, Circuit{}, data, metric, cfg), Error);
    }
    SECTION("prob_diff metric rejected") {
        MetricSpec m = metric;
        m.mode = MetricMode::prob_diff;
        CHECK_THROWS_AS(faithfulness(fx.spliced, Circuit{}, data, m), Error);
    }
    SECTION("parallel and single-threaded evaluation agree exactly") {
        FaithfulnessConfig seq;
        seq.threads = 1;
        Circuit c = fx.full_circuit();
        CHECK(faithfulness(fx.spliced, c, data, metric, seq).value ==
              faithfulness(fx.spliced, c, data, metric).value);
    }
}

TEST_CASE("circuit overlap metrics") {
    const SubmoduleId r0{SiteKind::residual, 0}, r1{SiteKind::residual, 1};
    Circuit a, b;
    a.nodes = {node(r0, 1, 1.0), node(r0, 2, 1.0), node(r1, 3, 1.0)};
    b.nodes = {node(r0, 2, 0.2), node(r1, 3, 0.2), node(r1, 4, 0.2)};

    SECTION("IoU counts (site, feature) pairs and is symmetric") {
        CHECK_THAT(circuit_iou(a, b).value, Catch::Matchers::WithinAbs(2.0 / 4.0, 1e-15));
        CHECK(circuit_iou(a, b).value == circuit_iou(b, a).value);
        CHECK(circuit_iou(a, a).value == 1.0);
        Circuit d;
        d.nodes = {node(r0, 30, 1.0)};
        CHECK(circuit_iou(a, d).value == 0.0);
    }
    SECTION("positions ignored by default, distinguished on request") {
        Circuit shifted = a;
        for (auto& n : shifted.nodes) n.coord.position = PositionSelector::final_noun();
        CHECK(circuit_iou(a, shifted).value == 1.0);
        CHECK(circuit_iou(a, shifted, false).value == 0.0);
    }
    SECTION("both empty is defined as 0 and flagged") {
        auto res = circuit_iou(Circuit{}, Circuit{});
        CHECK(res.value == 0.0);
        CHECK(res.both_empty);
        CHECK_FALSE(circuit_iou(a, b).both_empty);
    }
    SECTION("feature recall") {
        std::vector<FeatureCoord> ref = {a.nodes[0].coord, a.nodes[1].coord};
        std::vector<FeatureCoord> cand = {a.nodes[1].coord, a.nodes[2].coord, b.nodes[2].coord};
        CHECK_THAT(feature_recall(ref, cand), Catch::Matchers::WithinAbs(0.5, 1e-15));
        CHECK(feature_recall(ref, ref) == 1.0);
        CHECK(feature_recall(ref, {b.nodes[2].coord}) == 0.0);
        CHECK(feature_recall(ref, {}) == 0.0);
        CHECK_THROWS_AS(feature_recall({}, cand), Error);
    }
}

TEST_CASE("feature activation statistics") {
    Fixture fx;
    const auto data = fx.stims();
    const SubmoduleId r0{SiteKind::residual, 0};

    // find one feature active on every stimulus and one active on none (at verb)
    auto activation = [&](int feat, const Stimulus& st) {
        const auto toks = fx.model.tokenizer().encode(st.tokens);
        auto ev = fx.spliced.forward(toks);
        return ev.value(feature_hook_name(r0))
            .at2(static_cast<std::size_t>(st.resolve(PositionSelector::verb())),
                 static_cast<std::size_t>(feat));
    };
    int always = -1, never = -1;
    for (int j = 0; j < 40 && (always < 0 || never < 0); ++j) {
        int on = 0;
        for (const auto& st : data) on += activation(j, st) > 0.0 ? 1 : 0;
        if (on == static_cast<int>(data.size()) && always < 0) always = j;
        if (on == 0 && never < 0) never = j;
    }
    REQUIRE(always >= 0);
    REQUIRE(never >= 0);

    std::vector<GroupedNode> nodes = {
        {{r0, always, PositionSelector::verb()}, "pro"},
        {{r0, never, PositionSelector::verb()}, "anti"},
    };
    auto stats = feature_activation_stats(fx.spliced, data, nodes);
    REQUIRE(stats.count("pro") == 1);
    REQUIRE(stats.count("anti") == 1);
    CHECK(stats["anti"].mean_activation == 0.0);
    CHECK(stats["anti"].fraction_active == 0.0);
    CHECK(stats["pro"].fraction_active == 1.0);
    double mean = 0.0;
    for (const auto& st : data) mean += activation(always, st);
    mean /= static_cast<double>(data.size());
    CHECK_THAT(stats["pro"].mean_activation, Catch::Matchers::WithinAbs(mean, 1e-15));
    CHECK(stats["pro"].n_pairs == static_cast<int>(data.size()));
}

TEST_CASE("circuit serialization round trip") {
    const SubmoduleId r0{SiteKind::residual, 0}, r1{SiteKind::residual, 1};
    Circuit c;
    c.nodes = {node(r0, 7, -0.5), node(r1, 3, 0.25)};
    c.edges = {edge(c.nodes[0].coord, c.nodes[1].coord, 0.0125)};
    c.node_threshold = 0.1;
    c.edge_threshold = 0.001;
    c.free_sites = free_site_set(2, 1);
    c.method = AttrMethod::atp_ig;
    c.metric = "logit_diff w9-w8";
    c.dataset = "npz-ambiguous";

    const std::string path = "circuit_rt_test.json";
    save_circuit(c, path);
    Circuit back = load_circuit(path);

    CHECK(back.nodes.size() == c.nodes.size());
    for (std::size_t i = 0; i < c.nodes.size(); ++i) {
        CHECK(back.nodes[i].coord == c.nodes[i].coord);
        CHECK(back.nodes[i].score == c.nodes[i].score);
    }
    REQUIRE(back.edges.size() == 1);
    CHECK(back.edges[0].up == c.edges[0].up);
    CHECK(back.edges[0].down == c.edges[0].down);
    CHECK(back.edges[0].score == c.edges[0].score);
    CHECK(back.free_sites == c.free_sites);
    CHECK(back.method == c.method);
    CHECK(back.metric == c.metric);
    CHECK(back.dataset == c.dataset);
    CHECK(back.node_threshold == c.node_threshold);
    CHECK(back.edge_threshold == c.edge_threshold);

    // stable ordering: re-serializing the loaded circuit is byte-identical
    CHECK(circuit_to_json(back).dump(2) == circuit_to_json(c).dump(2));
    std::remove(path.c_str());
}
