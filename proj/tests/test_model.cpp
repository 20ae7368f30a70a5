#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "sfc/model.hpp"
#include "sfc/stimuli.hpp"

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

// Straight-line reimplementation of the forward pass with plain loops; no
// tape machinery. Used as an independent oracle.
struct Mat {
    std::size_t r = 0, c = 0;
    std::vector<double> v;
    Mat() = default;
    Mat(std::size_t r_, std::size_t c_) : r(r_), c(c_), v(r_ * c_, 0.0) {}
    double& at(std::size_t i, std::size_t j) { return v[i * c + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

Mat from_tensor(const Tensor& t) {
    Mat m(t.dim(0), t.shape().size() == 2 ? t.dim(1) : 1);
    std::copy(t.data().begin(), t.data().end(), m.v.begin());
    return m;
}

Mat mm(const Mat& a, const Mat& b) {
    Mat c(a.r, b.c);
    for (std::size_t i = 0; i < a.r; ++i)
        for (std::size_t j = 0; j < b.c; ++j)
            for (std::size_t p = 0; p < a.c; ++p) c.at(i, j) += a.at(i, p) * b.at(p, j);
    return c;
}

Mat oracle_forward(const TransformerModel& model, const std::vector<int>& toks) {
    const auto& cfg = model.config();
    const auto& P = model.params();
    auto M = [&](const std::string& n) { return from_tensor(P.at(n)); };
    const std::size_t T = toks.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t dh = d / static_cast<std::size_t>(cfg.n_heads);

    Mat tok_emb = M("tok_emb"), pos_emb = M("pos_emb");
    Mat h(T, d);
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < d; ++j)
            h.at(i, j) = tok_emb.at(static_cast<std::size_t>(toks[i]), j) + pos_emb.at(i, j);

    auto layer_norm = [&](const Mat& x, const Mat& g, const Mat& b) {
        Mat r(x.r, x.c);
        for (std::size_t i = 0; i < x.r; ++i) {
            double mu = 0.0;
            for (std::size_t j = 0; j < x.c; ++j) mu += x.at(i, j);
            mu /= double(x.c);
            double var = 0.0;
            for (std::size_t j = 0; j < x.c; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
            var /= double(x.c);
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t j = 0; j < x.c; ++j)
                r.at(i, j) = g.v[j] * ((x.at(i, j) - mu) * inv) + b.v[j];
        }
        return r;
    };
    auto add_bias = [&](Mat x, const Mat& b) {
        for (std::size_t i = 0; i < x.r; ++i)
            for (std::size_t j = 0; j < x.c; ++j) x.at(i, j) += b.v[j];
        return x;
    };

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string k = std::to_string(l);
        Mat x = layer_norm(h, M("ln1." + k + ".g"), M("ln1." + k + ".b"));
        Mat q = add_bias(mm(x, M("attn." + k + ".wq")), M("attn." + k + ".bq"));
        Mat kk = add_bias(mm(x, M("attn." + k + ".wk")), M("attn." + k + ".bk"));
        Mat vv = add_bias(mm(x, M("attn." + k + ".wv")), M("attn." + k + ".bv"));
        Mat concat(T, d);
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            const std::size_t c0 = static_cast<std::size_t>(hd) * dh;
            Mat att(T, T);
            for (std::size_t i = 0; i < T; ++i) {
                std::vector<double> s(i + 1);
                for (std::size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    for (std::size_t p = 0; p < dh; ++p)
                        dot += q.at(i, c0 + p) * kk.at(j, c0 + p);
                    s[j] = dot / std::sqrt(double(dh));
                }
                double mx = s[0];
                for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, s[j]);
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    att.at(i, j) = std::exp(s[j] - mx);
                    sum += att.at(i, j);
                }
                for (std::size_t j = 0; j <= i; ++j) att.at(i, j) /= sum;
            }
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t p = 0; p < dh; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) acc += att.at(i, j) * vv.at(j, c0 + p);
                    concat.at(i, c0 + p) = acc;
                }
        }
        Mat attn = add_bias(mm(concat, M("attn." + k + ".wo")), M("attn." + k + ".bo"));
        for (std::size_t i = 0; i < T * d; ++i) h.v[i] += attn.v[i];

        Mat m_in = layer_norm(h, M("ln2." + k + ".g"), M("ln2." + k + ".b"));
        Mat a1 = add_bias(mm(m_in, M("mlp." + k + ".w1")), M("mlp." + k + ".b1"));
        for (double& x2 : a1.v) x2 = std::max(x2, 0.0);
        Mat a2 = add_bias(mm(a1, M("mlp." + k + ".w2")), M("mlp." + k + ".b2"));
        for (std::size_t i = 0; i < T * d; ++i) h.v[i] += a2.v[i];
    }
    Mat fin = layer_norm(h, M("lnf.g"), M("lnf.b"));
    return add_bias(mm(fin, M("unembed.w")), M("unembed.b"));
}

}  // namespace

TEST_CASE("tape forward matches independent oracle") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    const std::vector<int> toks = {3, 1, 4, 1, 5, 9, 2, 6};
    const Tensor lg = model.logits(toks);
    const Mat oracle = oracle_forward(model, toks);
    REQUIRE(lg.dim(0) == toks.size());
    REQUIRE(lg.dim(1) == 11);
    for (std::size_t i = 0; i < toks.size(); ++i)
        for (std::size_t j = 0; j < 11; ++j)
            REQUIRE_THAT(lg.at2(i, j), Catch::Matchers::WithinAbs(oracle.at(i, j), 1e-12));
}

TEST_CASE("causal masking: future tokens cannot affect earlier logits") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    std::vector<int> a = {3, 1, 4, 1, 5};
    std::vector<int> b = a;
    b.back() = 9;
    const Tensor la = model.logits(a), lb = model.logits(b);
    for (std::size_t i = 0; i + 1 < a.size(); ++i)
        for (std::size_t j = 0; j < la.dim(1); ++j) CHECK(la.at2(i, j) == lb.at2(i, j));
    bool last_differs = false;
    for (std::size_t j = 0; j < la.dim(1); ++j)
        if (la.at2(a.size() - 1, j) != lb.at2(a.size() - 1, j)) last_differs = true;
    CHECK(last_differs);
}

TEST_CASE("forward is deterministic and site activations are exposed") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    const std::vector<int> toks = {0, 7, 2};
    auto e1 = model.forward(toks);
    auto e2 = model.forward(toks);
    for (const auto& site : model.all_sites()) {
        const Tensor& v1 = e1.value(raw_hook_name(site));
        const Tensor& v2 = e2.value(raw_hook_name(site));
        REQUIRE(v1.shape() == std::vector<std::size_t>({3, 16}));
        for (std::size_t i = 0; i < v1.numel(); ++i) CHECK(v1.data()[i] == v2.data()[i]);
    }
}

TEST_CASE("raw activation edits") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    const std::vector<int> toks = {0, 7, 2, 5};
    ActivationEdit e;
    e.site = {SiteKind::attn_out, 1};
    e.position = PositionSelector::at(2);
    e.mode = EditMode::set_raw;
    e.feature = 3;
    e.value = 10.0;
    auto ev = model.forward_with_edits(toks, {e});
    CHECK(ev.value(raw_hook_name(e.site)).at2(2, 3) == 10.0);  // hook output carries the edit
    const Tensor base = model.logits(toks);
    const Tensor edited = ev.value("logits");
    bool differs = false;
    for (std::size_t i = 0; i < base.numel(); ++i)
        if (base.data()[i] != edited.data()[i]) differs = true;
    CHECK(differs);

    SECTION("conflicting edits rejected") {
        CHECK_THROWS_AS(model.forward_with_edits(toks, {e, e}), Error);
    }
    SECTION("feature edits need a spliced model") {
        ActivationEdit f = e;
        f.mode = EditMode::set_feature;
        CHECK_THROWS_AS(model.forward_with_edits(toks, {f}), Error);
    }
    SECTION("bad site rejected") {
        ActivationEdit f = e;
        f.site.layer = 99;
        CHECK_THROWS_AS(model.forward_with_edits(toks, {f}), Error);
    }
    SECTION("selector positions resolve against stimulus annotations") {
        Stimulus st;
        st.tokens = {"a", "b", "c", "d"};
        st.verb_position = 1;
        st.final_noun_position = 3;
        ActivationEdit f = e;
        f.position = PositionSelector::verb();
        auto ev2 = model.forward_with_edits(toks, {f}, &st);
        ActivationEdit g = e;
        g.position = PositionSelector::at(1);
        auto ev3 = model.forward_with_edits(toks, {g});
        CHECK(ev2.value("logits").at2(3, 0) == ev3.value("logits").at2(3, 0));
        CHECK_THROWS_AS(model.forward_with_edits(toks, {f}), Error);
    }
}

TEST_CASE("metric spec on tape matches direct computation") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    const std::vector<int> toks = {1, 2, 3};
    for (MetricMode mode : {MetricMode::prob_diff, MetricMode::logit_diff}) {
        MetricSpec ms;
        ms.mode = mode;
        ms.positive_tokens = {4, 6};
        ms.negative_tokens = {0};
        auto ft = model.build_tape(3);
        NodeId mnode = TransformerModel::metric_node(ft->tape, ft->logits, ms, 3);
        Evaluation ev(ft->tape, model.inputs_for(toks));
        CHECK_THAT(ev.value(mnode).item(),
                   Catch::Matchers::WithinAbs(model.next_token_metric(toks, ms), 1e-14));
    }
    MetricSpec bad;
    bad.positive_tokens = {1};
    bad.negative_tokens = {1};
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("gradient at a site hook matches finite differences") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    const std::vector<int> toks = {1, 2, 3, 4};
    MetricSpec ms;
    ms.mode = MetricMode::logit_diff;
    ms.positive_tokens = {5};
    ms.negative_tokens = {2};
    auto ft = model.build_tape(4);
    NodeId mnode = TransformerModel::metric_node(ft->tape, ft->logits, ms, 4);
    auto lookup = model.inputs_for(toks);
    Evaluation ev(ft->tape, lookup);
    const std::string site = raw_hook_name({SiteKind::residual, 0});
    Tensor g = ev.gradient(mnode, ft->tape.named(site));
    Tensor fd = finite_difference_gradient(ft->tape, lookup, mnode, site, 1e-5);
    for (std::size_t i = 0; i < g.numel(); ++i)
        REQUIRE_THAT(g.data()[i], Catch::Matchers::WithinAbs(fd.data()[i], 1e-6));
}

TEST_CASE("checkpoint round trip is bit-exact") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    const auto dir = std::filesystem::temp_directory_path() / "sfc_model_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "model.sfct").string();
    model.save(path);
    auto back = TransformerModel::load(path);
    CHECK(back.config().d_model == 16);
    CHECK(back.tokenizer().vocab() == model.tokenizer().vocab());
    const std::vector<int> toks = {2, 4, 6};
    const Tensor a = model.logits(toks), b = back.logits(toks);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    std::filesystem::remove_all(dir);
}

TEST_CASE("lm training reduces loss") {
    auto cfg = tiny_config();
    auto tok = tiny_vocab();
    // simple deterministic pattern language: w_i is followed by w_{(i+1)%8}
    std::vector<std::vector<int>> corpus;
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        std::vector<int> s;
        int x = static_cast<int>(rng.index(8));
        for (int j = 0; j < 6; ++j) {
            s.push_back(x);
            x = (x + 1) % 8;
        }
        corpus.push_back(std::move(s));
    }
    auto model = TransformerModel::random_init(cfg, tok);
    const double before = mean_cross_entropy(model, corpus);
    LmTrainConfig tc;
    tc.epochs = 12;
    tc.batch_size = 16;
    tc.learning_rate = 3e-3;
    auto log = train_lm(model, corpus, tc);
    REQUIRE(!log.diverged);
    REQUIRE(log.epoch_loss.size() == 12);
    const double after = mean_cross_entropy(model, corpus);
    CHECK(after < before * 0.5);
    CHECK(log.epoch_loss.back() < log.epoch_loss.front());
}
