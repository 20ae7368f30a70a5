#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "sfc/sae.hpp"

using namespace sfc;

namespace {

SaeParams random_sae(SubmoduleId site, std::size_t F, std::size_t d, uint64_t seed) {
    Rng rng(seed);
    SaeParams s{site, rng.gaussian_tensor({F, d}, 0.3), rng.gaussian_tensor({F}, 0.1),
                rng.gaussian_tensor({d, F}, 0.3), rng.gaussian_tensor({d}, 0.1)};
    s.validate();
    return s;
}

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

}  // namespace

TEST_CASE("encode/decode match Eq. 1-2 straight-line reimplementation") {
    auto s = random_sae({SiteKind::residual, 0}, 24, 8, 1);
    Rng rng(2);
    Tensor x = rng.gaussian_tensor({5, 8}, 1.0);
    Tensor f = s.encode(x);
    Tensor xh = s.decode(f);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 24; ++j) {
            double pre = s.b_e.data()[j];
            for (std::size_t k = 0; k < 8; ++k)
                pre += s.w_e.at2(j, k) * (x.at2(i, k) - s.b_d.data()[k]);
            REQUIRE_THAT(f.at2(i, j), Catch::Matchers::WithinAbs(std::max(pre, 0.0), 1e-12));
            CHECK(f.at2(i, j) >= 0.0);
        }
        for (std::size_t k = 0; k < 8; ++k) {
            double v = s.b_d.data()[k];
            for (std::size_t j = 0; j < 24; ++j) v += s.w_d.at2(k, j) * f.at2(i, j);
            REQUIRE_THAT(xh.at2(i, k), Catch::Matchers::WithinAbs(v, 1e-12));
        }
    }
    // trivial cases
    Tensor bd_row({1, 8});
    std::copy(s.b_d.data().begin(), s.b_d.data().end(), bd_row.mut().begin());
    SaeParams s0 = s;
    s0.b_e = Tensor::zeros({24});
    Tensor f0 = s0.encode(bd_row);
    for (double v : f0.data()) CHECK(v == 0.0);
    Tensor xh0 = s.decode(Tensor::zeros({1, 24}));
    for (std::size_t k = 0; k < 8; ++k) CHECK(xh0.at2(0, k) == s.b_d.data()[k]);
}

TEST_CASE("decode is affine") {
    auto s = random_sae({SiteKind::mlp_out, 1}, 12, 6, 3);
    Rng rng(4);
    Tensor f1 = rng.gaussian_tensor({2, 12}, 1.0);
    Tensor f2 = rng.gaussian_tensor({2, 12}, 1.0);
    Tensor sum({2, 12});
    for (std::size_t i = 0; i < 24; ++i) sum.mut()[i] = f1.data()[i] + f2.data()[i];
    Tensor a = s.decode(sum), b = s.decode(f1), c = s.decode(f2), z = s.decode(Tensor::zeros({2, 12}));
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK_THAT(a.data()[i] - b.data()[i] - c.data()[i] + z.data()[i],
                   Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("unregularized autoencoder reaches high variance explained") {
    Rng rng(7);
    // data in a 16-d space with nontrivial covariance
    Tensor basis = rng.gaussian_tensor({16, 16}, 1.0);
    Tensor data({512, 16});
    for (std::size_t i = 0; i < 512; ++i) {
        std::vector<double> z(16);
        for (auto& v : z) v = rng.gaussian();
        for (std::size_t j = 0; j < 16; ++j) {
            double x = 0.1 * rng.gaussian();
            for (std::size_t k = 0; k < 16; ++k) x += z[k] * basis.at2(k, j);
            data.mut()[i * 16 + j] = x;
        }
    }
    SaeTrainConfig tc;
    tc.d_features = 16;
    tc.sparsity_weight = 0.0;
    tc.steps = 3000;
    tc.batch_size = 64;
    tc.learning_rate = 2e-3;
    SaeTrainMetrics m;
    auto sae = train_sae(data, {SiteKind::residual, 0}, tc, &m);
    CHECK(m.fve > 0.99);
    for (double nrm : sae.decoder_column_norms()) {
        CHECK(std::isfinite(nrm));
        CHECK(nrm > 1e-6);
    }
}

TEST_CASE("planted dictionary recovery") {
    const std::size_t d = 64, F = 256, n = 4096;
    Rng rng(11);
    // ground-truth dictionary with unit columns
    Tensor D({d, F});
    for (std::size_t j = 0; j < F; ++j) {
        double nrm = 0.0;
        std::vector<double> col(d);
        for (auto& v : col) {
            v = rng.gaussian();
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (std::size_t i = 0; i < d; ++i) D.mut()[i * F + j] = col[i] / nrm;
    }
    std::vector<double> bias(d);
    for (auto& v : bias) v = 0.3 * rng.gaussian();
    Tensor data({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        // 5 of 256 features active with positive codes
        std::vector<std::size_t> active;
        while (active.size() < 5) {
            std::size_t j = rng.index(F);
            if (std::find(active.begin(), active.end(), j) == active.end()) active.push_back(j);
        }
        for (std::size_t k = 0; k < d; ++k) data.mut()[i * d + k] = bias[k];
        for (std::size_t j : active) {
            const double a = 0.5 + std::abs(rng.gaussian());
            for (std::size_t k = 0; k < d; ++k) data.mut()[i * d + k] += a * D.at2(k, j);
        }
    }
    SaeTrainConfig tc;
    tc.d_features = F;
    tc.sparsity_weight = 0.3;
    tc.steps = 14000;
    tc.batch_size = 64;
    tc.learning_rate = 2e-3;
    SaeTrainMetrics m;
    auto sae = train_sae(data, {SiteKind::residual, 0}, tc, &m);

    // each planted column should be matched by some decoder column
    double mean_max_cos = 0.0;
    for (std::size_t j = 0; j < F; ++j) {
        double best = -1.0;
        for (std::size_t j2 = 0; j2 < F; ++j2) {
            double dot = 0.0, nrm = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                dot += D.at2(k, j) * sae.w_d.at2(k, j2);
                nrm += sae.w_d.at2(k, j2) * sae.w_d.at2(k, j2);
            }
            best = std::max(best, dot / std::sqrt(nrm));
        }
        mean_max_cos += best;
    }
    mean_max_cos /= double(F);
    INFO("mean max cosine = " << mean_max_cos << ", L0 = " << m.mean_l0 << ", fve = " << m.fve);
    CHECK(mean_max_cos > 0.9);
}

TEST_CASE("sparsity weight sweep does not increase L0") {
    Rng rng(13);
    const std::size_t d = 16, F = 32, n = 1024;
    Tensor D = rng.gaussian_tensor({d, F}, 1.0);
    Tensor data({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (int rep = 0; rep < 3; ++rep) {
            const std::size_t j = rng.index(F);
            const double a = 0.5 + std::abs(rng.gaussian());
            for (std::size_t k = 0; k < d; ++k) data.mut()[i * d + k] += a * D.at2(k, j);
        }
    double prev = 1e18;
    for (double lam : {1e-4, 3e-2, 3e-1}) {
        SaeTrainConfig tc;
        tc.d_features = F;
        tc.sparsity_weight = lam;
        tc.steps = 1500;
        tc.batch_size = 64;
        SaeTrainMetrics m;
        train_sae(data, {SiteKind::residual, 0}, tc, &m);
        CHECK(m.mean_l0 <= prev + 1e-9);
        prev = m.mean_l0;
    }
}

TEST_CASE("sae checkpoint round trip") {
    auto s = random_sae({SiteKind::attn_out, 1}, 20, 16, 21);
    const auto dir = std::filesystem::temp_directory_path() / "sfc_sae_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "sae.sfct").string();
    s.save(path, {{"lambda", 1e-3}});
    auto back = SaeParams::load(path);
    CHECK(back.site.str() == "attn_out.1");
    for (std::size_t i = 0; i < s.w_e.numel(); ++i) CHECK(back.w_e.data()[i] == s.w_e.data()[i]);
    for (std::size_t i = 0; i < s.b_d.numel(); ++i) CHECK(back.b_d.data()[i] == s.b_d.data()[i]);
    std::filesystem::remove_all(dir);
}

TEST_CASE("splice") {
    auto model = TransformerModel::random_init(tiny_config(), tiny_vocab());
    const SubmoduleId site{SiteKind::residual, 0};
    auto s = random_sae(site, 48, 16, 31);
    SplicedModel spliced(model, {s});
    const std::vector<int> toks = {3, 1, 4, 1, 5};

    SECTION("no edits: logits bit-identical to the plain forward") {
        const Tensor a = model.logits(toks);
        const Tensor b = spliced.logits(toks);
        REQUIRE(a.numel() == b.numel());
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    }
    SECTION("feature hook value matches encode()") {
        auto ev = spliced.forward(toks);
        const Tensor& x = ev.value(raw_hook_name(site));
        const Tensor& f = ev.value(feature_hook_name(site));
        const Tensor fs = s.encode(x);
        REQUIRE(f.shape() == fs.shape());
        for (std::size_t i = 0; i < f.numel(); ++i)
            CHECK_THAT(f.data()[i], Catch::Matchers::WithinAbs(fs.data()[i], 1e-12));
    }
    SECTION("zeroing one active feature shifts the site output by -a * decoder column") {
        auto clean = spliced.forward(toks);
        const Tensor& f = clean.value(feature_hook_name(site));
        // find an active feature at the last position
        int feat = -1;
        const std::size_t last = toks.size() - 1;
        for (std::size_t j = 0; j < f.dim(1); ++j)
            if (f.at2(last, j) > 0.1) { feat = static_cast<int>(j); break; }
        REQUIRE(feat >= 0);
        const double a = f.at2(last, feat);

        ActivationEdit e;
        e.site = site;
        e.position = PositionSelector::at(static_cast<int>(last));
        e.mode = EditMode::set_feature;
        e.feature = feat;
        e.value = 0.0;
        auto edited = spliced.forward_with_edits(toks, {e});
        const Tensor& c0 = clean.value("spliced." + site.str());
        const Tensor& c1 = edited.value("spliced." + site.str());
        for (std::size_t k = 0; k < 16; ++k) {
            const double expect = c0.at2(last, k) - a * s.w_d.at2(k, static_cast<std::size_t>(feat));
            REQUIRE_THAT(c1.at2(last, k), Catch::Matchers::WithinAbs(expect, 1e-12));
        }
        // other positions untouched
        for (std::size_t i = 0; i < last; ++i)
            for (std::size_t k = 0; k < 16; ++k) CHECK(c1.at2(i, k) == c0.at2(i, k));
    }
    SECTION("ablating all features leaves b_d plus the frozen residual") {
        EditSet es;
        es.at_hook(feature_hook_name(site)).keep_mask =
            std::vector<uint8_t>(toks.size() * 48, 0);
        auto ev = spliced.forward(toks, es);
        const Tensor& x = ev.value(raw_hook_name(site));
        const Tensor& out = ev.value("spliced." + site.str());
        const Tensor recon = s.decode(s.encode(x));
        for (std::size_t i = 0; i < toks.size(); ++i)
            for (std::size_t k = 0; k < 16; ++k) {
                const double eps = x.at2(i, k) - recon.at2(i, k);
                REQUIRE_THAT(out.at2(i, k),
                             Catch::Matchers::WithinAbs(s.b_d.data()[k] + eps, 1e-10));
            }
    }
    SECTION("feature-hook gradient matches finite differences") {
        MetricSpec ms;
        ms.mode = MetricMode::logit_diff;
        ms.positive_tokens = {5};
        ms.negative_tokens = {2};
        auto ft = spliced.tape_for(static_cast<int>(toks.size()), &ms);
        auto lookup = spliced.inputs_for(toks);
        Evaluation ev(ft->tape, lookup);
        const std::string hook = feature_hook_name(site);
        Tensor g = ev.gradient(ft->tape.named("metric"), ft->tape.named(hook));
        Tensor fd = finite_difference_gradient(ft->tape, lookup, ft->tape.named("metric"), hook,
                                               1e-5);
        for (std::size_t i = 0; i < g.numel(); ++i)
            REQUIRE_THAT(g.data()[i], Catch::Matchers::WithinAbs(fd.data()[i], 1e-6));
    }
    SECTION("duplicate site rejected") {
        CHECK_THROWS_AS(SplicedModel(model, {s, s}), Error);
    }
    SECTION("unknown site rejected") {
        auto bad = s;
        bad.site = {SiteKind::mlp_out, 9};
        CHECK_THROWS_AS(SplicedModel(model, {bad}), Error);
    }
    SECTION("feature index out of range rejected") {
        ActivationEdit e;
        e.site = site;
        e.mode = EditMode::set_feature;
        e.feature = 48;
        e.position = PositionSelector::at(0);
        CHECK_THROWS_AS(spliced.forward_with_edits(toks, {e}), Error);
    }
}
