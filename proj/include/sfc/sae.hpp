#pragma once

// Sparse autoencoders over site activations:
//   f  = ReLU(W_e (x - b_d) + b_e)
//   x^ = W_d f + b_d
// and splicing into the transformer. A spliced site computes
//   out = x^(f) + eps,  eps = x - x^(f_clean)  (frozen reconstruction residual)
// arranged on the tape as stop_grad(x) + (dec(f_used) - stop_grad(dec(f_clean)))
// so an unedited spliced forward reproduces the plain forward bit-for-bit and
// gradients flow only through the feature bottleneck.

#include "sfc/model.hpp"

namespace sfc {

struct SaeParams {
    SubmoduleId site;
    Tensor w_e;  // [d_features, d_model]
    Tensor b_e;  // [d_features]
    Tensor w_d;  // [d_model, d_features]
    Tensor b_d;  // [d_model]

    int d_features() const { return static_cast<int>(w_e.dim(0)); }
    int d_model() const { return static_cast<int>(w_e.dim(1)); }

    void validate() const {
        require(w_e.shape().size() == 2 && w_d.shape().size() == 2, "sae weights must be 2-d");
        const auto F = w_e.dim(0), d = w_e.dim(1);
        require(w_d.dim(0) == d && w_d.dim(1) == F && b_e.numel() == F && b_d.numel() == d,
                "sae parameter shapes do not compose");
    }

    // x [n, d_model] -> f [n, d_features]
    Tensor encode(const Tensor& x) const {
        const std::size_t n = x.dim(0), d = w_e.dim(1), F = w_e.dim(0);
        require(x.dim(1) == d, "encode: activation width mismatch");
        Tensor xc(x.shape());
        {
            auto c = xc.mut();
            auto xd = x.data();
            auto bd = b_d.data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) c[i * d + j] = xd[i * d + j] - bd[j];
        }
        Tensor f({n, F});
        matmul_nt_acc(xc.data(), w_e.data(), f.mut(), n, d, F);
        auto fd = f.mut();
        auto be = b_e.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < F; ++j) fd[i * F + j] = std::max(fd[i * F + j] + be[j], 0.0);
        return f;
    }

    // f [n, d_features] -> x^ [n, d_model]
    Tensor decode(const Tensor& f) const {
        const std::size_t n = f.dim(0), F = w_d.dim(1), d = w_d.dim(0);
        require(f.dim(1) == F, "decode: feature width mismatch");
        Tensor x({n, d});
        matmul_nt_acc(f.data(), w_d.data(), x.mut(), n, F, d);
        auto xd = x.mut();
        auto bd = b_d.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) xd[i * d + j] += bd[j];
        return x;
    }

    std::vector<double> decoder_column_norms() const {
        const std::size_t d = w_d.dim(0), F = w_d.dim(1);
        std::vector<double> norms(F, 0.0);
        auto w = w_d.data();
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < F; ++j) norms[j] += w[i * F + j] * w[i * F + j];
        for (double& x : norms) x = std::sqrt(x);
        return norms;
    }

    void save(const std::string& path, const nlohmann::ordered_json& provenance = {}) const {
        TensorMap m{{"w_e", w_e}, {"b_e", b_e}, {"w_d", w_d}, {"b_d", b_d}};
        save_container(path, m);
        nlohmann::ordered_json sidecar{{"site", site.str()}, {"d_features", d_features()}};
        if (!provenance.empty()) sidecar["provenance"] = provenance;
        write_file(path + ".json", sidecar.dump(2) + "\n");
    }

    static SaeParams load(const std::string& path) {
        const auto sidecar = nlohmann::json::parse(read_file(path + ".json"));
        TensorMap m = load_container(path);
        SaeParams p{SubmoduleId::parse(sidecar.at("site").get<std::string>()),
                    m.at("w_e"), m.at("b_e"), m.at("w_d"), m.at("b_d")};
        p.validate();
        return p;
    }
};

// ---- training ----

struct SaeTrainConfig {
    int d_features = 1024;
    double sparsity_weight = 1e-3;  // lambda
    double learning_rate = 1e-3;
    double lr_final_fraction = 0.1;  // linear decay to this fraction of the base rate
    int steps = 4000;
    int batch_size = 64;
    int dead_check_interval = 500;  // steps; features silent for a full window are reinit
    uint64_t rng_seed = 0;

    void validate(int d_model) const {
        require(d_features >= d_model, "d_features must be >= d_model (overcomplete)");
        require(sparsity_weight >= 0.0, "sparsity weight must be >= 0");
        require(steps >= 1 && batch_size >= 1 && dead_check_interval >= 1,
                "sae training counts must be >= 1");
    }
};

struct SaeTrainMetrics {
    double final_loss = 0.0;
    double mean_l0 = 0.0;
    double fve = 0.0;  // fraction of variance explained
    int dead_reinits = 0;
};

// Plain-loop SGD/Adam SAE training on an activation matrix [n, d_model].
inline SaeParams train_sae(const Tensor& data, SubmoduleId site, const SaeTrainConfig& tc,
                           SaeTrainMetrics* metrics_out = nullptr) {
    require(data.shape().size() == 2 && data.dim(0) >= 2, "sae training data must be [n, d]");
    const std::size_t n = data.dim(0), d = data.dim(1);
    const auto F = static_cast<std::size_t>(tc.d_features);
    tc.validate(static_cast<int>(d));
    Rng rng(tc.rng_seed);

    TensorMap p;
    p["w_e"] = rng.gaussian_tensor({F, d}, 1.0 / std::sqrt(double(d)));
    p["b_e"] = Tensor::zeros({F});
    p["w_d"] = Tensor({d, F});
    {
        // decoder starts as the encoder transpose with unit columns
        auto wd = p["w_d"].mut();
        auto we = p["w_e"].data();
        for (std::size_t j = 0; j < F; ++j) {
            double norm = 0.0;
            for (std::size_t i = 0; i < d; ++i) norm += we[j * d + i] * we[j * d + i];
            norm = std::sqrt(norm);
            for (std::size_t i = 0; i < d; ++i) wd[i * F + j] = we[j * d + i] / norm;
        }
    }
    p["b_d"] = Tensor::zeros({d});
    {
        // b_d init: dataset mean, so zero features decode to the bias
        auto bd = p["b_d"].mut();
        auto x = data.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) bd[j] += x[i * d + j];
        for (std::size_t j = 0; j < d; ++j) bd[j] /= double(n);
    }

    Adam opt(tc.learning_rate, 0.9, 0.999, 1e-8);
    const auto B = static_cast<std::size_t>(tc.batch_size);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t cursor = 0;

    std::vector<uint64_t> fire_counts(F, 0);
    std::vector<std::size_t> worst_examples;  // high-error rows seen this window
    std::vector<double> worst_errors;
    int dead_reinits = 0;

    Tensor x({B, d}), xc({B, d}), f({B, F}), xhat({B, d});
    for (int step = 0; step < tc.steps; ++step) {
        // assemble batch
        std::vector<std::size_t> rows(B);
        for (std::size_t b = 0; b < B; ++b) {
            if (cursor == n) {
                rng.shuffle(order);
                cursor = 0;
            }
            rows[b] = order[cursor++];
        }
        auto xd = x.mut();
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(data.data().data() + rows[b] * d, d, xd.data() + b * d);

        // forward
        auto we = p["w_e"].data(); auto be = p["b_e"].data();
        auto wd = p["w_d"].data(); auto bd = p["b_d"].data();
        auto xcd = xc.mut();
        for (std::size_t i = 0; i < B * d; ++i) xcd[i] = xd[i] - bd[i % d];
        matmul_nt_acc(xc.data(), we, f.mut(), B, d, F);
        auto fd = f.mut();
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < F; ++j) {
                fd[i * F + j] = std::max(fd[i * F + j] + be[j], 0.0);
                if (fd[i * F + j] > 0.0) ++fire_counts[j];
            }
        matmul_nt_acc(f.data(), wd, xhat.mut(), B, F, d);
        auto xh = xhat.mut();
        double loss = 0.0;
        for (std::size_t i = 0; i < B * d; ++i) {
            xh[i] += bd[i % d];
            const double e = xd[i] - xh[i];
            loss += e * e;
        }
        for (std::size_t i = 0; i < B * F; ++i) loss += tc.sparsity_weight * fd[i];
        loss /= double(B);
        require(std::isfinite(loss),
                "sae training diverged at step " + std::to_string(step));

        // record worst-error rows for dead-feature reinit
        for (std::size_t b = 0; b < B; ++b) {
            double err = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double e = xd[b * d + j] - xh[b * d + j];
                err += e * e;
            }
            if (worst_examples.size() < 8) {
                worst_examples.push_back(rows[b]);
                worst_errors.push_back(err);
            } else {
                auto mn = std::min_element(worst_errors.begin(), worst_errors.end());
                if (err > *mn) {
                    worst_examples[static_cast<std::size_t>(mn - worst_errors.begin())] = rows[b];
                    *mn = err;
                }
            }
        }

        // backward (mean over batch)
        TensorMap g;
        Tensor dxhat({B, d});
        {
            auto dx = dxhat.mut();
            for (std::size_t i = 0; i < B * d; ++i) dx[i] = 2.0 * (xh[i] - xd[i]) / double(B);
        }
        g["w_d"] = Tensor({d, F});
        matmul_tn_acc(dxhat.data(), f.data(), g["w_d"].mut(), d, B, F);
        Tensor df({B, F});
        matmul_acc(dxhat.data(), wd, df.mut(), B, d, F);
        {
            auto dfd = df.mut();
            for (std::size_t i = 0; i < B * F; ++i) {
                if (fd[i] > 0.0)
                    dfd[i] += tc.sparsity_weight / double(B);
                else
                    dfd[i] = 0.0;
            }
        }
        g["b_e"] = Tensor({F});
        {
            auto gb = g["b_e"].mut();
            auto dfd = df.data();
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < F; ++j) gb[j] += dfd[i * F + j];
        }
        g["w_e"] = Tensor({F, d});
        matmul_tn_acc(df.data(), xc.data(), g["w_e"].mut(), F, B, d);
        g["b_d"] = Tensor({d});
        {
            Tensor dxc({B, d});
            matmul_acc(df.data(), we, dxc.mut(), B, F, d);
            auto gb = g["b_d"].mut();
            auto dx = dxhat.data();
            auto dc = dxc.data();
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += dx[i * d + j] - dc[i * d + j];
        }

        // linear learning-rate decay via gradient scaling
        const double lr_scale =
            1.0 + (tc.lr_final_fraction - 1.0) * double(step) / double(std::max(tc.steps - 1, 1));
        for (auto& [k, t] : g)
            for (double& v : t.mut()) v *= lr_scale;
        opt.step(p, g);

        // renormalize decoder columns; encoder absorbs the scale
        {
            auto wdm = p["w_d"].mut();
            auto wem = p["w_e"].mut();
            auto bem = p["b_e"].mut();
            for (std::size_t j = 0; j < F; ++j) {
                double norm = 0.0;
                for (std::size_t i = 0; i < d; ++i) norm += wdm[i * F + j] * wdm[i * F + j];
                norm = std::sqrt(norm);
                if (!(norm > 1e-12)) continue;
                for (std::size_t i = 0; i < d; ++i) wdm[i * F + j] /= norm;
                for (std::size_t i = 0; i < d; ++i) wem[j * d + i] *= norm;
                bem[j] *= norm;
            }
        }

        // dead-feature reinitialization from high-error examples
        if ((step + 1) % tc.dead_check_interval == 0 && step + 1 < tc.steps) {
            auto wdm = p["w_d"].mut();
            auto wem = p["w_e"].mut();
            auto bem = p["b_e"].mut();
            std::size_t worst_i = 0;
            for (std::size_t j = 0; j < F; ++j) {
                if (fire_counts[j] != 0) continue;
                const std::size_t row =
                    worst_examples.empty() ? rng.index(n)
                                           : worst_examples[worst_i++ % worst_examples.size()];
                std::vector<double> dir(d);
                double norm = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    dir[i] = data.data()[row * d + i] - p["b_d"].data()[i];
                    norm += dir[i] * dir[i];
                }
                norm = std::sqrt(norm);
                if (!(norm > 1e-12)) continue;
                for (std::size_t i = 0; i < d; ++i) {
                    wdm[i * F + j] = dir[i] / norm;
                    wem[j * d + i] = 0.2 * dir[i] / norm;
                }
                bem[j] = 0.0;
                ++dead_reinits;
            }
            std::fill(fire_counts.begin(), fire_counts.end(), 0);
            worst_examples.clear();
            worst_errors.clear();
        }

        if (metrics_out && step + 1 == tc.steps) metrics_out->final_loss = loss;
    }

    SaeParams sae{site, p["w_e"], p["b_e"], p["w_d"], p["b_d"]};
    sae.validate();

    if (metrics_out) {
        // full-dataset L0 and FVE
        double l0 = 0.0, sse = 0.0, sst = 0.0;
        std::vector<double> mean(d, 0.0);
        auto xall = data.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) mean[j] += xall[i * d + j];
        for (double& m : mean) m /= double(n);
        const std::size_t chunk = 256;
        for (std::size_t at = 0; at < n; at += chunk) {
            const std::size_t m = std::min(chunk, n - at);
            Tensor xs({m, d}, std::vector<double>(xall.begin() + at * d,
                                                  xall.begin() + (at + m) * d));
            Tensor fs = sae.encode(xs);
            Tensor rs = sae.decode(fs);
            for (double v : fs.data()) l0 += (v > 0.0) ? 1.0 : 0.0;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    const double e = xs.at2(i, j) - rs.at2(i, j);
                    sse += e * e;
                    const double c = xs.at2(i, j) - mean[j];
                    sst += c * c;
                }
        }
        metrics_out->mean_l0 = l0 / double(n);
        metrics_out->fve = sst > 0.0 ? 1.0 - sse / sst : 0.0;
        metrics_out->dead_reinits = dead_reinits;
    }
    return sae;
}

// Captures raw activations at one site over a corpus, all positions, shuffled.
inline Tensor collect_activations(const TransformerModel& model,
                                  const std::vector<std::vector<int>>& corpus,
                                  const SubmoduleId& site, uint64_t shuffle_seed = 17) {
    require(model.valid_site(site), "unknown site: " + site.str());
    std::vector<double> rows;
    const auto d = static_cast<std::size_t>(model.config().d_model);
    for (const auto& toks : corpus) {
        if (toks.empty()) continue;
        auto ev = model.forward(toks);
        const Tensor& act = ev.value(raw_hook_name(site));
        rows.insert(rows.end(), act.data().begin(), act.data().end());
    }
    const std::size_t n = rows.size() / d;
    require(n >= 2, "not enough activations collected");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(shuffle_seed);
    rng.shuffle(order);
    Tensor out({n, d});
    auto o = out.mut();
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(rows.data() + order[i] * d, d, o.data() + i * d);
    return out;
}

// ---- splicing ----

class SplicedModel {
public:
    SplicedModel(const TransformerModel& model, std::vector<SaeParams> saes)
        : model_(&model) {
        for (auto& s : saes) {
            s.validate();
            require(model.valid_site(s.site), "splice site out of range: " + s.site.str());
            require(s.d_model() == model.config().d_model, "sae width does not match model");
            const std::string key = s.site.str();
            require(!saes_.count(key), "two SAEs on one site: " + key);
            saes_.emplace(key, std::move(s));
        }
        require(!saes_.empty(), "spliced model needs at least one SAE");
        for (const auto& [key, s] : saes_) {
            sae_params_["sae." + key + ".w_e"] = s.w_e;
            sae_params_["sae." + key + ".b_e"] = s.b_e;
            sae_params_["sae." + key + ".w_d"] = s.w_d;
            sae_params_["sae." + key + ".b_d"] = s.b_d;
        }
        for (const auto& [name, t] : model.params()) sae_params_[name] = t;
    }

    const TransformerModel& model() const { return *model_; }

    bool has_sae(const SubmoduleId& site) const { return saes_.count(site.str()) != 0; }

    const SaeParams& sae(const SubmoduleId& site) const {
        auto it = saes_.find(site.str());
        require(it != saes_.end(), "no SAE spliced at site: " + site.str());
        return it->second;
    }

    std::vector<SubmoduleId> spliced_sites() const {
        std::vector<SubmoduleId> out;
        for (const auto& site : model_->all_sites())
            if (has_sae(site)) out.push_back(site);
        return out;
    }

    // Tape with feature hooks at spliced sites; optional metric node marked
    // "metric". Cached per (seq_len, metric signature).
    std::shared_ptr<const ForwardTape> tape_for(int seq_len,
                                                const MetricSpec* metric = nullptr) const {
        std::string key = std::to_string(seq_len);
        if (metric) {
            key += "|";
            key += metric_mode_name(metric->mode);
            key += "@" + std::to_string(metric->position);
            for (int i : metric->positive_tokens) key += "+" + std::to_string(i);
            for (int i : metric->negative_tokens) key += "-" + std::to_string(i);
        }
        std::lock_guard<std::mutex> lock(cache_mutex_);
        auto& slot = tape_cache_[key];
        if (!slot) {
            auto ft = model_->build_tape(
                seq_len,
                [this](Tape& t, const SubmoduleId& site, NodeId x) {
                    return splice_site(t, site, x);
                });
            if (metric)
                t_mark_metric(*ft, *metric, seq_len);
            slot = std::move(ft);
        }
        return slot;
    }

    InputLookup inputs_for(const std::vector<int>& tokens) const {
        return lookup_maps({{"tokens", model_->tokens_tensor(tokens)}}, sae_params_);
    }

    Evaluation forward(const std::vector<int>& tokens, const EditSet& edits = {},
                       const MetricSpec* metric = nullptr) const {
        auto ft = tape_for(static_cast<int>(tokens.size()), metric);
        return Evaluation(ft->tape, inputs_for(tokens), edits);
    }

    Tensor logits(const std::vector<int>& tokens) const {
        return forward(tokens).value("logits");
    }

    EditSet compile_edits(const std::vector<ActivationEdit>& edits, int seq_len,
                          const Stimulus* annotations = nullptr) const {
        EditSet es;
        for (const auto& e : edits) {
            require(model_->valid_site(e.site), "edit site out of range: " + e.site.str());
            if (e.mode == EditMode::set_raw) {
                TransformerModel::add_edit_rows(es.at_hook(raw_hook_name(e.site)), e, seq_len,
                                                annotations);
            } else {
                const SaeParams& s = sae(e.site);
                require(e.feature >= 0 && e.feature < s.d_features(),
                        "feature index out of range at " + e.site.str());
                TransformerModel::add_edit_rows(es.at_hook(feature_hook_name(e.site)), e, seq_len,
                                                annotations);
            }
        }
        return es;
    }

    Evaluation forward_with_edits(const std::vector<int>& tokens,
                                  const std::vector<ActivationEdit>& edits,
                                  const Stimulus* annotations = nullptr,
                                  const MetricSpec* metric = nullptr) const {
        return forward(tokens, compile_edits(edits, static_cast<int>(tokens.size()), annotations),
                       metric);
    }

    double metric_value(const std::vector<int>& tokens, const MetricSpec& metric,
                        const EditSet& edits = {}) const {
        return forward(tokens, edits, &metric).value("metric").item();
    }

private:
    static void t_mark_metric(ForwardTape& ft, const MetricSpec& metric, int seq_len) {
        ft.tape.mark("metric",
                     TransformerModel::metric_node(ft.tape, ft.logits, metric, seq_len));
    }

    NodeId splice_site(Tape& t, const SubmoduleId& site, NodeId x) const {
        auto it = saes_.find(site.str());
        if (it == saes_.end()) return x;
        const SaeParams& s = it->second;
        const std::string p = "sae." + site.str() + ".";
        NodeId w_e = t.input(p + "w_e", s.w_e.shape());
        NodeId b_e = t.input(p + "b_e", s.b_e.shape());
        NodeId w_d = t.input(p + "w_d", s.w_d.shape());
        NodeId b_d = t.input(p + "b_d", s.b_d.shape());
        NodeId center = t.add_bias(x, t.scale(b_d, -1.0));
        NodeId f_clean = t.relu(t.add_bias(t.matmul_nt(center, w_e), b_e));
        NodeId f = t.hook(f_clean, feature_hook_name(site));
        NodeId dec_used = t.matmul_nt(f, w_d);
        NodeId dec_clean = t.matmul_nt(f_clean, w_d);
        // b_d cancels between the two decodes; when f is unedited the
        // difference is exactly zero, so the site passes x through unchanged.
        NodeId out = t.add(t.stop_grad(x), t.sub(dec_used, t.stop_grad(dec_clean)));
        t.mark("spliced." + site.str(), out);
        return out;
    }

    const TransformerModel* model_;
    std::map<std::string, SaeParams> saes_;
    InputMap sae_params_;
    mutable std::mutex cache_mutex_;
    mutable std::map<std::string, std::shared_ptr<ForwardTape>> tape_cache_;
};

}  // namespace sfc
