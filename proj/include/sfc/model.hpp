#pragma once

// A small pre-norm autoregressive transformer with learned positional
// embeddings and addressable activation sites. Forward passes are recorded
// tapes: every site carries a named hook node that supports capture,
// replacement, and clamping, and gradients can be taken with respect to any
// hook value.

#include <functional>
#include <memory>
#include <mutex>

#include <nlohmann/json.hpp>

#include "sfc/container.hpp"
#include "sfc/rng.hpp"
#include "sfc/tape.hpp"
#include "sfc/tokenizer.hpp"
#include "sfc/types.hpp"

namespace sfc {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_mlp = 512;
    int vocab_size = 0;
    int max_seq_len = 16;
    uint64_t rng_seed = 0;

    void validate() const {
        require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_mlp >= 1 && vocab_size >= 1 &&
                    max_seq_len >= 1,
                "all model config counts must be >= 1");
        require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    }

    nlohmann::ordered_json to_json() const {
        return {{"n_layers", n_layers},   {"d_model", d_model},
                {"n_heads", n_heads},     {"d_mlp", d_mlp},
                {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
                {"rng_seed", rng_seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.n_layers = j.at("n_layers");
        c.d_model = j.at("d_model");
        c.n_heads = j.at("n_heads");
        c.d_mlp = j.at("d_mlp");
        c.vocab_size = j.at("vocab_size");
        c.max_seq_len = j.at("max_seq_len");
        c.rng_seed = j.at("rng_seed");
        return c;
    }
};

// An activation edit applied during a forward pass. set_raw writes into the
// raw site value; set_feature writes into an attached SAE's feature vector
// (requires a spliced model).
enum class EditMode : uint8_t { set_raw, set_feature };

struct ActivationEdit {
    SubmoduleId site;
    PositionSelector position;
    EditMode mode = EditMode::set_feature;
    int feature = 0;      // set_feature only
    double value = 0.0;   // scalar clamp value
};

inline std::string raw_hook_name(const SubmoduleId& site) { return site.str(); }
inline std::string feature_hook_name(const SubmoduleId& site) { return "feat." + site.str(); }

// Inserted at each site after the raw hook; returns the node used downstream.
using SiteTransform = std::function<NodeId(Tape&, const SubmoduleId&, NodeId)>;

struct ForwardTape {
    Tape tape;
    NodeId tokens_input = -1;
    NodeId logits = -1;
    std::vector<SubmoduleId> sites;  // in computation order
    int seq_len = 0;
};

class TransformerModel {
public:
    TransformerModel() = default;

    TransformerModel(ModelConfig cfg, Tokenizer tok, TensorMap params)
        : cfg_(cfg), tok_(std::move(tok)), params_(std::move(params)) {
        cfg_.validate();
    }

    // Copies share tensor storage; the tape cache is per instance.
    TransformerModel(const TransformerModel& o)
        : cfg_(o.cfg_), tok_(o.tok_), params_(o.params_) {}
    TransformerModel& operator=(const TransformerModel& o) {
        cfg_ = o.cfg_;
        tok_ = o.tok_;
        params_ = o.params_;
        std::lock_guard<std::mutex> lock(cache_mutex_);
        tape_cache_.clear();
        return *this;
    }

    static TransformerModel random_init(ModelConfig cfg, Tokenizer tok) {
        cfg.vocab_size = static_cast<int>(tok.vocab_size());
        cfg.validate();
        Rng rng(cfg.rng_seed);
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto v = static_cast<std::size_t>(cfg.vocab_size);
        const auto mlp = static_cast<std::size_t>(cfg.d_mlp);
        const double std0 = 0.02;
        TensorMap p;
        p["tok_emb"] = rng.gaussian_tensor({v, d}, std0);
        p["pos_emb"] = rng.gaussian_tensor({static_cast<std::size_t>(cfg.max_seq_len), d}, std0);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string k = std::to_string(l);
            p["ln1." + k + ".g"] = Tensor::full({d}, 1.0);
            p["ln1." + k + ".b"] = Tensor::zeros({d});
            for (const char* w : {"wq", "wk", "wv", "wo"})
                p["attn." + k + "." + w] = rng.gaussian_tensor({d, d}, std0);
            for (const char* b : {"bq", "bk", "bv", "bo"})
                p["attn." + k + "." + b] = Tensor::zeros({d});
            p["ln2." + k + ".g"] = Tensor::full({d}, 1.0);
            p["ln2." + k + ".b"] = Tensor::zeros({d});
            p["mlp." + k + ".w1"] = rng.gaussian_tensor({d, mlp}, std0);
            p["mlp." + k + ".b1"] = Tensor::zeros({mlp});
            p["mlp." + k + ".w2"] = rng.gaussian_tensor({mlp, d}, std0);
            p["mlp." + k + ".b2"] = Tensor::zeros({d});
        }
        p["lnf.g"] = Tensor::full({d}, 1.0);
        p["lnf.b"] = Tensor::zeros({d});
        p["unembed.w"] = rng.gaussian_tensor({d, v}, std0);
        p["unembed.b"] = Tensor::zeros({v});
        return TransformerModel(cfg, std::move(tok), std::move(p));
    }

    const ModelConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tok_; }
    const TensorMap& params() const { return params_; }

    void set_params(TensorMap p) { params_ = std::move(p); }

    std::vector<SubmoduleId> all_sites() const {
        std::vector<SubmoduleId> s{{SiteKind::embedding, 0}};
        for (int l = 0; l < cfg_.n_layers; ++l) {
            s.push_back({SiteKind::attn_out, l});
            s.push_back({SiteKind::mlp_out, l});
            s.push_back({SiteKind::residual, l});
        }
        return s;
    }

    bool valid_site(const SubmoduleId& s) const {
        if (s.kind == SiteKind::embedding) return true;
        return s.layer >= 0 && s.layer < cfg_.n_layers;
    }

    // Builds the forward tape for a fixed sequence length. Inputs: "tokens"
    // (ids as doubles) plus every parameter by name; optional "targets" for
    // the LM loss (marked "loss"). Site raw hooks are named by SubmoduleId.
    std::shared_ptr<ForwardTape> build_tape(int seq_len, const SiteTransform& transform = {},
                                            bool with_loss = false) const {
        require(seq_len >= 1 && seq_len <= cfg_.max_seq_len, "sequence length out of range");
        auto ft = std::make_shared<ForwardTape>();
        ft->seq_len = seq_len;
        Tape& t = ft->tape;
        const auto T = static_cast<std::size_t>(seq_len);
        const int dh = cfg_.d_model / cfg_.n_heads;

        auto param = [&](const std::string& name) {
            auto it = params_.find(name);
            require(it != params_.end(), "missing parameter: " + name);
            return t.input(name, it->second.shape());
        };
        auto site = [&](SubmoduleId s, NodeId x) {
            NodeId h = t.hook(x, raw_hook_name(s));
            ft->sites.push_back(s);
            return transform ? transform(t, s, h) : h;
        };

        ft->tokens_input = t.input("tokens", {T});
        NodeId h = t.add(t.embed(param("tok_emb"), ft->tokens_input),
                         t.rows_range(param("pos_emb"), 0, seq_len));
        h = site({SiteKind::embedding, 0}, h);

        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string k = std::to_string(l);
            NodeId x = t.layer_norm(h, param("ln1." + k + ".g"), param("ln1." + k + ".b"));
            NodeId q = t.add_bias(t.matmul(x, param("attn." + k + ".wq")), param("attn." + k + ".bq"));
            NodeId kk = t.add_bias(t.matmul(x, param("attn." + k + ".wk")), param("attn." + k + ".bk"));
            NodeId vv = t.add_bias(t.matmul(x, param("attn." + k + ".wv")), param("attn." + k + ".bv"));
            std::vector<NodeId> heads;
            for (int hd = 0; hd < cfg_.n_heads; ++hd) {
                const int c0 = hd * dh, c1 = (hd + 1) * dh;
                NodeId qh = t.slice_cols(q, c0, c1);
                NodeId kh = t.slice_cols(kk, c0, c1);
                NodeId vh = t.slice_cols(vv, c0, c1);
                NodeId scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
                heads.push_back(t.matmul(t.causal_softmax(scores), vh));
            }
            NodeId attn = t.add_bias(t.matmul(t.concat_cols(heads), param("attn." + k + ".wo")),
                                     param("attn." + k + ".bo"));
            attn = site({SiteKind::attn_out, l}, attn);
            h = t.add(h, attn);

            NodeId m_in = t.layer_norm(h, param("ln2." + k + ".g"), param("ln2." + k + ".b"));
            NodeId mlp = t.add_bias(
                t.matmul(t.relu(t.add_bias(t.matmul(m_in, param("mlp." + k + ".w1")),
                                           param("mlp." + k + ".b1"))),
                         param("mlp." + k + ".w2")),
                param("mlp." + k + ".b2"));
            mlp = site({SiteKind::mlp_out, l}, mlp);
            h = t.add(h, mlp);
            h = site({SiteKind::residual, l}, h);
        }

        NodeId fin = t.layer_norm(h, param("lnf.g"), param("lnf.b"));
        ft->logits = t.add_bias(t.matmul(fin, param("unembed.w")), param("unembed.b"));
        t.mark("logits", ft->logits);

        if (with_loss && seq_len >= 2) {
            NodeId targets = t.input("targets", {T - 1});
            NodeId pred = t.rows_range(ft->logits, 0, seq_len - 1);
            t.mark("loss", t.cross_entropy_rows(pred, targets));
        }
        return ft;
    }

    // Cached plain (unspliced) tape per sequence length.
    std::shared_ptr<const ForwardTape> tape_for(int seq_len, bool with_loss = false) const {
        std::lock_guard<std::mutex> lock(cache_mutex_);
        auto& slot = tape_cache_[{seq_len, with_loss}];
        if (!slot) slot = build_tape(seq_len, {}, with_loss);
        return slot;
    }

    Tensor tokens_tensor(const std::vector<int>& tokens) const {
        require(!tokens.empty() && static_cast<int>(tokens.size()) <= cfg_.max_seq_len,
                "token sequence length out of range");
        Tensor t({tokens.size()});
        auto d = t.mut();
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            require(tokens[i] >= 0 && tokens[i] < cfg_.vocab_size,
                    "token id out of vocabulary: " + std::to_string(tokens[i]));
            d[i] = static_cast<double>(tokens[i]);
        }
        return t;
    }

    InputLookup inputs_for(const std::vector<int>& tokens) const {
        return lookup_maps({{"tokens", tokens_tensor(tokens)}}, params_);
    }

    // Plain forward pass; returns the evaluation, from which logits and any
    // captured site activation can be read.
    Evaluation forward(const std::vector<int>& tokens, const EditSet& edits = {}) const {
        auto ft = tape_for(static_cast<int>(tokens.size()));
        return Evaluation(ft->tape, inputs_for(tokens), edits);
    }

    Tensor logits(const std::vector<int>& tokens) const {
        return forward(tokens).value("logits");
    }

    // Raw-site edits only; feature edits require a spliced model (sae.hpp).
    Evaluation forward_with_edits(const std::vector<int>& tokens,
                                  const std::vector<ActivationEdit>& edits,
                                  const Stimulus* annotations = nullptr) const {
        EditSet es = compile_raw_edits(edits, static_cast<int>(tokens.size()), annotations);
        return forward(tokens, es);
    }

    EditSet compile_raw_edits(const std::vector<ActivationEdit>& edits, int seq_len,
                              const Stimulus* annotations = nullptr) const {
        EditSet es;
        for (const auto& e : edits) {
            require(e.mode == EditMode::set_raw, "set_feature edit on an unspliced model");
            require(valid_site(e.site), "edit site out of range: " + e.site.str());
            add_edit_rows(es.at_hook(raw_hook_name(e.site)), e, seq_len, annotations);
        }
        return es;
    }

    static void add_edit_rows(HookEdit& hook, const ActivationEdit& e, int seq_len,
                              const Stimulus* annotations) {
        int row;
        if (e.position.kind == PositionKind::all) {
            row = -1;
        } else if (e.position.kind == PositionKind::absolute) {
            require(e.position.index >= 0 && e.position.index < seq_len,
                    "edit position out of range");
            row = e.position.index;
        } else {
            require(annotations != nullptr, "position selector needs stimulus annotations");
            row = annotations->resolve(e.position);
            require(row >= 0 && row < seq_len, "resolved edit position out of range");
        }
        for (const auto& [r, c, v] : hook.sets)
            require(!(r == row && c == e.feature), "conflicting edits at one coordinate");
        hook.sets.emplace_back(row, e.feature, e.value);
    }

    // Appends the metric subgraph to a tape and returns the scalar node.
    static NodeId metric_node(Tape& t, NodeId logits, const MetricSpec& metric, int seq_len) {
        metric.validate();
        const int pos = metric.position < 0 ? seq_len - 1 : metric.position;
        require(pos >= 0 && pos < seq_len, "metric position out of range");
        NodeId row = t.row(logits, pos);
        if (metric.mode == MetricMode::prob_diff) row = t.softmax_vec(row);
        return t.index_sum_diff(row, metric.positive_tokens, metric.negative_tokens);
    }

    double next_token_metric(const std::vector<int>& tokens, const MetricSpec& metric) const {
        metric.validate();
        const Tensor lg = logits(tokens);
        return metric_from_logits(lg, metric);
    }

    static double metric_from_logits(const Tensor& logits, const MetricSpec& metric) {
        const std::size_t v = logits.dim(1);
        const std::size_t pos =
            metric.position < 0 ? logits.dim(0) - 1 : static_cast<std::size_t>(metric.position);
        std::vector<double> row(v);
        if (metric.mode == MetricMode::prob_diff)
            detail::softmax_row(logits.data().data() + pos * v, row.data(), v);
        else
            for (std::size_t j = 0; j < v; ++j) row[j] = logits.at2(pos, j);
        double m = 0.0;
        for (int i : metric.positive_tokens) m += row[static_cast<std::size_t>(i)];
        for (int i : metric.negative_tokens) m -= row[static_cast<std::size_t>(i)];
        return m;
    }

    // ---- checkpoint io ----

    void save(const std::string& path) const {
        save_container(path, params_);
        nlohmann::ordered_json sidecar{{"config", cfg_.to_json()}, {"vocab", tok_.vocab()}};
        write_file(path + ".json", sidecar.dump(2) + "\n");
    }

    static TransformerModel load(const std::string& path) {
        const auto sidecar = nlohmann::json::parse(read_file(path + ".json"));
        ModelConfig cfg = ModelConfig::from_json(sidecar.at("config"));
        Tokenizer tok(sidecar.at("vocab").get<std::vector<std::string>>());
        return TransformerModel(cfg, std::move(tok), load_container(path));
    }

private:
    ModelConfig cfg_;
    Tokenizer tok_;
    TensorMap params_;
    mutable std::mutex cache_mutex_;
    mutable std::map<std::pair<int, bool>, std::shared_ptr<ForwardTape>> tape_cache_;
};

// ---- LM training ----

struct LmTrainConfig {
    int epochs = 6;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t shuffle_seed = 7;
};

class Adam {
public:
    Adam(double lr, double b1, double b2, double eps) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void step(TensorMap& params, const TensorMap& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            auto g = git->second.data();
            Tensor& m = m_.try_emplace(name, Tensor::zeros(p.shape())).first->second;
            Tensor& v = v_.try_emplace(name, Tensor::zeros(p.shape())).first->second;
            Tensor np(p.shape());
            auto pm = m.mut(), pv = v.mut(), pd = np.mut();
            auto pp = p.data();
            for (std::size_t i = 0; i < pd.size(); ++i) {
                pm[i] = b1_ * pm[i] + (1.0 - b1_) * g[i];
                pv[i] = b2_ * pv[i] + (1.0 - b2_) * g[i] * g[i];
                pd[i] = pp[i] - lr_ * (pm[i] / c1) / (std::sqrt(pv[i] / c2) + eps_);
            }
            p = std::move(np);
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    TensorMap m_, v_;
};

struct LmTrainLog {
    std::vector<double> epoch_loss;
    bool diverged = false;
};

// Next-token cross-entropy training over tokenized sentences. On divergence
// (non-finite loss) training aborts and the last epoch-end parameters are
// kept.
inline LmTrainLog train_lm(TransformerModel& model, const std::vector<std::vector<int>>& corpus,
                           const LmTrainConfig& tc) {
    LmTrainLog log;
    Adam opt(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
    Rng shuffle_rng(tc.shuffle_seed);
    TensorMap params = model.params();
    TensorMap last_good = params;

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (corpus[i].size() >= 2) order.push_back(i);
    require(!order.empty(), "corpus has no trainable sentences");

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        TensorMap grad_acc;
        int in_batch = 0;
        auto flush = [&]() {
            if (in_batch == 0) return;
            for (auto& [k, g] : grad_acc) {
                Tensor s(g.shape());
                auto d = s.mut();
                auto gd = g.data();
                for (std::size_t i = 0; i < d.size(); ++i)
                    d[i] = gd[i] / static_cast<double>(in_batch);
                g = std::move(s);
            }
            opt.step(params, grad_acc);
            model.set_params(params);
            grad_acc.clear();
            in_batch = 0;
        };

        for (std::size_t idx : order) {
            const auto& toks = corpus[idx];
            auto ft = model.tape_for(static_cast<int>(toks.size()), true);
            Tensor targets({toks.size() - 1});
            {
                auto d = targets.mut();
                for (std::size_t i = 0; i + 1 < toks.size(); ++i)
                    d[i] = static_cast<double>(toks[i + 1]);
            }
            Evaluation ev(ft->tape,
                          lookup_maps({{"tokens", model.tokens_tensor(toks)},
                                       {"targets", std::move(targets)}},
                                      params));
            const double loss = ev.value("loss").item();
            if (!std::isfinite(loss)) {
                model.set_params(last_good);
                log.diverged = true;
                return log;
            }
            epoch_loss += loss;
            ++seen;
            auto grads = ev.backward(ft->tape.named("loss"));
            for (const auto& [name, nid] : ft->tape.names()) {
                if (ft->tape.node(nid).op != Op::Input || name == "tokens" || name == "targets")
                    continue;
                Tensor& g = grads[static_cast<std::size_t>(nid)];
                if (g.numel() == 0) continue;
                auto [it, fresh] = grad_acc.try_emplace(name, g);
                if (!fresh) {
                    Tensor sum(g.shape());
                    auto d = sum.mut();
                    auto a = it->second.data();
                    auto b = g.data();
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] + b[i];
                    it->second = std::move(sum);
                }
            }
            if (++in_batch >= tc.batch_size) flush();
        }
        flush();
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
        last_good = params;
    }
    model.set_params(params);
    return log;
}

inline double mean_cross_entropy(const TransformerModel& model,
                                 const std::vector<std::vector<int>>& corpus) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& toks : corpus) {
        if (toks.size() < 2) continue;
        const Tensor lg = model.logits(toks);
        const std::size_t v = lg.dim(1);
        std::vector<double> p(v);
        for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
            detail::softmax_row(lg.data().data() + i * v, p.data(), v);
            total += -std::log(p[static_cast<std::size_t>(toks[i + 1])]);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

}  // namespace sfc
