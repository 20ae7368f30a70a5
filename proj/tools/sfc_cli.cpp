// Pipeline front end: grammar generation, LM and SAE training, behavioral
// evaluation, attribution, circuit extraction, faithfulness, interventions,
// and parse-action probes. Every output gets a manifest with config and
// artifact hashes so reruns can be verified bit-for-bit.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sfc/circuits.hpp"
#include "sfc/interventions.hpp"
#include "sfc/manifest.hpp"
#include "sfc/probe.hpp"

namespace fs = std::filesystem;
using namespace sfc;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumeric = 4;

struct MissingArtifact : std::runtime_error {
    explicit MissingArtifact(const std::string& path)
        : std::runtime_error("missing artifact: " + path) {}
};

std::string need(const std::string& path) {
    if (!fs::exists(path)) throw MissingArtifact(path);
    return path;
}

struct Ctx {
    RunConfig cfg;
    std::string dir;  // output directory

    std::string path(const std::string& name) const { return dir + "/" + name; }

    GrammarSpec grammar() const {
        GrammarSpec g;
        g.rng_seed = cfg.stimuli.grammar_seed;
        return g;
    }

    TransformerModel load_model() const {
        return TransformerModel::load(need(path("model.bin")));
    }

    std::vector<SubmoduleId> sae_sites() const {
        std::vector<SubmoduleId> out;
        for (const auto& s : cfg.sae_sites) out.push_back(SubmoduleId::parse(s));
        return out;
    }

    SplicedModel load_spliced(const TransformerModel& model) const {
        std::vector<SaeParams> saes;
        for (const auto& site : sae_sites())
            saes.push_back(SaeParams::load(need(path("sae." + site.str() + ".bin"))));
        return SplicedModel(model, std::move(saes));
    }

    std::vector<Stimulus> load_stimuli() const {
        return parse_stimuli_tsv(read_file(need(path("stimuli.tsv"))));
    }

    std::vector<DepTree> load_treebank() const {
        return parse_treebank(read_file(need(path("treebank.txt"))));
    }

    // Circuit/intervention analyses need one disambiguating token pair, so
    // they run on a single structure (NP/Z, the canonical garden path).
    std::vector<Stimulus> analysis_stimuli(GpCondition cond) const {
        std::vector<Stimulus> out;
        for (const auto& st : load_stimuli())
            if (st.condition == cond && st.structure == GpStructure::NPZ) out.push_back(st);
        return out;
    }

    MetricSpec analysis_metric(const std::vector<Stimulus>& stimuli, MetricMode mode,
                               const Tokenizer& tok) const {
        require(!stimuli.empty(), "no analysis stimuli");
        for (const auto& st : stimuli)
            require(st.gp_token == stimuli.front().gp_token &&
                        st.nongp_token == stimuli.front().nongp_token,
                    "stimuli disagree on gp/non-gp tokens; pick one structure");
        return stimulus_metric(stimuli.front(), tok, mode);
    }
};

void emit(const Ctx& ctx, const std::string& output, const std::string& content,
          const std::vector<std::string>& inputs, const std::vector<uint64_t>& seeds) {
    write_file(output, content);
    write_manifest(output, ctx.cfg, inputs, seeds);
}

// ---- subcommand bodies ----

void cmd_gen_grammar(const Ctx& ctx) {
    const GrammarSpec g = ctx.grammar();
    const auto corpus = generate_corpus(g, static_cast<std::size_t>(ctx.cfg.stimuli.corpus_sentences));
    emit(ctx, ctx.path("treebank.txt"), treebank_text(corpus), {},
         {ctx.cfg.stimuli.grammar_seed});
    const auto stimuli =
        generate_stimuli(g, ctx.cfg.stimuli.items_per_condition, ctx.cfg.stimuli.stimuli_seed);
    emit(ctx, ctx.path("stimuli.tsv"), stimuli_tsv(stimuli), {ctx.path("treebank.txt")},
         {ctx.cfg.stimuli.stimuli_seed});
    std::cout << "wrote " << ctx.path("treebank.txt") << " (" << corpus.size()
              << " sentences) and " << ctx.path("stimuli.tsv") << " (" << stimuli.size()
              << " stimuli)\n";
}

void cmd_train_lm(const Ctx& ctx) {
    const GrammarSpec g = ctx.grammar();
    const auto treebank = ctx.load_treebank();
    ModelConfig mc = ctx.cfg.model;
    const Tokenizer tok = g.tokenizer();
    mc.vocab_size = static_cast<int>(tok.vocab_size());
    TransformerModel model = TransformerModel::random_init(mc, tok);
    std::vector<std::vector<int>> corpus;
    for (const auto& t : treebank)
        if (static_cast<int>(t.tokens.size()) <= mc.max_seq_len)
            corpus.push_back(tok.encode(t.tokens));
    auto log = train_lm(model, corpus, ctx.cfg.lm);
    if (log.diverged) throw Error("LM training diverged");
    model.save(ctx.path("model.bin"));
    write_manifest(ctx.path("model.bin"), ctx.cfg, {ctx.path("treebank.txt")},
                   {ctx.cfg.model.rng_seed, ctx.cfg.lm.shuffle_seed});
    std::ostringstream os;
    os.precision(10);
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
        os << "epoch " << e << "\tloss " << log.epoch_loss[e] << "\n";
    emit(ctx, ctx.path("train_log.txt"), os.str(), {ctx.path("model.bin")},
         {ctx.cfg.lm.shuffle_seed});
    std::cout << "trained model (" << corpus.size() << " sentences, final loss "
              << log.epoch_loss.back() << ") -> " << ctx.path("model.bin") << "\n";
}

void cmd_collect_acts(const Ctx& ctx) {
    const TransformerModel model = ctx.load_model();
    const auto treebank = ctx.load_treebank();
    std::vector<std::vector<int>> corpus;
    for (const auto& t : treebank)
        if (static_cast<int>(t.tokens.size()) <= model.config().max_seq_len)
            corpus.push_back(model.tokenizer().encode(t.tokens));
    for (const auto& site : ctx.sae_sites()) {
        const Tensor acts = collect_activations(model, corpus, site);
        const std::string out = ctx.path("acts." + site.str() + ".bin");
        save_container(out, {{"acts", acts}});
        write_manifest(out, ctx.cfg, {ctx.path("model.bin"), ctx.path("treebank.txt")}, {17});
        std::cout << "wrote " << out << " [" << acts.dim(0) << " x " << acts.dim(1) << "]\n";
    }
}

void cmd_train_sae(const Ctx& ctx) {
    for (const auto& site : ctx.sae_sites()) {
        const std::string acts_path = need(ctx.path("acts." + site.str() + ".bin"));
        const Tensor acts = load_container(acts_path).at("acts");
        SaeTrainMetrics metrics;
        const SaeParams sae = train_sae(acts, site, ctx.cfg.sae, &metrics);
        const std::string out = ctx.path("sae." + site.str() + ".bin");
        sae.save(out, {{"sparsity_weight", ctx.cfg.sae.sparsity_weight},
                       {"steps", ctx.cfg.sae.steps},
                       {"final_loss", metrics.final_loss},
                       {"mean_l0", metrics.mean_l0},
                       {"fve", metrics.fve}});
        write_manifest(out, ctx.cfg, {acts_path}, {ctx.cfg.sae.rng_seed});
        std::cout << "trained SAE at " << site.str() << " (L0 " << metrics.mean_l0 << ", FVE "
                  << metrics.fve << ") -> " << out << "\n";
    }
}

void cmd_behavioral(const Ctx& ctx) {
    const TransformerModel model = ctx.load_model();
    const auto stimuli = ctx.load_stimuli();
    const auto res = behavioral_eval(model, stimuli);
    emit(ctx, ctx.path("behavioral.tsv"), behavioral_tsv(res),
         {ctx.path("model.bin"), ctx.path("stimuli.tsv")}, {});
    std::cout << behavioral_tsv(res);
}

void cmd_attribute(const Ctx& ctx) {
    const TransformerModel model = ctx.load_model();
    const SplicedModel spliced = ctx.load_spliced(model);
    const auto stimuli = ctx.analysis_stimuli(GpCondition::ambiguous);
    const MetricSpec metric =
        ctx.analysis_metric(stimuli, MetricMode::prob_diff, model.tokenizer());

    NodeScoreConfig nc;
    nc.method = attr_method_from_name(ctx.cfg.attribution.method);
    nc.K = ctx.cfg.attribution.K;
    nc.ig_rule = ctx.cfg.attribution.ig_rule == "trapezoid" ? IgRule::trapezoid
                                                            : IgRule::as_written;
    nc.positions.clear();
    for (const auto& p : ctx.cfg.attribution.positions)
        nc.positions.push_back(PositionSelector::parse(p));
    nc.threads = ctx.cfg.threads;
    const auto nodes = node_scores(spliced, metric, stimuli, nc);

    std::vector<std::string> inputs = {ctx.path("model.bin"), ctx.path("stimuli.tsv")};
    for (const auto& site : ctx.sae_sites())
        inputs.push_back(ctx.path("sae." + site.str() + ".bin"));
    emit(ctx, ctx.path("nodes.tsv"), node_scores_tsv(nodes), inputs, {});

    // edges between consecutive spliced sites
    EdgeScoreConfig ec;
    ec.method = nc.method == AttrMethod::exact ? AttrMethod::atp : nc.method;
    ec.K = nc.K;
    ec.ig_rule = nc.ig_rule;
    ec.positions = nc.positions;
    ec.threads = ctx.cfg.threads;
    std::vector<EdgeScore> edges;
    auto sites = ctx.sae_sites();
    std::sort(sites.begin(), sites.end(),
              [](const SubmoduleId& a, const SubmoduleId& b) { return a.stage() < b.stage(); });
    for (std::size_t i = 0; i + 1 < sites.size(); ++i) {
        auto e = edge_scores(spliced, metric, stimuli, sites[i], sites[i + 1], ec);
        edges.insert(edges.end(), e.begin(), e.end());
    }
    emit(ctx, ctx.path("edges.tsv"), edge_scores_tsv(edges), inputs, {});
    std::cout << "scored " << nodes.size() << " nodes, " << edges.size() << " edges\n";
}

void cmd_extract_circuit(const Ctx& ctx) {
    const auto nodes = parse_node_scores_tsv(read_file(need(ctx.path("nodes.tsv"))));
    const auto edges = parse_edge_scores_tsv(read_file(need(ctx.path("edges.tsv"))));
    Circuit c = extract_circuit(nodes, edges, ctx.cfg.attribution.node_threshold,
                                ctx.cfg.attribution.edge_threshold);
    c.free_sites = free_site_set(ctx.cfg.model.n_layers, ctx.cfg.circuit.free_layers);
    c.metric = "prob_diff";
    c.dataset = "NP/Z ambiguous";
    save_circuit(c, ctx.path("circuit.json"));
    write_manifest(ctx.path("circuit.json"), ctx.cfg,
                   {ctx.path("nodes.tsv"), ctx.path("edges.tsv")}, {});
    std::cout << "circuit: " << c.nodes.size() << " nodes, " << c.edges.size() << " edges -> "
              << ctx.path("circuit.json") << "\n";
}

void cmd_faithfulness(const Ctx& ctx, const std::string& circuit_path) {
    const TransformerModel model = ctx.load_model();
    const SplicedModel spliced = ctx.load_spliced(model);
    const Circuit c = load_circuit(need(circuit_path));
    const auto stimuli = ctx.analysis_stimuli(GpCondition::ambiguous);
    const MetricSpec metric =
        ctx.analysis_metric(stimuli, MetricMode::logit_diff, model.tokenizer());
    FaithfulnessConfig fc;
    fc.threads = ctx.cfg.threads;
    const auto res = faithfulness(spliced, c, stimuli, metric, fc);
    std::ostringstream os;
    os.precision(17);
    os << "faithfulness\t" << res.value << "\n"
       << "n_used\t" << res.n_used << "\n"
       << "n_excluded\t" << res.excluded.size() << "\n";
    emit(ctx, ctx.path("faithfulness.txt"), os.str(),
         {circuit_path, ctx.path("model.bin"), ctx.path("stimuli.tsv")}, {});
    std::cout << os.str();
}

InterventionPlan attribution_plan(const Ctx& ctx, const SplicedModel& spliced,
                                  const std::vector<Stimulus>& stimuli) {
    const auto nodes = parse_node_scores_tsv(read_file(need(ctx.path("nodes.tsv"))));
    const int k = ctx.cfg.intervention.group_size;
    double clamp = ctx.cfg.intervention.clamp_value;
    if (clamp <= 0.0)
        clamp = suggested_clamp_value(spliced, ctx.sae_sites().front(), stimuli);
    InterventionPlan plan;
    plan.control_seed = ctx.cfg.intervention.control_seed;
    FeatureGroup pro{"pro-GP", {}, 0.0};  // suppress the GP reading
    for (const auto& n : nodes) {
        if (n.score <= 0.0 || static_cast<int>(pro.members.size()) >= k) continue;
        pro.members.push_back(n.coord);
    }
    FeatureGroup anti{"anti-GP", {}, clamp};  // boost the competing reading
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        if (it->score >= 0.0 || static_cast<int>(anti.members.size()) >= k) continue;
        anti.members.push_back(it->coord);
    }
    if (!pro.members.empty()) plan.groups.push_back(pro);
    if (!anti.members.empty()) plan.groups.push_back(anti);
    require(!plan.groups.empty(), "no attributed features to intervene on");
    return plan;
}

void cmd_intervene(const Ctx& ctx) {
    const TransformerModel model = ctx.load_model();
    const SplicedModel spliced = ctx.load_spliced(model);
    const auto stimuli = ctx.analysis_stimuli(GpCondition::ambiguous);
    const InterventionPlan plan = attribution_plan(ctx, spliced, stimuli);
    const auto rep = run_intervention(spliced, plan, stimuli, ctx.cfg.threads);
    std::ostringstream os;
    os.precision(17);
    os << "condition\tn\tmean_p_gp\tmean_p_nongp\tmean_m\tsem_m\n";
    auto line = [&](const char* name, const InterventionCell& c) {
        os << name << "\t" << c.n << "\t" << c.mean_p_gp << "\t" << c.mean_p_nongp << "\t"
           << c.mean_m << "\t" << c.sem_m << "\n";
    };
    line("baseline", rep.baseline);
    line("intervention", rep.intervention);
    line("random_control", rep.control);
    emit(ctx, ctx.path("intervention.tsv"), os.str(),
         {ctx.path("model.bin"), ctx.path("nodes.tsv"), ctx.path("stimuli.tsv")},
         {ctx.cfg.intervention.control_seed});
    std::cout << os.str();
}

void cmd_probe_train(const Ctx& ctx) {
    const TransformerModel model = ctx.load_model();
    auto bank = ctx.load_treebank();
    std::erase_if(bank, [&](const DepTree& t) {
        return static_cast<int>(t.tokens.size()) > model.config().max_seq_len;
    });
    ProbeTrainConfig tc;
    tc.hidden = ctx.cfg.probe.hidden;
    tc.learning_rate = ctx.cfg.probe.learning_rate;
    tc.epochs = ctx.cfg.probe.epochs;
    tc.batch_size = ctx.cfg.probe.batch_size;
    tc.rng_seed = ctx.cfg.probe.rng_seed;
    tc.threads = ctx.cfg.threads;
    ProbeTrainLog log;
    const ActionProbe probe = train_probe(model, bank, ctx.cfg.probe.layer, tc, &log);
    if (log.diverged) throw Error("probe training diverged");
    probe.save(ctx.path("probe.bin"));
    write_manifest(ctx.path("probe.bin"), ctx.cfg,
                   {ctx.path("model.bin"), ctx.path("treebank.txt")}, {ctx.cfg.probe.rng_seed});
    std::cout << "trained probe on " << log.n_states << " states -> " << ctx.path("probe.bin")
              << "\n";
}

void cmd_probe_eval(const Ctx& ctx) {
    const TransformerModel model = ctx.load_model();
    const ActionProbe probe = ActionProbe::load(need(ctx.path("probe.bin")));
    auto bank = ctx.load_treebank();
    std::erase_if(bank, [&](const DepTree& t) {
        return static_cast<int>(t.tokens.size()) > model.config().max_seq_len;
    });
    const auto ev = eval_probe(model, probe, bank, ctx.cfg.threads);
    std::ostringstream os;
    os.precision(17);
    os << "layer\t" << probe.layer << "\nuas\t" << ev.uas << "\nuuas\t" << ev.uuas
       << "\naction_accuracy\t" << ev.action_accuracy << "\nn_sentences\t" << ev.n_sentences
       << "\nn_failures\t" << ev.n_failures << "\n";
    emit(ctx, ctx.path("probe_eval.txt"), os.str(),
         {ctx.path("model.bin"), ctx.path("probe.bin"), ctx.path("treebank.txt")}, {});
    std::cout << os.str();
}

void cmd_probe_reading(const Ctx& ctx) {
    const TransformerModel model = ctx.load_model();
    const ActionProbe probe = ActionProbe::load(need(ctx.path("probe.bin")));
    const auto stimuli = ctx.load_stimuli();
    std::ostringstream os;
    os.precision(17);
    os << "structure\tcondition\tn\tp_left_arc\tp_right_arc\tp_gen\n";
    for (GpStructure s : kStructures)
        for (GpCondition c : kConditions) {
            std::vector<Stimulus> cell;
            for (const auto& st : stimuli)
                if (st.structure == s && st.condition == c) cell.push_back(st);
            if (cell.empty()) continue;
            const auto mean = mean_probe_reading(model, probe, cell, ctx.cfg.threads);
            os << structure_name(s) << "\t" << condition_name(c) << "\t" << cell.size() << "\t"
               << mean[0] << "\t" << mean[1] << "\t" << mean[2] << "\n";
        }
    emit(ctx, ctx.path("probe_readings.tsv"), os.str(),
         {ctx.path("model.bin"), ctx.path("probe.bin"), ctx.path("stimuli.tsv")}, {});
    std::cout << os.str();
}

void cmd_compare_circuits(const Ctx& ctx, const std::string& a_path, const std::string& b_path) {
    const Circuit a = load_circuit(need(a_path));
    const Circuit b = load_circuit(need(b_path));
    const auto iou = circuit_iou(a, b);
    std::ostringstream os;
    os.precision(17);
    os << "iou\t" << iou.value << "\n"
       << "both_empty\t" << (iou.both_empty ? 1 : 0) << "\n";
    if (!a.nodes.empty()) {
        std::vector<FeatureCoord> ra, rb;
        for (const auto& n : a.nodes) ra.push_back(n.coord);
        for (const auto& n : b.nodes) rb.push_back(n.coord);
        os << "recall_a_in_b\t" << feature_recall(ra, rb) << "\n";
    }
    emit(ctx, ctx.path("compare.txt"), os.str(), {a_path, b_path}, {});
    std::cout << os.str();
}

void cmd_report(const Ctx& ctx) {
    std::ostringstream os;
    os << "# pipeline report (toolkit " << kToolkitVersion << ", config " << ctx.cfg.hash()
       << ")\n\n";
    for (const char* f : {"train_log.txt", "behavioral.tsv", "faithfulness.txt",
                          "intervention.tsv", "probe_eval.txt", "probe_readings.tsv"}) {
        const std::string p = ctx.path(f);
        if (!fs::exists(p)) continue;
        os << "## " << f << "\n" << read_file(p) << "\n";
    }
    emit(ctx, ctx.path("report.txt"), os.str(), {}, {});
    std::cout << "wrote " << ctx.path("report.txt") << "\n";
}

void cmd_pipeline(const Ctx& ctx) {
    cmd_gen_grammar(ctx);
    cmd_train_lm(ctx);
    cmd_collect_acts(ctx);
    cmd_train_sae(ctx);
    cmd_behavioral(ctx);
    cmd_attribute(ctx);
    cmd_extract_circuit(ctx);
    cmd_faithfulness(ctx, ctx.path("circuit.json"));
    cmd_intervene(ctx);
    cmd_probe_train(ctx);
    cmd_probe_eval(ctx);
    cmd_probe_reading(ctx);
    cmd_report(ctx);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse feature circuit toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir_flag;
    unsigned threads_flag = 0;
    app.add_option("--config", config_path, "run configuration JSON (defaults used if omitted)");
    app.add_option("--out", out_dir_flag, "output directory (overrides config out_dir)");
    app.add_option("--threads", threads_flag, "worker thread cap (0 = hardware)");

    std::string circuit_path, circuit_b_path;
    auto* gen = app.add_subcommand("gen-grammar", "generate treebank and stimuli");
    auto* tlm = app.add_subcommand("train-lm", "train the toy LM on the treebank");
    auto* col = app.add_subcommand("collect-acts", "collect site activations");
    auto* tse = app.add_subcommand("train-sae", "train SAEs on collected activations");
    auto* beh = app.add_subcommand("behavioral", "garden-path behavioral evaluation");
    auto* att = app.add_subcommand("attribute", "node/edge attribution scores");
    auto* exc = app.add_subcommand("extract-circuit", "threshold scores into a circuit");
    auto* fai = app.add_subcommand("faithfulness", "faithfulness of a circuit");
    fai->add_option("--circuit", circuit_path, "circuit JSON (default: <out>/circuit.json)");
    auto* inv = app.add_subcommand("intervene", "clamp attributed groups with random control");
    auto* ptr = app.add_subcommand("probe-train", "train the parse-action probe");
    auto* pev = app.add_subcommand("probe-eval", "UAS/UUAS/action accuracy");
    auto* prd = app.add_subcommand("probe-reading", "action probabilities on stimuli");
    auto* cmp = app.add_subcommand("compare-circuits", "IoU/recall of two circuits");
    cmp->add_option("--a", circuit_path, "first circuit")->required();
    cmp->add_option("--b", circuit_b_path, "second circuit")->required();
    auto* rep = app.add_subcommand("report", "aggregate available outputs");
    auto* pip = app.add_subcommand("pipeline", "run the full pipeline in order");

    CLI11_PARSE(app, argc, argv);

    Ctx ctx;
    std::vector<std::string> errors;
    if (!config_path.empty()) {
        if (!fs::exists(config_path)) {
            std::cerr << "missing artifact: " << config_path << "\n";
            return kExitMissing;
        }
        ctx.cfg = RunConfig::load(config_path, errors);
    }
    if (!errors.empty()) {
        for (const auto& e : errors) std::cerr << "config error: " << e << "\n";
        return kExitConfig;
    }
    if (!out_dir_flag.empty()) ctx.cfg.out_dir = out_dir_flag;
    if (threads_flag != 0) ctx.cfg.threads = threads_flag;
    ctx.dir = ctx.cfg.out_dir;

    try {
        fs::create_directories(ctx.dir);
        if (gen->parsed()) cmd_gen_grammar(ctx);
        if (tlm->parsed()) cmd_train_lm(ctx);
        if (col->parsed()) cmd_collect_acts(ctx);
        if (tse->parsed()) cmd_train_sae(ctx);
        if (beh->parsed()) cmd_behavioral(ctx);
        if (att->parsed()) cmd_attribute(ctx);
        if (exc->parsed()) cmd_extract_circuit(ctx);
        if (fai->parsed())
            cmd_faithfulness(ctx, circuit_path.empty() ? ctx.path("circuit.json") : circuit_path);
        if (inv->parsed()) cmd_intervene(ctx);
        if (ptr->parsed()) cmd_probe_train(ctx);
        if (pev->parsed()) cmd_probe_eval(ctx);
        if (prd->parsed()) cmd_probe_reading(ctx);
        if (cmp->parsed()) cmd_compare_circuits(ctx, circuit_path, circuit_b_path);
        if (rep->parsed()) cmd_report(ctx);
        if (pip->parsed()) cmd_pipeline(ctx);
    } catch (const MissingArtifact& e) {
        std::cerr << e.what() << "\n";
        return kExitMissing;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return 0;
}
