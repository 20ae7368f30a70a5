#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "sfc/manifest.hpp"

using namespace sfc;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const std::string& log) {
    const std::string cmd = std::string(SFC_CLI_PATH) + " " + args + " >" + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

// small enough to run the whole pipeline in seconds
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.model = {2, 32, 2, 64, 0, 16, 11};
    cfg.lm.epochs = 1;
    cfg.sae.d_features = 64;
    cfg.sae.steps = 200;
    cfg.sae_sites = {"residual.0", "residual.1"};
    cfg.attribution.method = "atp";
    cfg.stimuli.corpus_sentences = 100;
    cfg.stimuli.items_per_condition = 4;
    cfg.intervention.group_size = 5;
    cfg.probe.layer = 1;
    cfg.probe.hidden = 16;
    cfg.probe.epochs = 2;
    cfg.threads = 1;
    return cfg;
}

std::string output_hash(const std::string& artifact) {
    return nlohmann::json::parse(read_file(artifact + ".manifest.json"))
        .at("output_hash")
        .get<std::string>();
}

}  // namespace

TEST_CASE("cli exit codes") {
    const fs::path dir = fs::temp_directory_path() / "sfc_cli_codes";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string log = (dir / "log.txt").string();

    SECTION("config errors -> 2, all reported") {
        auto j = tiny_config().to_json();
        j["model"]["n_layers"] = 0;
        j["typo_section"] = 1;
        const std::string cfg_path = (dir / "bad.json").string();
        write_file(cfg_path, j.dump());
        CHECK(run("--config " + cfg_path + " gen-grammar", log) == 2);
        const std::string err = read_file(log);
        CHECK(err.find("n_layers") != std::string::npos);
        CHECK(err.find("typo_section") != std::string::npos);
    }

    SECTION("missing config file -> 3") {
        CHECK(run("--config " + (dir / "absent.json").string() + " gen-grammar", log) == 3);
    }

    SECTION("missing upstream artifact -> 3 with path") {
        CHECK(run("--out " + (dir / "empty").string() + " train-lm", log) == 3);
        CHECK(read_file(log).find("treebank.txt") != std::string::npos);
    }

    fs::remove_all(dir);
}

TEST_CASE("cli pipeline is reproducible end to end") {
    const fs::path base = fs::temp_directory_path() / "sfc_cli_pipe";
    fs::remove_all(base);
    fs::create_directories(base);
    const std::string log = (base / "log.txt").string();

    auto run_pipeline = [&](const std::string& name) {
        RunConfig cfg = tiny_config();
        cfg.out_dir = (base / name).string();
        const std::string cfg_path = (base / (name + ".json")).string();
        write_file(cfg_path, cfg.to_json().dump(2));
        REQUIRE(run("--config " + cfg_path + " pipeline", log) == 0);
        return cfg.out_dir;
    };
    const std::string a = run_pipeline("a");
    const std::string b = run_pipeline("b");

    const char* artifacts[] = {"treebank.txt",  "stimuli.tsv",  "model.bin",
                               "behavioral.tsv", "nodes.tsv",    "edges.tsv",
                               "circuit.json",  "faithfulness.txt", "intervention.tsv",
                               "probe.bin",     "probe_eval.txt", "probe_readings.tsv"};
    for (const char* f : artifacts) {
        CAPTURE(f);
        REQUIRE(fs::exists(a + "/" + f));
        CHECK(output_hash(a + "/" + f) == output_hash(b + "/" + f));
        CHECK(read_file(a + "/" + f) == read_file(b + "/" + f));
    }

    SECTION("compare-circuits of a circuit with itself") {
        REQUIRE(run("--out " + a + " compare-circuits --a " + a + "/circuit.json --b " + b +
                        "/circuit.json",
                    log) == 0);
        const std::string out = read_file(a + "/compare.txt");
        const bool identical = out.find("iou\t1\n") != std::string::npos ||
                               out.find("both_empty\t1") != std::string::npos;
        CHECK(identical);
    }

    fs::remove_all(base);
}
