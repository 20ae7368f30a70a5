#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "sfc/manifest.hpp"

using namespace sfc;
namespace fs = std::filesystem;

TEST_CASE("fnv1a hashing") {
    CHECK(fnv1a("") == 1469598103934665603ull);
    CHECK(fnv1a("a") != fnv1a("b"));
    CHECK(fnv1a("abc") == fnv1a("abc"));
    CHECK(hash_hex(0) == "0000000000000000");
    CHECK(hash_hex(fnv1a("abc")).size() == 16);
}

TEST_CASE("run config json round trip") {
    RunConfig cfg;
    cfg.model.n_layers = 2;
    cfg.probe.layer = 1;
    cfg.attribution.method = "atp";
    cfg.sae_sites = {"residual.0"};
    cfg.out_dir = "elsewhere";
    cfg.threads = 3;

    std::vector<std::string> errors;
    const RunConfig back = RunConfig::from_json(cfg.to_json(), errors);
    CAPTURE(errors);
    REQUIRE(errors.empty());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.hash() == cfg.hash());
    CHECK(back.hash() != RunConfig{}.hash());
}

TEST_CASE("config errors are exhaustive") {
    RunConfig defaults;
    auto j = defaults.to_json();
    j["model"]["n_layers"] = 0;
    j["model"]["bogus"] = 1;
    j["attribution"]["method"] = "psychic";
    j["probe"]["layer"] = 99;
    j["nonsense_section"] = {{"x", 1}};

    std::vector<std::string> errors;
    RunConfig::from_json(j, errors);
    REQUIRE(errors.size() >= 4);
    auto has = [&](const std::string& needle) {
        for (const auto& e : errors)
            if (e.find(needle) != std::string::npos) return true;
        return false;
    };
    CHECK(has("n_layers"));
    CHECK(has("bogus"));
    CHECK(has("method"));
    CHECK(has("layer"));
    CHECK(has("nonsense_section"));

    // a partial config is fine: missing keys keep defaults
    errors.clear();
    const RunConfig partial =
        RunConfig::from_json(nlohmann::json{{"model", {{"n_layers", 3}}}}, errors);
    CAPTURE(errors);
    REQUIRE(errors.empty());
    CHECK(partial.model.n_layers == 3);
    CHECK(partial.model.d_model == RunConfig{}.model.d_model);
}

TEST_CASE("write_manifest records hashes and inputs") {
    const fs::path dir = fs::temp_directory_path() / "sfc_manifest_test";
    fs::create_directories(dir);
    const std::string in = (dir / "in.txt").string();
    const std::string out = (dir / "out.txt").string();
    write_file(in, "input bytes");
    write_file(out, "output bytes");

    RunConfig cfg;
    write_manifest(out, cfg, {in}, {7, 9});
    const auto m = nlohmann::json::parse(read_file(out + ".manifest.json"));
    CHECK(m.at("toolkit_version").get<std::string>() == kToolkitVersion);
    CHECK(m.at("config_hash").get<std::string>() == cfg.hash());
    CHECK(m.at("inputs").at(in).get<std::string>() == hash_file(in));
    CHECK(m.at("output_hash").get<std::string>() == hash_hex(fnv1a("output bytes")));
    CHECK(m.at("seeds") == nlohmann::json({7, 9}));
    fs::remove_all(dir);
}
