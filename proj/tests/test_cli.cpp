// End-to-end CLI checks through real processes and files: determinism of the
// generate/train/eval chain, exit codes, and output schemas.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#ifndef REMED_CLI_PATH
#error "REMED_CLI_PATH must be defined"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Workdir {
    fs::path dir;
    Workdir() {
        dir = fs::temp_directory_path() / ("remed_cli_" + std::to_string(::getpid()));
        fs::create_directories(dir);
    }
    ~Workdir() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run_cli(const std::string& args) {
    std::string cmd = std::string(REMED_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_config(const std::string& path, int dim = 32) {
    json cfg;
    cfg["seed"] = 11;
    cfg["gen"] = {{"n_patients", 50},
                  {"events_per_sample", {30, 60}},
                  {"n_noise_codes", 12},
                  {"prediction_time", 1000.0},
                  {"signal_specs",
                   json::array({{{"signal_code", "SNEAR"},
                                 {"task_name", "near"},
                                 {"t_lo", 750.0},
                                 {"t_hi", 1000.0},
                                 {"mechanism", "presence"}}})}};
    cfg["encoder"] = {{"kind", "hash"}, {"dim", dim}, {"buckets", 1024}};
    cfg["train"] = {{"learning_rate", 2e-3}, {"warmup_steps", 20},  {"batch_size", 8},
                    {"k", 12},              {"max_epochs", 2},      {"patience", 3},
                    {"baseline_max_events", 12}};
    std::ofstream out(path);
    out << cfg.dump(2);
}

}  // namespace

TEST_CASE("generate-train-eval chain is byte-deterministic" * doctest::timeout(600)) {
    Workdir w;
    write_config(w.path("cfg.json"));

    for (int round = 1; round <= 2; ++round) {
        std::string suffix = std::to_string(round);
        REQUIRE(run_cli("generate --config " + w.path("cfg.json") + " --out " + w.path("cohort" + suffix) +
                        " --seed 11") == 0);
        REQUIRE(run_cli("train --cohort " + w.path("cohort" + suffix) + " --config " + w.path("cfg.json") +
                        " --out-model " + w.path("model" + suffix) + " --out-log " +
                        w.path("log" + suffix) + " --cache " + w.path("cache" + suffix)) == 0);
        REQUIRE(run_cli("eval --cohort " + w.path("cohort" + suffix) + " --model " + w.path("model" + suffix) +
                        " --out " + w.path("metrics" + suffix) + " --cache " + w.path("cache" + suffix)) == 0);
    }
    CHECK(slurp(w.path("cohort1")) == slurp(w.path("cohort2")));
    CHECK(slurp(w.path("model1")) == slurp(w.path("model2")));
    CHECK(slurp(w.path("log1")) == slurp(w.path("log2")));
    CHECK(slurp(w.path("metrics1")) == slurp(w.path("metrics2")));

    // metrics schema: per_task entry for every task
    json metrics = json::parse(slurp(w.path("metrics1")));
    CHECK(metrics.contains("micro_auroc"));
    REQUIRE(metrics.at("per_task").contains("near"));

    // re-running eval alone is idempotent
    REQUIRE(run_cli("eval --cohort " + w.path("cohort1") + " --model " + w.path("model1") + " --out " +
                    w.path("metrics1b") + " --cache " + w.path("cache1")) == 0);
    CHECK(slurp(w.path("metrics1")) == slurp(w.path("metrics1b")));
}

TEST_CASE("config errors exit 2") {
    Workdir w;
    CHECK(run_cli("generate --config " + w.path("nonexistent.json") + " --out " + w.path("c")) == 2);

    std::ofstream(w.path("bad.json")) << R"({"seed":1,"bogus":{}})";
    CHECK(run_cli("generate --config " + w.path("bad.json") + " --out " + w.path("c")) == 2);

    std::ofstream(w.path("bad2.json")) << R"({"gen":{"n_patients":5,"events_per_sample":[10,20],)"
                                       << R"("n_noise_codes":4,"prediction_time":100.0,)"
                                       << R"("signal_specs":[],"mystery":1}})";
    CHECK(run_cli("generate --config " + w.path("bad2.json") + " --out " + w.path("c")) == 2);

    CHECK(run_cli("train --cohort missing --config " + w.path("bad.json") + " --out-model x") == 2);
}

TEST_CASE("dimension mismatch between model and cache exits 4" * doctest::timeout(600)) {
    Workdir w;
    write_config(w.path("cfg32.json"), 32);
    write_config(w.path("cfg16.json"), 16);
    REQUIRE(run_cli("generate --config " + w.path("cfg32.json") + " --out " + w.path("cohort")) == 0);
    REQUIRE(run_cli("train --cohort " + w.path("cohort") + " --config " + w.path("cfg32.json") +
                    " --out-model " + w.path("model32") + " --cache " + w.path("cache32")) == 0);
    // a cache built at a different dimension cannot serve this model
    REQUIRE(run_cli("train --cohort " + w.path("cohort") + " --config " + w.path("cfg16.json") +
                    " --out-model " + w.path("model16") + " --cache " + w.path("cache16")) == 0);
    CHECK(run_cli("eval --cohort " + w.path("cohort") + " --model " + w.path("model32") + " --out " +
                  w.path("m") + " --cache " + w.path("cache16")) == 4);
}

TEST_CASE("analyze modes and their errors" * doctest::timeout(600)) {
    Workdir w;
    write_config(w.path("cfg.json"));
    REQUIRE(run_cli("generate --config " + w.path("cfg.json") + " --out " + w.path("cohort")) == 0);
    REQUIRE(run_cli("train --cohort " + w.path("cohort") + " --config " + w.path("cfg.json") +
                    " --out-model " + w.path("model") + " --cache " + w.path("cache")) == 0);

    CHECK(run_cli("analyze --model " + w.path("model") + " --cohort " + w.path("cohort") +
                  " --mode profile --out " + w.path("p.csv") + " --cache " + w.path("cache")) == 2);

    REQUIRE(run_cli("analyze --model " + w.path("model") + " --cohort " + w.path("cohort") +
                    " --mode freq --out " + w.path("freq.csv") + " --cache " + w.path("cache")) == 0);
    std::string freq = slurp(w.path("freq.csv"));
    CHECK(freq.rfind("code,avg_retrieved\n", 0) == 0);

    REQUIRE(run_cli("analyze --model " + w.path("model") + " --cohort " + w.path("cohort") +
                    " --mode profile --code SNEAR --out " + w.path("profile.csv") + " --cache " +
                    w.path("cache")) == 0);
    std::string prof = slurp(w.path("profile.csv"));
    CHECK(prof.rfind("t_minutes,value,score\n", 0) == 0);

    // determinism of analysis outputs
    REQUIRE(run_cli("analyze --model " + w.path("model") + " --cohort " + w.path("cohort") +
                    " --mode freq --out " + w.path("freq2.csv") + " --cache " + w.path("cache")) == 0);
    CHECK(slurp(w.path("freq.csv")) == slurp(w.path("freq2.csv")));
}

TEST_CASE("baseline flag trains a model without retriever parameters" * doctest::timeout(600)) {
    Workdir w;
    write_config(w.path("cfg.json"));
    REQUIRE(run_cli("generate --config " + w.path("cfg.json") + " --out " + w.path("cohort")) == 0);
    REQUIRE(run_cli("train --cohort " + w.path("cohort") + " --config " + w.path("cfg.json") +
                    " --baseline 12 --out-model " + w.path("base_model") + " --cache " + w.path("cache")) ==
            0);
    json model = json::parse(slurp(w.path("base_model")));
    CHECK(model.at("config").at("kind") == "cached_baseline");
    for (const auto& [name, v] : model.at("params").items())
        CHECK(name.rfind("retriever", 0) != 0);
    CHECK(run_cli("eval --cohort " + w.path("cohort") + " --model " + w.path("base_model") + " --out " +
                  w.path("bm") + " --cache " + w.path("cache")) == 0);
}

TEST_CASE("sweep emits one row per window x seed x model plus the tests" * doctest::timeout(900)) {
    Workdir w;
    write_config(w.path("cfg.json"));
    REQUIRE(run_cli("generate --config " + w.path("cfg.json") + " --out " + w.path("cohort")) == 0);
    REQUIRE(run_cli("sweep --cohort " + w.path("cohort") + " --config " + w.path("cfg.json") +
                    " --windows 250,500,unlimited --seeds 2 --out " + w.path("sweep.json") + " --cache " +
                    w.path("cache")) == 0);
    json sweep = json::parse(slurp(w.path("sweep.json")));
    CHECK(sweep.at("windows").size() == 3);
    CHECK(sweep.at("cells").size() == 3 * 2 * 2);
    CHECK(sweep.contains("kendall"));
    CHECK(sweep.at("mannwhitney").size() == 3);
    for (const auto& cell : sweep.at("cells")) CHECK((cell.contains("micro_auroc") || cell.contains("error")));
}
