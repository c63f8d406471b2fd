// Command-line front end: cohort generation, training, evaluation, retrieval
// analysis, and the observation-window sweep. All outputs are files; identical
// inputs and seeds give byte-identical outputs.
//
// Exit codes: 0 ok, 2 config error, 3 training divergence, 4 artifact mismatch.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "remed/analysis.hpp"
#include "remed/encoder.hpp"
#include "remed/evalstats.hpp"
#include "remed/modelio.hpp"
#include "remed/synthcohort.hpp"
#include "remed/trainer.hpp"

using json = nlohmann::ordered_json;
using namespace remed;

namespace {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArtifactMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

// Run configuration: one JSON file with gen/encoder/train sections. All
// randomness flows from the single top-level seed through named substreams
// unless a section pins its own.
struct RunConfig {
    uint64_t seed{0};
    synth::GenConfig gen;
    bool has_gen{false};
    encoder::HashEncoderConfig enc;
    encoder::TrainedEncoderConfig trained_enc;
    trainer::TrainConfig train;
    retriever::RetrieverConfig rcfg;
    predictor::PredictorConfig pcfg;

    json echo;  // resolved values, written next to outputs
};

RunConfig parse_run_config(const std::string& path, uint64_t seed_override, bool have_override) {
    json j = load_json_file(path);
    reject_unknown(j, {"seed", "gen", "encoder", "train"}, "config");

    RunConfig rc;
    rc.seed = j.value("seed", uint64_t(0));
    if (have_override) rc.seed = seed_override;

    if (j.contains("gen")) {
        rc.has_gen = true;
        rc.gen = synth::gen_config_from_json(j.at("gen").dump());
        if (!j.at("gen").contains("seed") || have_override)
            rc.gen.seed = Rng::hash_label(rc.seed, "gen");
    }

    if (j.contains("encoder")) {
        const json& e = j.at("encoder");
        reject_unknown(e,
                       {"kind", "dim", "buckets", "seed", "vocab", "max_tokens", "layers", "heads", "ffn",
                        "events_per_step", "batch_size", "steps", "learning_rate"},
                       "config.encoder");
        std::string kind = e.value("kind", "hash");
        if (kind != "hash" && kind != "trained") throw ConfigError("encoder.kind must be hash or trained");
        rc.enc.dim = e.value("dim", 64);
        rc.enc.buckets = e.value("buckets", 4096);
        rc.enc.seed = e.contains("seed") ? e.at("seed").get<uint64_t>() : Rng::hash_label(rc.seed, "encoder");
        rc.trained_enc.dim = rc.enc.dim;
        rc.trained_enc.vocab = e.value("vocab", 2048);
        rc.trained_enc.max_tokens = e.value("max_tokens", 24);
        rc.trained_enc.layers = e.value("layers", 1);
        rc.trained_enc.heads = e.value("heads", 4);
        rc.trained_enc.ffn = e.value("ffn", 128);
        rc.trained_enc.events_per_step = e.value("events_per_step", 128);
        rc.trained_enc.batch_size = e.value("batch_size", 4);
        rc.trained_enc.steps = e.value("steps", 400);
        rc.trained_enc.learning_rate = e.value("learning_rate", 1e-3);
        rc.trained_enc.seed = Rng::hash_label(rc.seed, "trained_encoder");
    } else {
        rc.enc.seed = Rng::hash_label(rc.seed, "encoder");
        rc.trained_enc.seed = Rng::hash_label(rc.seed, "trained_encoder");
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"learning_rate", "warmup_steps", "batch_size", "k", "max_epochs", "patience",
                        "seed", "path_order", "baseline_max_events"},
                       "config.train");
        rc.train.learning_rate = t.value("learning_rate", 1e-5);
        rc.train.warmup_steps = t.value("warmup_steps", 500);
        rc.train.batch_size = t.value("batch_size", 8);
        rc.train.k = t.value("k", 128);
        rc.train.max_epochs = t.value("max_epochs", 50);
        rc.train.patience = t.value("patience", 3);
        rc.train.seed = t.contains("seed") ? t.at("seed").get<uint64_t>() : Rng::hash_label(rc.seed, "train");
        std::string po = t.value("path_order", "P");
        if (po != "P" && po != "R") throw ConfigError("train.path_order must be P or R");
        rc.train.path_order = po[0];
        rc.train.baseline_max_events = t.value("baseline_max_events", 0);
        try {
            rc.train.validate();
        } catch (const std::exception& ex) {
            throw ConfigError(ex.what());
        }
    } else {
        rc.train.seed = Rng::hash_label(rc.seed, "train");
    }

    rc.rcfg.dim = rc.enc.dim;
    rc.rcfg.hidden = 2 * rc.enc.dim;
    rc.pcfg.dim = rc.enc.dim;

    rc.echo = j;
    rc.echo["seed"] = rc.seed;
    if (rc.has_gen) rc.echo["gen"] = json::parse(synth::gen_config_to_json(rc.gen));
    return rc;
}

std::string default_cache_path(const std::string& cohort_path) {
    return cohort_path + ".cache";
}

struct Pipeline {
    events::Cohort cohort;
    trainer::EncodedCohort data;
    encoder::HashEncoderConfig enc_cfg;
};

// load cohort, build or reuse the vector cache, produce the training view
Pipeline prepare(const std::string& cohort_path, const RunConfig& rc, const std::string& encoder_kind,
                 const std::string& cache_path_flag) {
    Pipeline p;
    p.cohort = events::load_cohort(cohort_path);
    p.enc_cfg = rc.enc;

    std::string cache_path = cache_path_flag.empty() ? default_cache_path(cohort_path) : cache_path_flag;

    encoder::VectorCache cache;
    bool cache_ok = false;
    if (std::filesystem::exists(cache_path)) {
        cache = encoder::VectorCache::load(cache_path);
        int64_t total = 0;
        for (const auto& s : p.cohort.samples) total += int64_t(s.events.size());
        cache_ok = cache.rows() == total;
    }

    if (encoder_kind == "hash") {
        encoder::AnyEncoder enc{encoder::HashEncoder(rc.enc)};
        if (!cache_ok || cache.encoder_fingerprint != enc.fingerprint()) {
            cache = encoder::encode_cohort(p.cohort, enc);
            cache.save(cache_path);
        }
    } else {
        // the trained event encoder is fitted on the train split only, then
        // frozen for the whole cohort
        std::vector<std::string> ids;
        std::set<std::string> seen;
        for (const auto& s : p.cohort.samples)
            if (seen.insert(s.patient_id).second) ids.push_back(s.patient_id);
        auto splits = events::assign_patient_splits(ids, {8, 1, 1}, rc.train.seed);
        std::map<std::string, int> part;
        for (size_t i = 0; i < ids.size(); ++i) part[ids[i]] = splits[i];
        events::Cohort train_only;
        train_only.tasks = p.cohort.tasks;
        train_only.code_descriptions = p.cohort.code_descriptions;
        for (const auto& s : p.cohort.samples)
            if (part.at(s.patient_id) == 0) train_only.samples.push_back(s);

        encoder::TrainedEncoder tenc = encoder::TrainedEncoder::train(train_only, rc.trained_enc);
        encoder::AnyEncoder enc{std::move(tenc)};
        if (!cache_ok || cache.encoder_fingerprint != enc.fingerprint()) {
            cache = encoder::encode_cohort(p.cohort, enc);
            cache.save(cache_path);
        }
    }

    p.data = trainer::build_encoded(p.cohort, std::move(cache));
    return p;
}

void write_json(const json& j, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write output file: " + path);
    out << j.dump(2) << '\n';
}

json metrics_json(const trainer::EvalResult& ev) {
    json out;
    out["micro_auroc"] = ev.micro_auroc ? json(*ev.micro_auroc) : json(nullptr);
    out["per_task"] = json::object();
    for (const auto& [name, a] : ev.per_task) out["per_task"][name] = a ? json(*a) : json(nullptr);
    if (ev.retrieval_recall) out["retrieval_recall"] = *ev.retrieval_recall;
    out["skipped_samples"] = ev.skipped;
    return out;
}

int cmd_generate(const std::string& config_path, const std::string& out_path, uint64_t seed_override,
                 bool have_seed) {
    RunConfig rc = parse_run_config(config_path, seed_override, have_seed);
    if (!rc.has_gen) throw ConfigError("generate: config has no 'gen' section");
    auto cohort = synth::generate(rc.gen);
    events::save_cohort(cohort, out_path);
    write_json(rc.echo, out_path + ".config.json");
    std::cout << "wrote " << cohort.samples.size() << " samples to " << out_path << "\n";
    return 0;
}

int cmd_train(const std::string& cohort_path, const std::string& config_path, const std::string& enc_kind,
              const std::string& out_model, const std::string& out_log, int baseline,
              const std::string& cache_flag, uint64_t seed_override, bool have_seed, bool lr_grid) {
    RunConfig rc = parse_run_config(config_path, seed_override, have_seed);
    Pipeline p = prepare(cohort_path, rc, enc_kind, cache_flag);
    auto views = trainer::split_views(p.data, {8, 1, 1}, rc.train.seed);

    // learning-rate grid: keep the best validation AUROC over the sweep
    std::vector<double> lrs{rc.train.learning_rate};
    if (lr_grid) lrs = {1e-6, 1e-5, 1e-4, 1e-3};

    trainer::TrainedModel best;
    trainer::TrainLog best_log;
    double best_val = -1;
    for (double lr : lrs) {
        trainer::TrainConfig tcfg = rc.train;
        tcfg.learning_rate = lr;
        if (baseline > 0) tcfg.baseline_max_events = baseline;
        trainer::TrainLog log;
        trainer::TrainedModel model =
            baseline > 0 ? trainer::train_baseline_cached(views[0], views[1], tcfg, rc.pcfg,
                                                          p.data.encoder_fingerprint, &log)
                         : trainer::train(views[0], views[1], tcfg, rc.rcfg, rc.pcfg,
                                          p.data.encoder_fingerprint, &log);
        if (model.best_val_micro_auroc > best_val) {
            best_val = model.best_val_micro_auroc;
            best = std::move(model);
            best_log = std::move(log);
        }
    }
    trainer::save_model(best, rc.enc, out_model);
    if (!out_log.empty()) best_log.save_jsonl(out_log);
    std::cout << "trained " << (baseline > 0 ? "cached_baseline" : "remed") << ", best val micro-AUROC "
              << best_val << "\n";
    return 0;
}

trainer::View test_view_of(const trainer::EncodedCohort& data, const trainer::TrainedModel& model) {
    auto views = trainer::split_views(data, {8, 1, 1}, model.tcfg.seed);
    return views[2];
}

// cohort + cache agreement with the model, exit 4 on mismatch
trainer::EncodedCohort load_for_model(const std::string& cohort_path, const trainer::LoadedModel& lm,
                                      events::Cohort* cohort_out, const std::string& cache_flag) {
    events::Cohort cohort = events::load_cohort(cohort_path);
    std::string cache_path = cache_flag.empty() ? default_cache_path(cohort_path) : cache_flag;
    encoder::VectorCache cache;
    bool have = false;
    if (std::filesystem::exists(cache_path)) {
        cache = encoder::VectorCache::load(cache_path);
        int64_t total = 0;
        for (const auto& s : cohort.samples) total += int64_t(s.events.size());
        if (cache.rows() == total) have = true;
    }
    if (have) {
        if (cache.encoder_fingerprint != lm.model.encoder_fingerprint || cache.dim != lm.model.pcfg.dim)
            throw ArtifactMismatch("encoder fingerprint/dimension mismatch between model and cache");
    } else {
        encoder::AnyEncoder enc{encoder::HashEncoder(lm.enc_cfg)};
        if (enc.fingerprint() != lm.model.encoder_fingerprint)
            throw ArtifactMismatch("model was trained with a different encoder than its config rebuilds");
        cache = encoder::encode_cohort(cohort, enc);
        cache.save(cache_path);
    }
    if (cohort_out) *cohort_out = cohort;
    return trainer::build_encoded(cohort, std::move(cache));
}

int cmd_eval(const std::string& cohort_path, const std::string& model_path, const std::string& out_path,
             const std::string& cache_flag, bool per_class_weighted) {
    auto lm = trainer::load_model(model_path);
    auto data = load_for_model(cohort_path, lm, nullptr, cache_flag);
    auto view = test_view_of(data, lm.model);
    auto ev = trainer::evaluate(view, lm.model, per_class_weighted);
    write_json(metrics_json(ev), out_path);
    std::cout << "micro-AUROC " << (ev.micro_auroc ? std::to_string(*ev.micro_auroc) : "n/a") << "\n";
    return 0;
}

int cmd_analyze(const std::string& model_path, const std::string& cohort_path, const std::string& mode,
                const std::string& code, const std::string& out_path, const std::string& cache_flag) {
    if (mode != "freq" && mode != "profile") throw ConfigError("analyze: --mode must be freq or profile");
    if (mode == "profile" && code.empty()) throw ConfigError("analyze: --mode profile requires --code");
    auto lm = trainer::load_model(model_path);
    events::Cohort cohort;
    auto data = load_for_model(cohort_path, lm, &cohort, cache_flag);
    auto view = test_view_of(data, lm.model);
    if (mode == "freq") {
        auto rows = stats::code_retrieval_freq(view, lm.model);
        stats::write_code_freq_csv(rows, out_path);
    } else {
        auto rows = stats::importance_profile(view, cohort, lm.model, code);
        stats::write_profile_csv(rows, out_path);
        if (rows.skipped_unparsable > 0)
            std::cerr << "skipped " << rows.skipped_unparsable << " events with unparsable values\n";
    }
    return 0;
}

int cmd_sweep(const std::string& cohort_path, const std::string& config_path, const std::string& windows_arg,
              int seeds, const std::string& out_path, const std::string& cache_flag, uint64_t seed_override,
              bool have_seed) {
    RunConfig rc = parse_run_config(config_path, seed_override, have_seed);
    if (rc.train.baseline_max_events <= 0)
        throw ConfigError("sweep: config.train.baseline_max_events must be set (baseline capacity)");
    if (seeds < 1) throw ConfigError("sweep: --seeds must be >= 1");

    std::vector<std::pair<std::string, double>> windows;
    std::stringstream ss(windows_arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "unlimited")
            windows.emplace_back(tok, events::kUnlimitedWindow);
        else
            windows.emplace_back(tok, std::stod(tok));
    }
    if (windows.empty()) throw ConfigError("sweep: no windows given");

    Pipeline p = prepare(cohort_path, rc, "hash", cache_flag);

    json out;
    out["windows"] = json::array();
    for (const auto& [name, w] : windows) out["windows"].push_back(name);
    out["seeds"] = seeds;
    out["cells"] = json::array();

    std::vector<std::vector<double>> remed_cells(windows.size());  // per window, across seeds
    std::vector<std::vector<double>> base_cells(windows.size());

    for (size_t wi = 0; wi < windows.size(); ++wi) {
        for (int si = 0; si < seeds; ++si) {
            trainer::TrainConfig tcfg = rc.train;
            tcfg.seed = Rng::hash_label(rc.train.seed, "sweep_seed_" + std::to_string(si));
            auto views = trainer::split_views(p.data, {8, 1, 1}, tcfg.seed);
            auto train_v = views[0].with_window(windows[wi].second);
            auto val_v = views[1].with_window(windows[wi].second);
            auto test_v = views[2].with_window(windows[wi].second);

            for (bool baseline : {false, true}) {
                json cell;
                cell["model"] = baseline ? "cached_baseline" : "remed";
                cell["window"] = windows[wi].first;
                cell["seed"] = si;
                try {
                    trainer::TrainedModel model =
                        baseline ? trainer::train_baseline_cached(train_v, val_v, tcfg, rc.pcfg,
                                                                  p.data.encoder_fingerprint, nullptr)
                                 : trainer::train(train_v, val_v, tcfg, rc.rcfg, rc.pcfg,
                                                  p.data.encoder_fingerprint, nullptr);
                    auto ev = trainer::evaluate(test_v, model);
                    double a = ev.micro_auroc.value_or(0.0);
                    cell["micro_auroc"] = a;
                    if (windows[wi].second == events::kUnlimitedWindow) {
                        // unlimited cell must see every event of every sample
                        for (int s : test_v.samples)
                            if (test_v.window_begin(s) != 0)
                                throw std::runtime_error("unlimited window dropped events");
                    }
                    (baseline ? base_cells : remed_cells)[wi].push_back(a);
                } catch (const std::exception& e) {
                    cell["error"] = e.what();  // cell failures recorded, sweep continues
                }
                out["cells"].push_back(std::move(cell));
            }
        }
    }

    // monotonicity support: window rank vs mean REMed AUROC
    std::vector<double> rank, mean_auroc;
    for (size_t wi = 0; wi < windows.size(); ++wi) {
        if (remed_cells[wi].empty()) continue;
        double m = 0;
        for (double a : remed_cells[wi]) m += a;
        rank.push_back(double(wi + 1));
        mean_auroc.push_back(m / double(remed_cells[wi].size()));
    }
    if (rank.size() >= 3) {
        auto kt = stats::kendall_tau(rank, mean_auroc);
        out["kendall"] = {{"tau", kt.tau}, {"p", kt.p_value}};
    } else {
        out["kendall"] = nullptr;
    }

    out["mannwhitney"] = json::array();
    for (size_t wi = 0; wi < windows.size(); ++wi) {
        json mw;
        mw["window"] = windows[wi].first;
        if (!remed_cells[wi].empty() && !base_cells[wi].empty())
            mw["p"] = stats::mann_whitney_u_one_sided(base_cells[wi], remed_cells[wi]);
        else
            mw["p"] = nullptr;
        out["mannwhitney"].push_back(std::move(mw));
    }

    write_json(out, out_path);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrieval-enhanced event-stream prediction"};
    app.require_subcommand(1);

    std::string config_path, cohort_path, out_path, model_path, log_path, mode, code, cache_flag, windows;
    uint64_t seed = 0;
    bool have_seed = false;
    int baseline = 0, seeds = 3;
    std::string enc_kind = "hash";
    bool lr_grid = false, per_class_weighted = false;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "root seed; overrides the config seed")
            ->each([&](const std::string&) { have_seed = true; });
    };

    auto* gen = app.add_subcommand("generate", "generate a synthetic cohort file");
    gen->add_option("--config", config_path, "run config JSON")->required();
    gen->add_option("--out", out_path, "output cohort path")->required();
    add_seed(gen);

    auto* train = app.add_subcommand("train", "train a model on a cohort file");
    train->add_option("--cohort", cohort_path)->required();
    train->add_option("--config", config_path)->required();
    train->add_option("--encoder", enc_kind, "hash|trained")->check(CLI::IsMember({"hash", "trained"}));
    train->add_option("--out-model", model_path)->required();
    train->add_option("--out-log", log_path);
    train->add_option("--baseline", baseline, "train the cached baseline with this capacity");
    train->add_option("--cache", cache_flag, "vector cache path (default <cohort>.cache)");
    train->add_flag("--lr-grid", lr_grid, "grid-search the learning rate from 1e-6 to 1e-3");
    add_seed(train);

    auto* eval = app.add_subcommand("eval", "P-Path-only evaluation on the test split");
    eval->add_option("--cohort", cohort_path)->required();
    eval->add_option("--model", model_path)->required();
    eval->add_option("--out", out_path)->required();
    eval->add_option("--cache", cache_flag);
    eval->add_flag("--per-class-weighted", per_class_weighted,
                   "support-weighted per-class averaging instead of pooled pairs");

    auto* analyze = app.add_subcommand("analyze", "retrieval analyses as CSV");
    analyze->add_option("--model", model_path)->required();
    analyze->add_option("--cohort", cohort_path)->required();
    analyze->add_option("--mode", mode, "freq|profile")->required();
    analyze->add_option("--code", code, "code for --mode profile");
    analyze->add_option("--out", out_path)->required();
    analyze->add_option("--cache", cache_flag);

    auto* sweep = app.add_subcommand("sweep", "observation-window sweep");
    sweep->add_option("--cohort", cohort_path)->required();
    sweep->add_option("--config", config_path)->required();
    sweep->add_option("--windows", windows, "comma list of minutes or 'unlimited'")->required();
    sweep->add_option("--seeds", seeds);
    sweep->add_option("--out", out_path)->required();
    sweep->add_option("--cache", cache_flag);
    add_seed(sweep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(config_path, out_path, seed, have_seed);
        if (train->parsed())
            return cmd_train(cohort_path, config_path, enc_kind, model_path, log_path, baseline, cache_flag,
                             seed, have_seed, lr_grid);
        if (eval->parsed()) return cmd_eval(cohort_path, model_path, out_path, cache_flag, per_class_weighted);
        if (analyze->parsed()) return cmd_analyze(model_path, cohort_path, mode, code, out_path, cache_flag);
        if (sweep->parsed())
            return cmd_sweep(cohort_path, config_path, windows, seeds, out_path, cache_flag, seed, have_seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const trainer::TrainDivergence& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 3;
    } catch (const ArtifactMismatch& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return 4;
    } catch (const events::CohortError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
