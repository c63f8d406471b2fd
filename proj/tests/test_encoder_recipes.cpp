// Heavier encoder/scorer recipes: the trained event encoder against the hash
// default, a linear probe on its vectors, and the MLP-vs-cosine scorer
// comparison. These train small models end to end.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "remed/encoder.hpp"
#include "remed/synthcohort.hpp"
#include "remed/trainer.hpp"

using namespace remed;
using events::TaskKind;

namespace {

// Value-sensitive task with mirrored digit values: "2.7" and "7.2" land in
// different buckets but share the token multiset, so an order-blind encoding
// carries no bucket signal while token positions resolve it exactly.
synth::GenConfig value_sensitive_config() {
    synth::GenConfig cfg;
    cfg.n_patients = 260;
    cfg.events_min = 48;
    cfg.events_max = 96;
    cfg.n_noise_codes = 16;
    cfg.prediction_time = 1000.0;
    cfg.seed = 31;
    synth::SignalSpec spec;
    spec.signal_code = "SVAL";
    spec.task_name = "value_bucket";
    spec.t_lo = 0.5 * cfg.prediction_time;
    spec.t_hi = cfg.prediction_time;
    spec.mechanism = synth::Mechanism::ValueBucketLast;
    spec.bucket_edges = {4.5};
    spec.value_style = synth::ValueStyle::MirroredDigits;
    spec.events_min = 4;
    spec.events_max = 8;
    cfg.signal_specs = {spec};
    return cfg;
}

trainer::EncodedCohort encode_with(const events::Cohort& cohort, const encoder::AnyEncoder& enc) {
    auto cache = encoder::encode_cohort(cohort, enc);
    return trainer::build_encoded(cohort, std::move(cache));
}

double train_and_val(trainer::EncodedCohort& data, retriever::ScorerKind scorer, int k, uint64_t seed) {
    auto views = trainer::split_views(data, {8, 1, 1}, 31);
    retriever::RetrieverConfig rcfg;
    rcfg.dim = data.dim;
    rcfg.hidden = 2 * data.dim;
    rcfg.kind = scorer;
    predictor::PredictorConfig pcfg;
    pcfg.dim = data.dim;
    pcfg.d_model = 32;
    pcfg.layers = 1;
    pcfg.heads = 2;
    pcfg.ffn = 64;
    trainer::TrainConfig tcfg;
    tcfg.learning_rate = 2e-3;
    tcfg.warmup_steps = 30;
    tcfg.batch_size = 8;
    tcfg.k = k;
    tcfg.max_epochs = 14;
    tcfg.patience = 6;
    tcfg.seed = seed;
    auto model = trainer::train(views[0], views[1], tcfg, rcfg, pcfg, data.encoder_fingerprint, nullptr);
    return model.best_val_micro_auroc;
}

}  // namespace

TEST_CASE("linear probe on trained vectors separates signal from noise codes" * doctest::timeout(900)) {
    auto cfg = value_sensitive_config();
    cfg.n_patients = 120;
    auto cohort = synth::generate(cfg);

    encoder::TrainedEncoderConfig tcfg;
    tcfg.dim = 32;
    tcfg.vocab = 512;
    tcfg.max_tokens = 16;
    tcfg.heads = 2;
    tcfg.ffn = 64;
    tcfg.events_per_step = 24;
    tcfg.batch_size = 4;
    tcfg.steps = 150;
    tcfg.learning_rate = 2e-3;
    tcfg.seed = 3;
    auto enc = encoder::TrainedEncoder::train(cohort, tcfg);

    // balanced event sample: one signal + one noise event per patient sample
    std::vector<std::vector<float>> xs;
    std::vector<int> ys;
    for (const auto& s : cohort.samples) {
        const events::MedicalEvent* sig = nullptr;
        const events::MedicalEvent* noise = nullptr;
        for (const auto& e : s.events) {
            if (e.code == "SVAL" && !sig) sig = &e;
            if (e.code != "SVAL" && !noise) noise = &e;
        }
        if (sig) {
            xs.push_back(enc.encode(events::textualize(*sig)));
            ys.push_back(1);
        }
        if (noise) {
            xs.push_back(enc.encode(events::textualize(*noise)));
            ys.push_back(0);
        }
    }
    REQUIRE(xs.size() > 100);

    // logistic probe, plain gradient descent; train on the first 70%, test on the rest
    size_t split = xs.size() * 7 / 10;
    std::vector<double> w(size_t(tcfg.dim), 0.0);
    double b = 0;
    for (int it = 0; it < 4000; ++it) {
        std::vector<double> gw(w.size(), 0.0);
        double gb = 0;
        for (size_t i = 0; i < split; ++i) {
            double z = b;
            for (size_t j = 0; j < w.size(); ++j) z += w[j] * double(xs[i][j]);
            double p = 1.0 / (1.0 + std::exp(-z));
            double d = p - double(ys[i]);
            for (size_t j = 0; j < w.size(); ++j) gw[j] += d * double(xs[i][j]);
            gb += d;
        }
        for (size_t j = 0; j < w.size(); ++j) w[j] -= 0.5 / double(split) * gw[j];
        b -= 0.5 / double(split) * gb;
    }
    long correct = 0;
    for (size_t i = split; i < xs.size(); ++i) {
        double z = b;
        for (size_t j = 0; j < w.size(); ++j) z += w[j] * double(xs[i][j]);
        correct += ((z > 0) == (ys[i] == 1)) ? 1 : 0;
    }
    double acc = double(correct) / double(xs.size() - split);
    CHECK(acc > 0.9);
}

TEST_CASE("trained encoder vectors beat hash vectors on the value-sensitive task" *
          doctest::timeout(1800)) {
    auto cfg = value_sensitive_config();
    auto cohort = synth::generate(cfg);

    // hash encoding: bag of digit tokens, no positions
    encoder::AnyEncoder hash_enc{encoder::HashEncoder({32, 2048, 7})};
    auto hash_data = encode_with(cohort, hash_enc);
    double hash_val = train_and_val(hash_data, retriever::ScorerKind::Mlp, 16, 5);

    // trained encoder: fitted on the train patients only, then frozen
    auto views_split = events::split_cohort(cohort, {8, 1, 1}, 31);
    encoder::TrainedEncoderConfig tcfg;
    tcfg.dim = 32;
    tcfg.vocab = 512;
    tcfg.max_tokens = 16;
    tcfg.heads = 2;
    tcfg.ffn = 64;
    tcfg.events_per_step = 24;
    tcfg.batch_size = 4;
    tcfg.steps = 600;
    tcfg.learning_rate = 2e-3;
    tcfg.seed = 3;
    auto trained = encoder::TrainedEncoder::train(std::get<0>(views_split), tcfg);
    encoder::AnyEncoder trained_enc{std::move(trained)};
    auto trained_data = encode_with(cohort, trained_enc);
    double trained_val = train_and_val(trained_data, retriever::ScorerKind::Mlp, 16, 5);

    INFO("hash " << hash_val << " vs trained " << trained_val);
    CHECK(trained_val > hash_val);
}

TEST_CASE("MLP scorer beats the time-blind cosine scorer on the recency task" * doctest::timeout(1800)) {
    synth::GenConfig cfg;
    cfg.n_patients = 260;
    cfg.events_min = 64;
    cfg.events_max = 128;
    cfg.n_noise_codes = 16;
    cfg.prediction_time = 1000.0;
    cfg.seed = 33;
    cfg = synth::make_recency_value_config(cfg);
    // plant far more signal events than the retrieval budget: a time-blind
    // scorer keeps the label-critical latest event only by chance
    cfg.signal_specs[0].events_min = 24;
    cfg.signal_specs[0].events_max = 48;
    auto cohort = synth::generate(cfg);

    encoder::AnyEncoder enc{encoder::HashEncoder({32, 2048, 7})};
    auto data_a = encode_with(cohort, enc);
    auto data_b = encode_with(cohort, enc);
    double mlp_val = train_and_val(data_a, retriever::ScorerKind::Mlp, 8, 9);
    double cos_val = train_and_val(data_b, retriever::ScorerKind::Cosine, 8, 9);
    INFO("mlp " << mlp_val << " vs cosine " << cos_val);
    CHECK(mlp_val > cos_val);
}
