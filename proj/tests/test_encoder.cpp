#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "remed/encoder.hpp"
#include "remed/synthcohort.hpp"

using namespace remed;
using namespace remed::encoder;
namespace fs = std::filesystem;

namespace {

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

TEST_CASE("tokenizer lowercases and splits on punctuation") {
    auto t = tokenize("Lab measure, Value 3.7 (K/uL)");
    CHECK(t == std::vector<std::string>{"lab", "measure", "value", "3", "7", "k", "ul"});
    CHECK(tokenize("...").empty());
}

TEST_CASE("hash encoding is deterministic and unit norm") {
    HashEncoder enc({64, 4096, 7});
    auto a = enc.encode("white blood cells value 3.7");
    auto b = enc.encode("white blood cells value 3.7");
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    double norm = 0;
    for (float v : a) norm += double(v) * double(v);
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("shared tokens dominate the cosine") {
    HashEncoder enc({64, 4096, 7});
    auto near1 = enc.encode("white blood cells value 3.7");
    auto near2 = enc.encode("white blood cells value 3.8");
    auto far = enc.encode("heart rate 80");
    CHECK(cosine(near1, near2) > cosine(near1, far));
}

TEST_CASE("nonempty text never maps to the zero vector") {
    // brute-force search for a two-token text whose buckets cancel
    HashEncoderConfig cfg{8, 8, 3};
    HashEncoder enc(cfg);
    bool found_collision = false;
    for (int i = 0; i < 4000 && !found_collision; ++i) {
        for (int j = i + 1; j < 4000; ++j) {
            std::string ta = "t" + std::to_string(i);
            std::string tb = "t" + std::to_string(j);
            uint64_t ha = fnv1a64(ta), hb = fnv1a64(tb);
            if (ha % 8 == hb % 8 && (ha >> 63) != (hb >> 63)) {
                auto v = enc.encode(ta + " " + tb);
                double norm = 0;
                for (float x : v) norm += double(x) * double(x);
                CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
                found_collision = true;
                break;
            }
        }
    }
    CHECK(found_collision);
    CHECK_THROWS(enc.encode("..."));  // no tokens at all is an error
}

TEST_CASE("config invariants") {
    CHECK_THROWS(HashEncoder({4, 4096, 1}));  // dim too small
    CHECK_THROWS(HashEncoder({64, 32, 1}));   // buckets < dim
}

TEST_CASE("cohort cache is bit-exact across rebuild and file round-trip") {
    synth::GenConfig cfg;
    cfg.n_patients = 6;
    cfg.events_min = 10;
    cfg.events_max = 20;
    cfg.n_noise_codes = 12;
    cfg.prediction_time = 500;
    cfg.seed = 3;
    cfg = synth::make_far_signal_config(cfg, 2);
    auto cohort = synth::generate(cfg);

    AnyEncoder enc{HashEncoder({64, 4096, 7})};
    VectorCache c1 = encode_cohort(cohort, enc);
    VectorCache c2 = encode_cohort(cohort, enc);
    REQUIRE(c1.data.size() == c2.data.size());
    CHECK(std::memcmp(c1.data.data(), c2.data.data(), c1.data.size() * sizeof(float)) == 0);

    // cache size equals total event count
    int64_t total = 0;
    for (const auto& s : cohort.samples) total += int64_t(s.events.size());
    CHECK(c1.rows() == total);

    auto path = (fs::temp_directory_path() / "remed_test_cache.bin").string();
    c1.save(path);
    VectorCache back = VectorCache::load(path);
    CHECK(back.dim == c1.dim);
    CHECK(back.encoder_fingerprint == c1.encoder_fingerprint);
    CHECK(back.offsets == c1.offsets);
    REQUIRE(back.data.size() == c1.data.size());
    CHECK(std::memcmp(back.data.data(), c1.data.data(), c1.data.size() * sizeof(float)) == 0);

    // byte-identical file on re-save
    auto path2 = (fs::temp_directory_path() / "remed_test_cache2.bin").string();
    back.save(path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    fs::remove(path);
    fs::remove(path2);

    // cache row lookup is positional
    CHECK(c1.row(1, 0) == c1.data.data() + c1.offsets[1] * c1.dim);

    // different config -> different fingerprint
    AnyEncoder enc2{HashEncoder({64, 4096, 8})};
    CHECK(enc2.fingerprint() != enc.fingerprint());
}

TEST_CASE("trained encoder is deterministic after freezing" * doctest::timeout(120)) {
    synth::GenConfig cfg;
    cfg.n_patients = 24;
    cfg.events_min = 12;
    cfg.events_max = 24;
    cfg.n_noise_codes = 10;
    cfg.prediction_time = 500;
    cfg.seed = 5;
    cfg = synth::make_recency_value_config(cfg);
    auto cohort = synth::generate(cfg);

    TrainedEncoderConfig tcfg;
    tcfg.dim = 16;
    tcfg.vocab = 128;
    tcfg.max_tokens = 12;
    tcfg.heads = 2;
    tcfg.ffn = 32;
    tcfg.events_per_step = 8;
    tcfg.batch_size = 2;
    tcfg.steps = 10;
    tcfg.seed = 9;
    TrainedEncoder enc = TrainedEncoder::train(cohort, tcfg);

    auto a = enc.encode("synthetic signal assay sval reading, Value 12.0, Unit u");
    auto b = enc.encode("synthetic signal assay sval reading, Value 12.0, Unit u");
    CHECK(a == b);
    CHECK(int(a.size()) == 16);

    TrainedEncoder enc2 = TrainedEncoder::train(cohort, tcfg);
    CHECK(enc2.fingerprint() == enc.fingerprint());
}
