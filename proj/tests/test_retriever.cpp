#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "remed/retriever.hpp"

using namespace remed;
using namespace remed::retriever;

namespace {

// full-sort selection with the stated tie rule, used as the top_k oracle
template <typename S>
std::vector<int64_t> topk_oracle(const std::vector<S>& scores, const std::vector<S>& times, int k) {
    std::vector<TopKEntry<S>> all;
    for (size_t i = 0; i < scores.size(); ++i) all.push_back({scores[i], times[i], int64_t(i)});
    std::sort(all.begin(), all.end(), topk_better<S>);
    all.resize(std::min<size_t>(all.size(), size_t(k)));
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.t != b.t) return a.t < b.t;
        return a.idx < b.idx;
    });
    std::vector<int64_t> idx;
    for (const auto& e : all) idx.push_back(e.idx);
    return idx;
}

EventSource<float> source_from(const std::vector<float>& vecs, const std::vector<float>& times, int dim) {
    EventSource<float> src;
    src.count = int64_t(times.size());
    src.fill = [&vecs, &times, dim](int64_t start, int n, float* v, float* t) {
        std::copy_n(vecs.data() + start * dim, int64_t(n) * dim, v);
        std::copy_n(times.data() + start, n, t);
    };
    return src;
}

}  // namespace

TEST_CASE("time features hit their boundary values") {
    float out[9];
    time_features(99.9999f, 100.0f, 9, out);
    CHECK(out[0] == doctest::Approx(0.0).epsilon(1e-4));
    time_features(0.0f, 100.0f, 9, out);
    CHECK(out[0] == 1.0f);

    float out2[9];
    time_features(40.0f, 100.0f, 9, out);
    time_features(40.0f, 100.0f, 9, out2);
    CHECK(std::memcmp(out, out2, sizeof out) == 0);

    CHECK_THROWS(time_features(100.0f, 100.0f, 9, out));
    CHECK_THROWS(time_features(120.0f, 100.0f, 9, out));
}

TEST_CASE("zero-initialized scorer gives one shared score") {
    RetrieverConfig cfg;
    cfg.dim = 8;
    cfg.hidden = 16;
    RetrieverParams<float> p;
    p.kind = ScorerKind::Mlp;
    p.w1 = nd::HostTensor<float>::zeros({17, 16});
    p.b1 = nd::HostTensor<float>::zeros({1, 16});
    p.w2 = nd::HostTensor<float>::zeros({16, 16});
    p.b2 = nd::HostTensor<float>::zeros({1, 16});
    p.w3 = nd::HostTensor<float>::zeros({16, 1});
    p.b3 = nd::HostTensor<float>({1, 1}, {0.37f});

    Rng rng(3);
    std::vector<float> vecs(20 * 8), times(20);
    for (auto& v : vecs) v = float(rng.uniform(-1, 1));
    for (size_t i = 0; i < times.size(); ++i) times[i] = float(i);

    ScoreWorkspace<float> ws;
    auto src = source_from(vecs, times, 8);
    auto scores = score_all(cfg, p, src, 100.0f, ws);
    for (float s : scores) CHECK(s == 0.37f);
}

TEST_CASE("scoring is an elementwise map: permuting inputs permutes outputs") {
    RetrieverConfig cfg;
    cfg.dim = 8;
    cfg.hidden = 16;
    auto p = RetrieverParams<float>::init(cfg, Rng(5));
    Rng rng(6);
    int n = 50;
    std::vector<float> vecs(size_t(n) * 8), times(static_cast<size_t>(n));
    for (auto& v : vecs) v = float(rng.uniform(-1, 1));
    for (int i = 0; i < n; ++i) times[i] = float(rng.uniform(0, 99));

    ScoreWorkspace<float> ws;
    auto src = source_from(vecs, times, 8);
    auto base = score_all(cfg, p, src, 100.0f, ws);

    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng(9).shuffle(perm);
    std::vector<float> pv(size_t(n) * 8), pt(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::copy_n(vecs.data() + int64_t(perm[size_t(i)]) * 8, 8, pv.data() + int64_t(i) * 8);
        pt[size_t(i)] = times[size_t(perm[size_t(i)])];
    }
    auto src2 = source_from(pv, pt, 8);
    auto permuted = score_all(cfg, p, src2, 100.0f, ws);
    for (int i = 0; i < n; ++i) CHECK(permuted[size_t(i)] == base[size_t(perm[size_t(i)])]);
}

TEST_CASE("chunked scoring equals one pass bit-exactly") {
    RetrieverConfig small;
    small.dim = 16;
    small.hidden = 32;
    small.chunk = 7;  // awkward chunk on purpose
    RetrieverConfig one_pass = small;
    one_pass.chunk = 1 << 20;

    auto p = RetrieverParams<float>::init(small, Rng(1));
    Rng rng(2);
    int n = 103;
    std::vector<float> vecs(size_t(n) * 16), times(static_cast<size_t>(n));
    for (auto& v : vecs) v = float(rng.uniform(-1, 1));
    for (int i = 0; i < n; ++i) times[i] = float(rng.uniform(0, 99));

    ScoreWorkspace<float> ws1, ws2;
    auto src = source_from(vecs, times, 16);
    auto chunked = score_all(small, p, src, 100.0f, ws1);
    auto full = score_all(one_pass, p, src, 100.0f, ws2);
    CHECK(std::memcmp(chunked.data(), full.data(), chunked.size() * sizeof(float)) == 0);
}

TEST_CASE("top_k forced examples") {
    std::vector<float> scores{0.9f, 0.1f, 0.5f};
    std::vector<float> times{1, 2, 3};
    CHECK(top_k<float>(scores, times, 2) == std::vector<int64_t>{0, 2});

    CHECK(top_k<float>(scores, times, 5) == std::vector<int64_t>{0, 1, 2});  // n < k keeps all

    std::vector<float> tied{1, 1, 1};
    std::vector<float> tt{10, 20, 30};
    CHECK(top_k<float>(tied, tt, 2) == std::vector<int64_t>{1, 2});  // recency tie-break

    CHECK_THROWS(top_k<float>(scores, times, 0));
}

TEST_CASE("top_k equals full-sort selection on random vectors with ties") {
    Rng rng(12);
    for (int trial = 0; trial < 300; ++trial) {
        int n = 1 + int(rng.uniform_int(40));
        int k = 1 + int(rng.uniform_int(12));
        std::vector<float> scores(static_cast<size_t>(n)), times(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            // coarse grid forces plenty of score and time ties
            scores[size_t(i)] = float(int(rng.uniform_int(5))) * 0.25f;
            times[size_t(i)] = float(int(rng.uniform_int(8)));
        }
        CHECK(top_k<float>(scores, times, k) == topk_oracle(scores, times, k));
    }
    // all-ties case
    std::vector<float> s(16, 2.5f), t(16, 7.0f);
    CHECK(top_k<float>(s, t, 5) == topk_oracle(s, t, 5));
}

TEST_CASE("top_k is invariant under strictly monotone score transforms") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        int n = 3 + int(rng.uniform_int(30));
        std::vector<double> scores(static_cast<size_t>(n)), times(static_cast<size_t>(n)), mapped(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            scores[size_t(i)] = rng.uniform(-3, 3);
            times[size_t(i)] = double(int(rng.uniform_int(6)));
            mapped[size_t(i)] = std::tanh(scores[size_t(i)]) * 2.0 + 5.0;  // strictly increasing
        }
        CHECK(top_k<double>(scores, times, 7) == top_k<double>(mapped, times, 7));
    }
}

TEST_CASE("normalize_weights examples and shift invariance") {
    auto w = normalize_weights<double>(std::vector<double>{0, 0});
    CHECK(w[0] == doctest::Approx(0.5));
    CHECK(w[1] == doctest::Approx(0.5));

    CHECK(normalize_weights<double>(std::vector<double>{3.7})[0] == 1.0);

    auto w3 = normalize_weights<double>(std::vector<double>{1, 2, 3});
    CHECK(w3[0] == doctest::Approx(0.0900).epsilon(1e-2));
    CHECK(w3[1] == doctest::Approx(0.2447).epsilon(1e-2));
    CHECK(w3[2] == doctest::Approx(0.6652).epsilon(1e-2));
    CHECK(w3[0] + w3[1] + w3[2] == doctest::Approx(1.0).epsilon(1e-12));

    // adding a power of two shifts the max by the same amount: bit-exact
    auto shifted = normalize_weights<double>(std::vector<double>{1 + 8.0, 2 + 8.0, 3 + 8.0});
    for (int i = 0; i < 3; ++i) CHECK(shifted[size_t(i)] == w3[size_t(i)]);
    // arbitrary shifts stay within float noise
    auto shifted2 = normalize_weights<double>(std::vector<double>{1 + 0.3, 2 + 0.3, 3 + 0.3});
    for (int i = 0; i < 3; ++i) CHECK(shifted2[size_t(i)] == doctest::Approx(w3[size_t(i)]).epsilon(1e-9));

    CHECK_THROWS(normalize_weights<double>(std::vector<double>{}));
}

TEST_CASE("cosine scorer hits parallel and orthogonal extremes") {
    RetrieverConfig cfg;
    cfg.dim = 4;
    cfg.kind = ScorerKind::Cosine;
    RetrieverParams<float> p;
    p.kind = ScorerKind::Cosine;
    p.query = nd::HostTensor<float>({1, 4}, {2, 0, 0, 0});

    std::vector<float> vecs{1, 0, 0, 0, 0, 3, 0, 0};
    std::vector<float> times{1, 2};
    ScoreWorkspace<float> ws;
    float out[2];
    score_chunk(cfg, p, vecs.data(), times.data(), 2, 10.0f, ws, out);
    CHECK(out[0] == doctest::Approx(1.0));
    CHECK(out[1] == doctest::Approx(0.0));

    std::vector<float> zero{0, 0, 0, 0};
    CHECK_THROWS(score_chunk(cfg, p, zero.data(), times.data(), 1, 10.0f, ws, out));
}

TEST_CASE("streaming retrieval matches score_all + top_k") {
    RetrieverConfig cfg;
    cfg.dim = 8;
    cfg.hidden = 16;
    cfg.chunk = 11;
    auto p = RetrieverParams<float>::init(cfg, Rng(21));
    Rng rng(22);
    int n = 75;
    std::vector<float> vecs(size_t(n) * 8), times(static_cast<size_t>(n));
    for (auto& v : vecs) v = float(rng.uniform(-1, 1));
    for (int i = 0; i < n; ++i) times[i] = float(rng.uniform(0, 99));

    ScoreWorkspace<float> ws;
    auto src = source_from(vecs, times, 8);
    auto entries = retrieve_topk(cfg, p, src, 100.0f, 9, ws);
    auto scores = score_all(cfg, p, src, 100.0f, ws);
    auto want = top_k<float>(scores, times, 9);
    REQUIRE(entries.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) {
        CHECK(entries[i].idx == want[i]);
        CHECK(entries[i].score == scores[size_t(want[i])]);
    }
}
