#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "remed/adam.hpp"
#include "remed/graph.hpp"
#include "remed/rng.hpp"

using remed::Rng;
using namespace remed::nd;

namespace {

HostTensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    auto t = HostTensor<double>::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("matmul identity") {
    Graph<float> g;
    auto a = g.constant({2, 2}, std::vector<float>{1, 2, 3, 4});
    auto i2 = g.constant({2, 2}, std::vector<float>{1, 0, 0, 1});
    auto c = g.matmul(a, i2);
    auto v = g.value(c);
    CHECK(std::vector<float>(v.begin(), v.end()) == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("matmul transpose flags against manual products") {
    Rng rng(7);
    Graph<double> g;
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    // A^T * B: (4,3)x(3,4) -> (4,4)
    auto id = g.matmul(g.constant(a.shape, a.data), g.constant(b.shape, b.data), true, false);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double want = 0;
            for (int p = 0; p < 3; ++p) want += a.data[size_t(p * 4 + i)] * b.data[size_t(p * 4 + j)];
            CHECK(g.value(id)[size_t(i * 4 + j)] == doctest::Approx(want).epsilon(1e-12));
        }
    // A * B^T: (3,4)x(4,3) -> (3,3)
    auto id2 = g.matmul(g.constant(a.shape, a.data), g.constant(b.shape, b.data), false, true);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double want = 0;
            for (int p = 0; p < 4; ++p) want += a.data[size_t(i * 4 + p)] * b.data[size_t(j * 4 + p)];
            CHECK(g.value(id2)[size_t(i * 3 + j)] == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("softmax values") {
    Graph<float> g;
    auto sym = g.softmax(g.constant({2}, std::vector<float>{0, 0}), 1);
    CHECK(g.value(sym)[0] == doctest::Approx(0.5));
    CHECK(g.value(sym)[1] == doctest::Approx(0.5));

    // independent high-precision evaluation of exp/normalize
    long double e1 = expl(1.0L), e2 = expl(2.0L), e3 = expl(3.0L);
    long double z = e1 + e2 + e3;
    double want[3] = {double(e1 / z), double(e2 / z), double(e3 / z)};
    CHECK(want[0] == doctest::Approx(0.0900).epsilon(1e-2));

    auto sm = g.softmax(g.constant({3}, std::vector<float>{1, 2, 3}), 1);
    for (int i = 0; i < 3; ++i) CHECK(double(g.value(sm)[size_t(i)]) == doctest::Approx(want[i]).epsilon(1e-4));
    CHECK(double(g.value(sm)[0]) == doctest::Approx(0.0900).epsilon(1e-2));
    CHECK(double(g.value(sm)[1]) == doctest::Approx(0.2447).epsilon(1e-2));
    CHECK(double(g.value(sm)[2]) == doctest::Approx(0.6652).epsilon(1e-2));
}

TEST_CASE("sum of squares gradient is analytic") {
    Graph<double> g;
    auto x = g.leaf({1}, std::vector<double>{3.0}, true);
    auto root = g.sum(g.mul(x, x));
    g.backward(root);
    CHECK(g.grad(x)[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("disconnected leaves get exact zero") {
    Graph<double> g;
    auto x = g.leaf({3}, std::vector<double>{1, 2, 3}, true);
    auto c = g.leaf({2}, std::vector<double>{5, 6}, true);
    auto root = g.sum(g.mul(x, x));
    g.backward(root);
    for (double v : g.grad(c)) CHECK(v == 0.0);
    CHECK(g.grad(x)[1] == doctest::Approx(4.0));
}

TEST_CASE("backward is deterministic bit for bit") {
    auto run = [](std::vector<double>& out) {
        Rng rng(42);
        Graph<double> g;
        auto x = g.leaf(random_tensor({4, 5}, rng), true);
        auto w = g.leaf(random_tensor({5, 3}, rng), true);
        auto root = g.mean(g.gelu(g.matmul(g.layernorm(x), w)));
        g.backward(root);
        auto gx = g.grad(x);
        auto gw = g.grad(w);
        out.assign(gx.begin(), gx.end());
        out.insert(out.end(), gw.begin(), gw.end());
    };
    std::vector<double> a, b;
    run(a);
    run(b);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite forward output is an error") {
    Graph<float> g;
    auto x = g.constant({2}, std::vector<float>{-1.0f, 2.0f});
    CHECK_THROWS_AS(g.log(x), GraphError);
}

TEST_CASE("shape mismatches are errors") {
    Graph<float> g;
    auto a = g.constant({2, 3}, std::vector<float>(6, 1.f));
    auto b = g.constant({2, 3}, std::vector<float>(6, 1.f));
    CHECK_THROWS_AS(g.matmul(a, b), GraphError);
    CHECK_THROWS_AS(g.add(a, g.constant({3, 1}, std::vector<float>(3, 1.f))), GraphError);
    CHECK_THROWS_AS(g.backward(a), GraphError);  // non-scalar root
}

TEST_CASE("row and column broadcast for add/mul") {
    Graph<double> g;
    auto a = g.constant({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    auto row = g.constant({1, 3}, std::vector<double>{10, 20, 30});
    auto col = g.constant({2, 1}, std::vector<double>{100, 200});
    auto r = g.add(a, row);
    auto c = g.mul(a, col);
    CHECK(g.value(r)[4] == 25.0);
    CHECK(g.value(c)[5] == 1200.0);
}

TEST_CASE("per-op gradients match central finite differences") {
    // every differentiable op, randomized over seeds; the acceptance suite
    // runs the >=100-seed sweep, this is the fast development battery
    const double step = 1e-5;
    const double tol = 1e-4;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        HostTensor<double> x = random_tensor({3, 4}, rng);
        HostTensor<double> w = random_tensor({4, 2}, rng);
        HostTensor<double> m = random_tensor({3, 4}, rng);
        HostTensor<double> row = random_tensor({1, 4}, rng);
        HostTensor<double> col = random_tensor({3, 1}, rng);
        HostTensor<double> pos = random_tensor({3, 4}, rng, 0.5, 2.0);
        HostTensor<double> away = random_tensor({3, 4}, rng);
        for (auto& v : away.data) v += v >= 0 ? 0.2 : -0.2;  // keep relu off its kink

        auto chk = [&](const char* name, auto&& build, const HostTensor<double>& x0) {
            double err = grad_check(build, x0, step);
            INFO(name << " seed " << seed);
            CHECK(err < tol);
        };
        chk("matmul", [&](Graph<double>& g, auto xid) {
            return g.sum(g.matmul(xid, g.constant(w.shape, w.data)));
        }, x);
        chk("matmul_t", [&](Graph<double>& g, auto xid) {
            return g.sum(g.matmul(g.constant(w.shape, w.data), xid, true, true));
        }, x);
        chk("add_row", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(g.add(xid, g.constant(row.shape, row.data)), g.constant(m.shape, m.data)));
        }, x);
        chk("mul_col", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(xid, g.constant(col.shape, col.data)));
        }, x);
        chk("concat0", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(g.concat(xid, g.constant(m.shape, m.data), 0),
                               g.constant({6, 4}, std::vector<double>(24, 0.5))));
        }, x);
        chk("concat1", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(g.concat(xid, g.constant(m.shape, m.data), 1),
                               g.constant({3, 8}, std::vector<double>(24, 0.5))));
        }, x);
        chk("gelu", [&](Graph<double>& g, auto xid) { return g.sum(g.gelu(xid)); }, x);
        chk("relu", [&](Graph<double>& g, auto xid) { return g.sum(g.relu(xid)); }, away);
        chk("sigmoid", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(g.sigmoid(xid), g.constant(m.shape, m.data)));
        }, x);
        chk("softmax1", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(g.softmax(xid, 1), g.constant(m.shape, m.data)));
        }, x);
        chk("softmax0", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(g.softmax(xid, 0), g.constant(m.shape, m.data)));
        }, x);
        chk("layernorm", [&](Graph<double>& g, auto xid) {
            return g.sum(g.mul(g.layernorm(xid), g.constant(m.shape, m.data)));
        }, x);
        chk("log", [&](Graph<double>& g, auto xid) { return g.sum(g.log(xid)); }, pos);
        chk("rsqrt", [&](Graph<double>& g, auto xid) { return g.sum(g.rsqrt(xid)); }, pos);
        chk("mean", [&](Graph<double>& g, auto xid) { return g.mean(g.mul(xid, xid)); }, x);
        chk("scale", [&](Graph<double>& g, auto xid) { return g.sum(g.scale(xid, 1.7)); }, x);
        chk("embed", [&](Graph<double>& g, auto xid) {
            std::vector<int> ids{2, 0, 2, 1};
            return g.sum(g.mul(g.embed_lookup(xid, ids), g.constant({4, 4}, std::vector<double>(16, 0.3))));
        }, x);
    }
}

TEST_CASE("grad_check on a quadratic is near exact") {
    auto build = [](Graph<double>& g, Graph<double>::Id x) { return g.sum(g.mul(x, x)); };
    double err = grad_check(build, HostTensor<double>({1}, {3.0}), 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check on BCE(sigmoid(w.v)) against finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        HostTensor<double> w = random_tensor({1, 6}, rng);
        HostTensor<double> v = random_tensor({1, 6}, rng);
        double y = rng.uniform() < 0.5 ? 0.0 : 1.0;
        auto build = [&](Graph<double>& g, Graph<double>::Id wid) {
            auto p = g.sigmoid(g.matmul(wid, g.constant(v.shape, v.data), false, true));
            auto ps = g.add(g.scale(p, 1.0 - 2e-9), g.full({1, 1}, 1e-9));
            auto one_minus = g.add(g.full({1, 1}, 1.0), g.scale(ps, -1.0));
            if (y == 1.0) return g.scale(g.sum(g.log(ps)), -1.0);
            return g.scale(g.sum(g.log(one_minus)), -1.0);
        };
        CHECK(grad_check(build, w, 1e-5) < 1e-4);
    }
}

TEST_CASE("adam converges on a quadratic bowl") {
    HostTensor<float> x({1}, {10.0f});
    Adam<float> adam;
    std::vector<HostTensor<float>*> params{&x};
    for (int i = 0; i < 2000; ++i) {
        std::vector<std::vector<float>> grads{{2.0f * (x.data[0] - 3.0f)}};
        adam.step(params, grads, 0.05);
    }
    CHECK(x.data[0] == doctest::Approx(3.0f).epsilon(1e-3));
}

TEST_CASE("glorot init stays inside the fan bound and is seeded") {
    Rng a(5), b(5);
    auto t1 = HostTensor<double>::glorot(30, 10, a);
    auto t2 = HostTensor<double>::glorot(30, 10, b);
    CHECK(t1.data == t2.data);
    double bound = std::sqrt(6.0 / 40.0);
    for (double v : t1.data) CHECK(std::abs(v) <= bound);
}
