#include "remed/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace remed::stats {

std::optional<double> auroc(std::span<const ScoredPair> pairs) {
    size_t n = pairs.size();
    long pos = 0;
    for (const auto& p : pairs) pos += p.label ? 1 : 0;
    long neg = long(n) - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return pairs[a].score < pairs[b].score; });

    // midranks over tied score groups
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && pairs[order[j]].score == pairs[order[i]].score) ++j;
        double midrank = 0.5 * double(i + 1 + j);  // average of ranks i+1..j
        for (size_t t = i; t < j; ++t)
            if (pairs[order[t]].label) rank_sum_pos += midrank;
        i = j;
    }
    double u = rank_sum_pos - double(pos) * double(pos + 1) / 2.0;
    return u / (double(pos) * double(neg));
}

void expand_pairs(std::span<const double> probs, int label, TaskKindLite kind,
                  std::vector<ScoredPair>& out) {
    switch (kind) {
        case TaskKindLite::Binary:
            out.push_back({probs[0], label});
            break;
        case TaskKindLite::Multiclass:
            for (size_t c = 0; c < probs.size(); ++c)
                out.push_back({probs[c], int(c) == label ? 1 : 0});
            break;
        case TaskKindLite::Multilabel:
            for (size_t c = 0; c < probs.size(); ++c)
                out.push_back({probs[c], (label >> c) & 1});
            break;
    }
}

std::optional<double> micro_auroc_pooled(std::span<const std::vector<ScoredPair>> per_task_pairs) {
    std::vector<ScoredPair> pool;
    for (const auto& v : per_task_pairs) pool.insert(pool.end(), v.begin(), v.end());
    if (pool.empty()) return std::nullopt;
    return auroc(pool);
}

std::optional<double> micro_auroc_weighted(std::span<const std::vector<ScoredPair>> per_task_pairs) {
    double weighted = 0;
    long support = 0;
    for (const auto& v : per_task_pairs) {
        auto a = auroc(v);
        if (!a) continue;
        weighted += *a * double(v.size());
        support += long(v.size());
    }
    if (support == 0) return std::nullopt;
    return weighted / double(support);
}

double normal_cdf(double z) {
    return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

namespace {

// U statistic for H1 "b greater": #{b_j > a_i} + 0.5 * #{b_j == a_i}
double u_greater(std::span<const double> a, std::span<const double> b) {
    double u = 0;
    for (double x : a)
        for (double y : b) {
            if (y > x)
                u += 1.0;
            else if (y == x)
                u += 0.5;
        }
    return u;
}

double mw_exact(std::span<const double> a, std::span<const double> b) {
    std::vector<double> comb(a.begin(), a.end());
    comb.insert(comb.end(), b.begin(), b.end());
    size_t n = comb.size();
    size_t na = a.size();
    double u_obs = u_greater(a, b);

    // walk all C(n, na) assignments of the combined multiset to group a
    std::vector<size_t> idx(na);
    std::iota(idx.begin(), idx.end(), size_t(0));
    long total = 0, ge = 0;
    std::vector<double> aa(na), bb(n - na);
    while (true) {
        aa.clear();
        bb.clear();
        size_t p = 0;
        for (size_t i = 0; i < n; ++i) {
            if (p < na && idx[p] == i) {
                aa.push_back(comb[i]);
                ++p;
            } else {
                bb.push_back(comb[i]);
            }
        }
        ++total;
        if (u_greater(aa, bb) >= u_obs - 1e-12) ++ge;

        // next combination
        size_t k = na;
        while (k > 0 && idx[k - 1] == n - na + k - 1) --k;
        if (k == 0) break;
        ++idx[k - 1];
        for (size_t j = k; j < na; ++j) idx[j] = idx[j - 1] + 1;
    }
    return double(ge) / double(total);
}

double mw_normal_approx(std::span<const double> a, std::span<const double> b) {
    double na = double(a.size()), nb = double(b.size());
    double n = na + nb;
    double u = u_greater(a, b);
    double mu = na * nb / 2.0;

    std::map<double, long> counts;
    for (double x : a) counts[x]++;
    for (double x : b) counts[x]++;
    double tie = 0;
    for (const auto& [v, t] : counts) tie += double(t) * double(t) * double(t) - double(t);
    double var = na * nb / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    if (var <= 0) return u > mu ? 0.0 : 1.0;  // fully tied data
    double z = (u - mu - 0.5) / std::sqrt(var);
    return 1.0 - normal_cdf(z);
}

}  // namespace

double mann_whitney_u_one_sided(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney: samples must be nonempty");
    if (a.size() + b.size() <= 12) return mw_exact(a, b);
    return mw_normal_approx(a, b);
}

namespace {

// concordant minus discordant and tie counts for tau-b
struct TauCounts {
    double c{0}, d{0}, tx{0}, ty{0};
};

TauCounts tau_counts(std::span<const double> x, std::span<const double> y) {
    TauCounts tc;
    size_t n = x.size();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double dx = x[i] - x[j], dy = y[i] - y[j];
            if (dx == 0 && dy == 0) continue;
            if (dx == 0) {
                tc.tx += 1;
            } else if (dy == 0) {
                tc.ty += 1;
            } else if ((dx > 0) == (dy > 0)) {
                tc.c += 1;
            } else {
                tc.d += 1;
            }
        }
    return tc;
}

double tau_b_from(const TauCounts& tc) {
    double denom = std::sqrt((tc.c + tc.d + tc.tx) * (tc.c + tc.d + tc.ty));
    if (denom == 0) return 0.0;
    return (tc.c - tc.d) / denom;
}

}  // namespace

KendallResult kendall_tau(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("kendall_tau: length mismatch");
    size_t n = x.size();
    if (n < 3) throw std::invalid_argument("kendall_tau: needs length >= 3");

    TauCounts tc = tau_counts(x, y);
    double tau = tau_b_from(tc);

    double p;
    if (n <= 8) {
        // exact permutation distribution of tau under the null
        std::vector<double> perm(y.begin(), y.end());
        std::sort(perm.begin(), perm.end());
        long total = 0, ge = 0;
        do {
            ++total;
            if (tau_b_from(tau_counts(x, perm)) >= tau - 1e-12) ++ge;
        } while (std::next_permutation(perm.begin(), perm.end()));
        // next_permutation over the sorted multiset covers each distinct
        // permutation once, which is exactly the null distribution with ties
        p = double(ge) / double(total);
    } else {
        // tie-aware variance of C-D (Kendall), one-sided upper tail
        auto tie_sums = [](std::span<const double> v) {
            std::map<double, long> counts;
            for (double e : v) counts[e]++;
            double t1 = 0, t2 = 0, t3 = 0;
            for (const auto& [val, t] : counts) {
                double td = double(t);
                t1 += td * (td - 1.0) * (2.0 * td + 5.0);
                t2 += td * (td - 1.0);
                t3 += td * (td - 1.0) * (td - 2.0);
            }
            return std::array<double, 3>{t1, t2, t3};
        };
        double nn = double(n);
        auto [xt1, xt2, xt3] = tie_sums(x);
        auto [yt1, yt2, yt3] = tie_sums(y);
        double v0 = nn * (nn - 1.0) * (2.0 * nn + 5.0);
        double var = (v0 - xt1 - yt1) / 18.0 + xt2 * yt2 / (2.0 * nn * (nn - 1.0)) +
                     xt3 * yt3 / (9.0 * nn * (nn - 1.0) * (nn - 2.0));
        if (var <= 0) return {tau, 0.5};
        double z = (tc.c - tc.d) / std::sqrt(var);
        p = 1.0 - normal_cdf(z);
    }
    return {tau, p};
}

}  // namespace remed::stats
