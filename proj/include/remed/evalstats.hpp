#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace remed::stats {

struct ScoredPair {
    double score;
    int label;  // 0/1
};

// rank-based (Mann-Whitney) AUROC, ties count 1/2; needs both classes present
std::optional<double> auroc(std::span<const ScoredPair> pairs);

// one-vs-rest expansion of one task's probabilities against its label
enum class TaskKindLite { Binary, Multiclass, Multilabel };
void expand_pairs(std::span<const double> probs, int label, TaskKindLite kind,
                  std::vector<ScoredPair>& out);

// pooled micro-average: all one-vs-rest pairs across tasks and classes pooled
// into a single AUROC. The per-class support-weighted alternative is exposed
// behind a flag.
std::optional<double> micro_auroc_pooled(std::span<const std::vector<ScoredPair>> per_task_pairs);
std::optional<double> micro_auroc_weighted(std::span<const std::vector<ScoredPair>> per_task_pairs);

double normal_cdf(double z);

// one-sided Mann-Whitney U test of H1: b stochastically greater than a.
// Exact enumeration when |a|+|b| <= 12, otherwise normal approximation with
// tie correction and continuity correction.
double mann_whitney_u_one_sided(std::span<const double> a, std::span<const double> b);

// Kendall tau-b with tie handling. One-sided p (H1: positive association):
// exact permutation enumeration for n <= 8, normal approximation otherwise.
struct KendallResult {
    double tau;
    double p_value;
};
KendallResult kendall_tau(std::span<const double> x, std::span<const double> y);

}  // namespace remed::stats
