#pragma once

#include <span>
#include <vector>

#include "remed/events.hpp"
#include "remed/graph.hpp"
#include "remed/predictor.hpp"

namespace remed::trainer {

using events::Label;
using events::TaskKind;
using events::TaskSpec;
using nd::Graph;

// Multi-task loss over a batch: binary/multilabel terms are binary
// cross-entropy, multiclass terms are negative log-likelihood; each task
// contributes the mean over its present labels and the total is the unweighted
// sum over tasks. Missing labels add no term, so they contribute exactly zero
// loss and zero gradient.
template <typename S>
class LossBuilder {
public:
    LossBuilder(Graph<S>& g, const std::vector<TaskSpec>& tasks) : g_(&g), tasks_(&tasks) {
        sums_.assign(tasks.size(), -1);
        counts_.assign(tasks.size(), 0);
    }

    // outputs: one node per task, shaped (1, head_width); probabilities for
    // the R-Path, logits for the P-Path (converted here)
    void add_sample(std::span<const typename Graph<S>::Id> outputs, std::span<const Label> labels,
                    bool outputs_are_probabilities) {
        const auto& tasks = *tasks_;
        for (size_t t = 0; t < tasks.size(); ++t) {
            if (!labels[t]) continue;
            const TaskSpec& spec = tasks[t];
            auto probs = outputs_are_probabilities ? outputs[t]
                                                   : predictor::to_probabilities(*g_, outputs[t], spec);
            for (S v : g_->value(probs))
                if (v < S(0) || v > S(1))
                    throw nd::GraphError("loss_multitask: probability outside [0,1] for task '" +
                                         spec.name + "'");
            // affine squeeze into [eps, 1-eps] keeps log finite without
            // touching the op set
            auto p = g_->add(g_->scale(probs, S(1) - S(2) * kEps), g_->full({1, spec.head_width()}, kEps));
            int y = *labels[t];
            typename Graph<S>::Id term = -1;
            if (spec.kind == TaskKind::Binary) {
                auto lp = y == 1 ? g_->log(p) : g_->log(one_minus(p));
                term = g_->scale(g_->sum(lp), S(-1));
                counts_[t] += 1;
            } else if (spec.kind == TaskKind::Multiclass) {
                std::vector<S> onehot(size_t(spec.classes), S(0));
                onehot[size_t(y)] = S(1);
                auto oh = g_->constant({1, spec.classes}, onehot);
                term = g_->scale(g_->sum(g_->mul(oh, g_->log(p))), S(-1));
                counts_[t] += 1;
            } else {
                std::vector<S> bits(size_t(spec.classes)), inv(size_t(spec.classes));
                for (int c = 0; c < spec.classes; ++c) {
                    bits[size_t(c)] = (y >> c) & 1 ? S(1) : S(0);
                    inv[size_t(c)] = S(1) - bits[size_t(c)];
                }
                auto yb = g_->constant({1, spec.classes}, bits);
                auto yi = g_->constant({1, spec.classes}, inv);
                auto ce = g_->add(g_->mul(yb, g_->log(p)), g_->mul(yi, g_->log(one_minus(p))));
                term = g_->scale(g_->sum(ce), S(-1));
                counts_[t] += spec.classes;  // every bit is one present label
            }
            sums_[t] = sums_[t] < 0 ? term : g_->add(sums_[t], term);
        }
    }

    typename Graph<S>::Id finalize() {
        typename Graph<S>::Id total = -1;
        for (size_t t = 0; t < sums_.size(); ++t) {
            if (counts_[t] == 0) continue;
            auto task_loss = g_->scale(sums_[t], S(1) / S(counts_[t]));
            total = total < 0 ? task_loss : g_->add(total, task_loss);
        }
        if (total < 0) return g_->constant_scalar(S(0));
        return total;
    }

    bool empty() const {
        for (long c : counts_)
            if (c > 0) return false;
        return true;
    }

private:
    static constexpr S kEps = S(1e-7);

    typename Graph<S>::Id one_minus(typename Graph<S>::Id p) {
        return g_->add(g_->full({1, g_->cols(p)}, S(1)), g_->scale(p, S(-1)));
    }

    Graph<S>* g_;
    const std::vector<TaskSpec>* tasks_;
    std::vector<typename Graph<S>::Id> sums_;
    std::vector<long> counts_;
};

}  // namespace remed::trainer
