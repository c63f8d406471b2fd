#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "remed/graph.hpp"

namespace remed::nd {

// Adam with bias correction. One instance per trainable component; the step
// counter only advances when that component is actually stepped, so frozen
// phases never touch the moment buffers.
template <typename S>
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<HostTensor<S>*>& params, const std::vector<std::vector<S>>& grads, double lr) {
        if (params.size() != grads.size()) throw GraphError("adam: params/grads size mismatch");
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i]->data.size(), S(0));
                v_[i].assign(params[i]->data.size(), S(0));
            }
        }
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, double(t_));
        double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i]->data;
            const auto& g = grads[i];
            if (g.size() != p.size()) throw GraphError("adam: gradient size mismatch");
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < p.size(); ++j) {
                m[j] = S(beta1_) * m[j] + S(1.0 - beta1_) * g[j];
                v[j] = S(beta2_) * v[j] + S(1.0 - beta2_) * g[j] * g[j];
                double mhat = double(m[j]) / bc1;
                double vhat = double(v[j]) / bc2;
                p[j] -= S(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    long steps() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    long t_{0};
    std::vector<std::vector<S>> m_, v_;
};

}  // namespace remed::nd
