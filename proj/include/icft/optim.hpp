#pragma once

#include <cmath>
#include <map>
#include <string>

#include "icft/tensor.hpp"

namespace icft {

template <class Real>
struct AdamState {
    Tensor<Real> m;
    Tensor<Real> v;
    int64_t step = 0;  // completed steps

    static AdamState like(const Tensor<Real>& p) {
        AdamState s;
        s.m = Tensor<Real>::zeros(p.shape);
        s.v = Tensor<Real>::zeros(p.shape);
        return s;
    }
};

struct AdamHyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 1e-5;
    double eps = 1e-8;
};

// Bias-corrected Adam with decoupled weight decay. Deterministic: identical
// inputs produce bit-identical outputs.
template <class Real>
void adam_step(Tensor<Real>& param, const Tensor<Real>& grad, AdamState<Real>& state,
               const AdamHyper& h) {
    if (!param.same_shape(grad) || !param.same_shape(state.m))
        throw dim_error("adam_step shape mismatch");
    state.step += 1;
    const Real b1 = Real(h.beta1), b2 = Real(h.beta2);
    const Real bc1 = Real(1) - static_cast<Real>(std::pow(h.beta1, static_cast<double>(state.step)));
    const Real bc2 = Real(1) - static_cast<Real>(std::pow(h.beta2, static_cast<double>(state.step)));
    const Real lr = Real(h.lr), wd = Real(h.weight_decay), eps = Real(h.eps);
    for (size_t i = 0; i < param.data.size(); ++i) {
        const Real g = grad.data[i];
        state.m.data[i] = b1 * state.m.data[i] + (Real(1) - b1) * g;
        state.v.data[i] = b2 * state.v.data[i] + (Real(1) - b2) * g * g;
        const Real mhat = state.m.data[i] / bc1;
        const Real vhat = state.v.data[i] / bc2;
        param.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * param.data[i]);
    }
}

// Named-tensor convenience used by the trainers.
template <class Real>
struct AdamOpt {
    AdamHyper hyper;
    std::map<std::string, AdamState<Real>> states;

    void step(const std::string& name, Tensor<Real>& param, const Tensor<Real>& grad, double lr) {
        auto it = states.find(name);
        if (it == states.end()) it = states.emplace(name, AdamState<Real>::like(param)).first;
        AdamHyper h = hyper;
        h.lr = lr;
        adam_step(param, grad, it->second, h);
    }
};

}  // namespace icft
