#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cuedepth/error.hpp"
#include "cuedepth/tensor.hpp"

namespace cuedepth {

enum class OptKind { sgd, adam };

struct OptConfig {
    OptKind kind = OptKind::adam;
    double lr = 1e-3;
    double momentum = 0.0;   // sgd only
    double beta1 = 0.9;      // adam only
    double beta2 = 0.999;    // adam only
    double eps = 1e-8;       // adam only
    double weight_decay = 0.0; // decoupled, applied as p -= lr * wd * p
};

/// Per-parameter slots for momentum or adam moments, plus the shared
/// step counter. Slots are allocated lazily on the first step.
struct OptState {
    std::size_t t = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

/// One in-place update of params from grads. All gradients are checked
/// for NaN/Inf before any parameter is touched, so a poisoned step
/// leaves the model unchanged.
inline void optimizer_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                           OptState& state, const OptConfig& cfg) {
    if (params.size() != grads.size()) {
        throw ContractError("optimizer_step: " + std::to_string(params.size()) + " params vs " +
                            std::to_string(grads.size()) + " grads");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        check_same_shape(*params[i], *grads[i], "optimizer_step");
        if (!grads[i]->all_finite()) {
            throw NumericFault("optimizer_step: non-finite gradient in parameter " + std::to_string(i));
        }
    }
    const bool adam = cfg.kind == OptKind::adam;
    if (state.m.size() != params.size()) {
        state.m.clear();
        state.v.clear();
        for (const Tensor* p : params) {
            state.m.push_back(Tensor::zeros(p->shape()));
            if (adam) state.v.push_back(Tensor::zeros(p->shape()));
        }
    }
    state.t += 1;
    const double bc1 = adam ? 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t)) : 1.0;
    const double bc2 = adam ? 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)) : 1.0;

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        const std::size_t n = p.numel();
        if (cfg.weight_decay != 0.0) {
            const double shrink = cfg.lr * cfg.weight_decay;
            for (std::size_t j = 0; j < n; ++j) p[j] -= shrink * p[j];
        }
        if (adam) {
            Tensor& m = state.m[i];
            Tensor& v = state.v[i];
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        } else if (cfg.momentum != 0.0) {
            Tensor& m = state.m[i];
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = cfg.momentum * m[j] + g[j];
                p[j] -= cfg.lr * m[j];
            }
        } else {
            for (std::size_t j = 0; j < n; ++j) p[j] -= cfg.lr * g[j];
        }
    }
}

} // namespace cuedepth
