#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "exotst/errors.hpp"
#include "exotst/tensor.hpp"

namespace exotst {

/// First/second moment buffers and step counter for Adam, one slot per
/// parameter tensor in registry order.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

inline AdamState make_adam_state(const std::vector<Tensor>& params, double lr) {
    AdamState s;
    s.lr = lr;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor& p : params) {
        s.m.emplace_back(p.numel(), 0.0);
        s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
}

/// One bias-corrected Adam update over all parameters, reading the gradient
/// buffers accumulated by backward(). Afterwards every gradient is zeroed and
/// the tape is cleared, so the next forward starts clean.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (params.size() != state.m.size()) {
        throw ContractError("adam_step: state tracks " + std::to_string(state.m.size()) +
                            " tensors, got " + std::to_string(params.size()));
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        if (!p.requires_grad()) {
            throw ContractError("adam_step: parameter " + std::to_string(pi) +
                                " has no gradient storage");
        }
        if (p.numel() != state.m[pi].size()) {
            throw ContractError("adam_step: parameter " + std::to_string(pi) +
                                " changed size");
        }
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const auto& g = p.grad();
        auto& w = p.value();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        p.zero_grad();
    }
    Tape::instance().clear();
}

}  // namespace exotst
