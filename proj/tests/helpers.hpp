#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "exotst/ops.hpp"
#include "exotst/rng.hpp"
#include "exotst/tensor.hpp"

namespace testutil {

inline exotst::Tensor random_tensor(exotst::Shape shape, exotst::Rng& rng,
                                    bool requires_grad, double lo = -1.0,
                                    double hi = 1.0) {
    exotst::Tensor t = exotst::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.value()) v = rng.uniform(lo, hi);
    return t;
}

/// Reduces an arbitrary op output to a scalar with fixed random weights so
/// the finite-difference probe exercises every output element.
inline exotst::Tensor weighted_sum(const exotst::Tensor& out, exotst::Rng& rng) {
    exotst::Tensor w = exotst::Tensor::zeros(out.shape(), false);
    for (double& v : w.value()) v = rng.uniform(-1.0, 1.0);
    return exotst::sum_all(exotst::mul(out, w));
}

struct FdReport {
    double max_rel_err = 0.0;
    std::string worst;  // "param#p[i]" of the worst element
};

/// Central-difference gradient check. `loss_fn` must be a deterministic pure
/// function of the current values of `params`. Relative error uses
/// |analytic - fd| / max(floor, |analytic|, |fd|).
inline FdReport fd_gradient_check(const std::function<exotst::Tensor()>& loss_fn,
                                  std::vector<exotst::Tensor> params,
                                  double h = 1e-5, double floor = 1e-2) {
    using namespace exotst;
    Tape::instance().clear();
    for (Tensor& p : params) p.zero_grad();
    Tensor loss = loss_fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Tensor& p : params) analytic.push_back(p.grad());
    for (Tensor& p : params) p.zero_grad();

    FdReport rep;
    NoGradGuard guard;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double orig = p.value()[i];
            const double step = h * std::max(1.0, std::abs(orig));
            p.value()[i] = orig + step;
            const double lp = loss_fn().item();
            p.value()[i] = orig - step;
            const double lm = loss_fn().item();
            p.value()[i] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double an = analytic[pi][i];
            const double denom = std::max({floor, std::abs(an), std::abs(fd)});
            const double rel = std::abs(an - fd) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                char buf[64];
                std::snprintf(buf, sizeof(buf), "param#%zu[%zu]", pi, i);
                rep.worst = buf;
            }
        }
    }
    return rep;
}

}  // namespace testutil
