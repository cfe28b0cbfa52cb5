#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "cpdiff/graph.hpp"

namespace cpdiff {

// Central finite differences against the analytic backward pass, at 64-bit.
// `forward` rebuilds the loss on a fresh tape from the graph's current
// parameter values. Relative error uses max(|analytic|, |numeric|, 1e-12)
// as denominator; the worst coordinate over all parameters is returned.
inline double grad_audit(GraphD& g, const std::function<GraphD::NodeId(GraphD&)>& forward,
                         double epsilon = 1e-5) {
    if (epsilon < 1e-7 || epsilon > 1e-4) {
        throw std::invalid_argument("grad_audit: epsilon out of [1e-7, 1e-4]");
    }
    g.start_tape();
    GraphD::NodeId loss = forward(g);
    if (!std::isfinite(g.val(loss).data[0])) {
        throw std::runtime_error("grad_audit: non-finite loss at base point");
    }
    g.backward(loss);

    std::vector<ArrayD> analytic;
    for (auto id : g.param_ids()) {
        analytic.push_back(g.has_grad(id) ? g.grad(id) : ArrayD(g.param_value(id).shape));
    }

    auto eval = [&]() -> double {
        g.start_tape();
        GraphD::NodeId l = forward(g);
        const double v = g.val(l).data[0];
        if (!std::isfinite(v)) throw std::runtime_error("grad_audit: non-finite loss at perturbed point");
        return v;
    };

    double worst = 0.0;
    const auto& ids = g.param_ids();
    for (size_t pi = 0; pi < ids.size(); ++pi) {
        ArrayD& p = g.param_value(ids[pi]);
        for (int64_t i = 0; i < p.numel(); ++i) {
            const size_t s = static_cast<size_t>(i);
            const double keep = p.data[s];
            p.data[s] = keep + epsilon;
            const double fp = eval();
            p.data[s] = keep - epsilon;
            const double fm = eval();
            p.data[s] = keep;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double ana = analytic[pi].data[s];
            const double denom = std::max({std::abs(ana), std::abs(numeric), 1e-12});
            worst = std::max(worst, std::abs(ana - numeric) / denom);
        }
    }
    // leave the tape in a evaluated state consistent with the base point
    g.start_tape();
    forward(g);
    return worst;
}

}  // namespace cpdiff
