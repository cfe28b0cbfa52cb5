#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cpdiff/graph.hpp"

namespace cpdiff {

enum class OptKind { kSgd, kAdam };

// Adam moments are kept per trainable parameter, aligned with `params`.
template <typename T>
struct OptimizerStateT {
    OptKind kind = OptKind::kAdam;
    T learning_rate = T(1e-3);
    T weight_decay = T(0);
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
    int64_t step = 0;
    std::vector<ArrayT<T>> m, v;

    static OptimizerStateT sgd(T lr, T wd = T(0)) {
        OptimizerStateT s;
        s.kind = OptKind::kSgd;
        s.learning_rate = lr;
        s.weight_decay = wd;
        return s;
    }
    static OptimizerStateT adam(T lr, T wd = T(0)) {
        OptimizerStateT s;
        s.kind = OptKind::kAdam;
        s.learning_rate = lr;
        s.weight_decay = wd;
        return s;
    }
};

using OptimizerState = OptimizerStateT<float>;

// Applies one update over `params`. Returns false (and leaves parameters
// untouched) if any gradient is non-finite.
template <typename T>
bool optimizer_step(OptimizerStateT<T>& st, GraphT<T>& g,
                    const std::vector<typename GraphT<T>::NodeId>& params) {
    for (auto id : params) {
        if (!g.has_grad(id)) continue;
        for (const T gv : g.grad(id).data) {
            if (!std::isfinite(gv)) return false;
        }
    }
    if (st.kind == OptKind::kAdam && st.m.empty()) {
        for (auto id : params) {
            st.m.emplace_back(g.param_value(id).shape);
            st.v.emplace_back(g.param_value(id).shape);
        }
    }
    st.step++;
    const T lr = st.learning_rate;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto id = params[pi];
        if (!g.has_grad(id)) continue;
        ArrayT<T>& p = g.param_value(id);
        const ArrayT<T>& gr = g.grad(id);
        if (st.kind == OptKind::kSgd) {
            for (int64_t i = 0; i < p.numel(); ++i) {
                const size_t s = static_cast<size_t>(i);
                p.data[s] -= lr * gr.data[s] + lr * st.weight_decay * p.data[s];
            }
        } else {
            ArrayT<T>& m = st.m[pi];
            ArrayT<T>& v = st.v[pi];
            const T bc1 = T(1) - std::pow(st.beta1, T(st.step));
            const T bc2 = T(1) - std::pow(st.beta2, T(st.step));
            for (int64_t i = 0; i < p.numel(); ++i) {
                const size_t s = static_cast<size_t>(i);
                const T gv = gr.data[s];
                m.data[s] = st.beta1 * m.data[s] + (T(1) - st.beta1) * gv;
                v.data[s] = st.beta2 * v.data[s] + (T(1) - st.beta2) * gv * gv;
                const T mh = m.data[s] / bc1;
                const T vh = v.data[s] / bc2;
                p.data[s] -= lr * mh / (std::sqrt(vh) + st.eps) + lr * st.weight_decay * p.data[s];
            }
        }
    }
    return true;
}

inline float cosine_lr(float base, int64_t step, int64_t total) {
    if (total <= 0) return base;
    const double t = static_cast<double>(step) / static_cast<double>(total);
    return static_cast<float>(base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
}

}  // namespace cpdiff
