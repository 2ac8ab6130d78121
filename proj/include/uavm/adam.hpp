#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "uavm/errors.hpp"
#include "uavm/tensor.hpp"

namespace uavm {

template <typename S>
struct AdamState {
    std::vector<S> m, v;
    std::uint64_t step = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update, in place. The state's step counter is
// incremented; fresh states are lazily sized to the parameter.
template <typename S>
void adam_step(Tensor<S>& param, std::span<const S> grad, AdamState<S>& state,
               const AdamConfig& cfg) {
    const std::size_t n = param.numel();
    if (grad.size() != n) {
        throw shape_error("adam_step: grad size " + std::to_string(grad.size()) +
                          " vs param " + shape_str(param.shape()));
    }
    if (state.m.empty()) {
        state.m.assign(n, S(0));
        state.v.assign(n, S(0));
    }
    if (state.m.size() != n || state.v.size() != n) {
        throw shape_error("adam_step: state size " + std::to_string(state.m.size()) +
                          " vs param " + shape_str(param.shape()));
    }
    state.step += 1;
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    const S lr = static_cast<S>(cfg.lr), eps = static_cast<S>(cfg.eps);
    const S bc1 = S(1) - static_cast<S>(std::pow(cfg.beta1, static_cast<double>(state.step)));
    const S bc2 = S(1) - static_cast<S>(std::pow(cfg.beta2, static_cast<double>(state.step)));
    auto pv = param.values();
    for (std::size_t i = 0; i < n; ++i) {
        const S g = grad[i];
        state.m[i] = b1 * state.m[i] + (S(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (S(1) - b2) * g * g;
        const S mhat = state.m[i] / bc1;
        const S vhat = state.v[i] / bc2;
        pv[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace uavm
