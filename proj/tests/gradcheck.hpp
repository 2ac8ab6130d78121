#pragma once

// Central finite-difference gradient oracle, independent of the tape: the
// numeric side re-runs the forward with perturbed inputs and no recording.

#include <algorithm>
#include <cmath>
#include <vector>

#include "uavm/tensor.hpp"

namespace gradcheck {

inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1.0});
}

// forward must be a pure function of the inputs' current values and return a
// scalar tensor. Returns the worst relative error over all input elements.
template <typename Forward>
double max_grad_rel_err(const std::vector<uavm::Tensor<double>*>& inputs, Forward forward,
                        double h = 1e-5) {
    using namespace uavm;
    for (auto* t : inputs) {
        t->set_requires_grad(true);
        t->zero_grad();
    }
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        Tensor<double> loss = forward();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto* t : inputs) {
        auto g = t->grad_span();
        analytic.emplace_back(g.begin(), g.end());
    }

    double worst = 0.0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto vals = inputs[ti]->values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = forward().at(0);
            vals[i] = orig - h;
            const double fm = forward().at(0);
            vals[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            worst = std::max(worst, rel_err(analytic[ti][i], numeric));
        }
    }
    return worst;
}

// Deterministic scalarization: weighted mean with fixed pseudorandom weights
// so every output element influences the loss.
inline uavm::Tensor<double> weighted_sum(const uavm::Tensor<double>& t, std::uint64_t seed) {
    auto rng = uavm::make_rng(seed);
    uavm::Tensor<double> w = uavm::Tensor<double>::randn(t.shape(), rng);
    return uavm::mean_all(uavm::mul(t, w));
}

}  // namespace gradcheck
