#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "gacunet/tensor.hpp"

namespace gacunet {

struct GradCheckResult {
    double max_rel_error = 0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0;
    double numeric = 0;
    bool passed = false;
};

/// Compares tape gradients of a scalar function against central finite
/// differences on every coordinate of `inputs`. The relative error of one
/// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// `fn` must read the inputs through their handles; they are perturbed in place
/// and restored afterwards.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& fn, std::vector<Tensor<T>> inputs, T step,
                           double tolerance) {
    Tape<T>::current().clear();
    std::vector<bool> flags;
    for (auto& x : inputs) {
        flags.push_back(x.requires_grad());
        x.set_requires_grad(true);
        x.zero_grad();
    }

    Tensor<T> loss = fn();
    if (loss.numel() != 1) throw ShapeError("grad_check: function output has shape " + to_string(loss.shape()));
    backward(loss);

    std::vector<std::vector<T>> analytic;
    for (auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto values = inputs[t].data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T original = values[i];
            values[i] = original + step;
            const double plus = static_cast<double>(fn().item());
            values[i] = original - step;
            const double minus = static_cast<double>(fn().item());
            values[i] = original;
            const double numeric = (plus - minus) / (2.0 * static_cast<double>(step));
            const double exact = static_cast<double>(analytic[t][i]);
            const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
            const double rel = std::abs(exact - numeric) / denom;
            if (rel > result.max_rel_error || (t == 0 && i == 0)) {
                result.max_rel_error = rel;
                result.worst_input = t;
                result.worst_index = i;
                result.analytic = exact;
                result.numeric = numeric;
            }
        }
    }
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        inputs[t].set_requires_grad(flags[t]);
        inputs[t].zero_grad();
    }
    result.passed = result.max_rel_error < tolerance;
    return result;
}

}  // namespace gacunet
