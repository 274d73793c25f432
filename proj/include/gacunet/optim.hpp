#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "gacunet/tensor.hpp"

namespace gacunet {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias-corrected moments. Parameters whose requires_grad flag is
/// off at step time are skipped entirely.
template <typename T>
class Adam {
   public:
    Adam(std::vector<Tensor<T>> params, AdamOptions options) : params_(std::move(params)), options_(options) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
        const T lr = static_cast<T>(options_.lr / c1), inv_c2 = static_cast<T>(1.0 / c2);
        const T eps = static_cast<T>(options_.eps);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.requires_grad() || !p.has_grad()) continue;
            const auto g = p.grad();
            auto x = p.data();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < x.size(); ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                x[i] -= lr * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::size_t steps() const { return t_; }
    const AdamOptions& options() const { return options_; }

   private:
    std::vector<Tensor<T>> params_;
    AdamOptions options_;
    std::vector<std::vector<T>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace gacunet
