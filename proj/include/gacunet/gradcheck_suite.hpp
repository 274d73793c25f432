#pragma once

// Finite-difference checks over every layer, both losses, the reprogramming
// wrapper and a small end-to-end GAC-UNET, in 64-bit arithmetic.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "gacunet/conv.hpp"
#include "gacunet/gradcheck.hpp"
#include "gacunet/graph.hpp"
#include "gacunet/model.hpp"
#include "gacunet/reprogram.hpp"

namespace gacunet {

struct GradCheckRow {
    std::string name;
    double max_rel_error = 0;
    double tolerance = 0;
    std::size_t coordinates = 0;
    bool passed = false;
};

struct GradSuiteOptions {
    double step = 1e-6;
    double layer_tolerance = 1e-5;
    double model_tolerance = 1e-4;
    double model_step = 1e-5;
    bool inject_sign_bug = false;
    std::uint64_t seed = 0;
};

namespace detail {

class SuiteRng {
   public:
    explicit SuiteRng(std::uint64_t seed) : rng_(seed) {}

    TensorD tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = uniform(rng_, lo, hi);
        return TensorD(std::move(shape), std::move(v));
    }

    TensorD binary(Shape shape) {
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = static_cast<double>(rng_() & 1);
        return TensorD(std::move(shape), std::move(v));
    }

    /// sum(t * R) for a fresh random R of matching shape.
    TensorD project(const TensorD& t) { return sum(mul(t, tensor(t.shape()))); }

    std::mt19937_64& engine() { return rng_; }

   private:
    std::mt19937_64 rng_;
};

/// Identity forward with a negated backward rule.
inline TensorD sign_flipped_identity(const TensorD& x) {
    return record<double>("sign_flipped_identity", x.shape(), std::vector<double>(x.data().begin(), x.data().end()), {&x},
                          [x](std::span<const double> g) {
                              std::vector<double> neg(g.begin(), g.end());
                              for (auto& v : neg) v = -v;
                              send<double>(x, neg);
                          });
}

}  // namespace detail

/// End-to-end check of a small GAC-UNET (widths 2 and 3) on a 16x16 input,
/// over the input and every parameter.
inline GradCheckRow check_gac_unet_16x16(std::uint64_t seed, double step, double tolerance) {
    detail::SuiteRng rng(seed);
    ModelSpec spec;
    spec.input_size = 16;
    spec.widths = {2, 3};
    spec.graph.gat_out = 3;
    spec.graph.cheb_order = 2;
    spec.seed = seed;
    auto model = std::make_shared<Model<double>>(build_model<double>(spec));
    // Doubled weights keep the input gradients well above the difference noise.
    for (auto& p : model->parameters())
        for (auto& v : p.value.data()) v = p.is_bias ? uniform(rng.engine(), -0.1, 0.1) : 2 * v;
    auto x = rng.tensor({3, 16, 16}, 0.0, 1.0);
    auto r = rng.tensor({1, 16, 16});
    std::vector<TensorD> inputs{x};
    std::size_t coords = x.numel();
    for (auto& p : model->parameters()) {
        inputs.push_back(p.value);
        coords += p.value.numel();
    }
    const auto res = grad_check<double>([model, x, r] { return sum(mul(forward(*model, x), r)); }, inputs, step, tolerance);
    return {"gac_unet_16x16", res.max_rel_error, tolerance, coords, res.passed};
}

inline std::vector<GradCheckRow> run_gradcheck_suite(const GradSuiteOptions& opt = {}) {
    detail::SuiteRng rng(opt.seed);
    std::vector<GradCheckRow> rows;
    const auto run = [&](std::string name, double tol, std::vector<TensorD> inputs, std::function<TensorD()> fn,
                         double step = 0) {
        std::size_t coords = 0;
        for (const auto& t : inputs) coords += t.numel();
        const auto r = grad_check<double>(fn, inputs, step > 0 ? step : opt.step, tol);
        rows.push_back({std::move(name), r.max_rel_error, tol, coords, r.passed});
    };
    const double tol = opt.layer_tolerance;

    {
        auto x = rng.tensor({2, 6, 6});
        ConvParams<double> p{rng.tensor({3, 2, 3, 3}), rng.tensor({3}), 1, 1, 1};
        auto r = rng.tensor({3, 6, 6});
        run("conv2d", tol, {x, p.kernel, p.bias}, [=] { return sum(mul(conv2d(x, p), r)); });
        if (opt.inject_sign_bug)
            run("conv2d+sign_bug", tol, {x, p.kernel, p.bias},
                [=] { return sum(mul(detail::sign_flipped_identity(conv2d(x, p)), r)); });
    }
    {
        auto x = rng.tensor({2, 7, 7});
        ConvParams<double> p{rng.tensor({2, 2, 3, 3}), rng.tensor({2}), 1, 2, 2};
        auto r = rng.tensor({2, 7, 7});
        run("dilated_conv2d", tol, {x, p.kernel, p.bias}, [=] { return sum(mul(dilated_conv2d(x, p), r)); });
    }
    {
        auto x = rng.tensor({2, 4, 6});
        auto r = rng.tensor({2, 2, 3});
        run("maxpool2", tol, {x}, [=] { return sum(mul(maxpool2(x), r)); });
    }
    {
        auto x = rng.tensor({2, 3, 3});
        auto r = rng.tensor({2, 6, 6});
        run("upsample2", tol, {x}, [=] { return sum(mul(upsample2(x), r)); });
    }
    {
        auto graph = std::make_shared<const Graph>(build_grid_graph(3, 4, 8));
        auto x = rng.tensor({12, 3});
        GatParams<double> p{rng.tensor({4, 3}), rng.tensor({8})};
        auto r = rng.tensor({12, 4});
        run("gat_conv", tol, {x, p.weight, p.attention}, [=] { return sum(mul(gat_conv(x, graph, p), r)); });
    }
    {
        auto lap = std::make_shared<const NormalizedLaplacian>(normalized_laplacian(build_grid_graph(3, 3, 8)));
        auto x = rng.tensor({9, 3});
        ChebParams<double> p;
        for (int k = 0; k <= 3; ++k) p.theta.push_back(rng.tensor({2, 3}));
        auto r = rng.tensor({9, 2});
        std::vector<TensorD> inputs{x};
        inputs.insert(inputs.end(), p.theta.begin(), p.theta.end());
        run("cheb_conv", tol, inputs, [=] { return sum(mul(cheb_conv(x, lap, p), r)); });
    }
    {
        auto x = rng.tensor({2, 3, 4}, -2.0, 2.0);
        auto rc = rng.tensor({2, 2});
        auto ra = rng.tensor({4, 3, 4});
        run("center_of_mass", tol, {x}, [=] {
            const auto out = center_of_mass(x);
            return add(sum(mul(out.centroids, rc)), sum(mul(out.augmented, ra)));
        });
    }
    {
        auto x = rng.tensor({3, 4, 4});
        auto w = rng.tensor({4, 4});
        auto b = rng.tensor({4, 4});
        auto r = rng.tensor({3, 4, 4});
        run("input_transform", tol, {x, w, b}, [=] { return sum(mul(input_transform(x, w, b), r)); });
    }
    {
        auto base_out = rng.tensor({5, 3, 3}, 0.0, 1.0);
        auto k = rng.tensor({1, 5, 1, 1});
        auto b = rng.tensor({1});
        auto r = rng.tensor({1, 3, 3});
        run("output_map", tol, {base_out, k, b}, [=] { return sum(mul(output_map(base_out, k, b), r)); });
    }
    {
        auto pred = rng.tensor({1, 4, 4}, 0.05, 0.95);
        auto target = rng.binary({1, 4, 4});
        run("bce_loss", tol, {pred}, [=] { return bce_loss(pred, target); });
        run("dice_loss", tol, {pred}, [=] { return dice_loss(pred, target); });
        std::vector<double> sat(16);
        for (std::size_t i = 0; i < 16; ++i) sat[i] = target[i] > 0.5 ? (i % 3 ? 0.999 : 0.001) : (i % 3 ? 0.001 : 0.999);
        auto saturated = TensorD({1, 4, 4}, sat);
        run("bce_loss@saturated", tol, {saturated}, [=] { return bce_loss(saturated, target); });
        run("dice_loss@saturated", tol, {saturated}, [=] { return dice_loss(saturated, target); });
    }
    {
        ModelSpec spec;
        spec.input_size = 8;
        spec.widths = {2};
        spec.out_channels = 3;
        spec.variant = Variant::PlainUnet;
        spec.seed = opt.seed;
        auto base = std::make_shared<const Model<double>>(build_model<double>(spec));
        ReprogramWrapper<double> wrapper(base, {1, false, opt.seed});
        auto& params = wrapper.parameters();
        for (auto& v : params[0].value.data()) v += uniform(rng.engine(), -0.2, 0.2);
        for (auto& v : params[1].value.data()) v += uniform(rng.engine(), -0.2, 0.2);
        auto x = rng.tensor({3, 8, 8}, 0.0, 1.0);
        auto r = rng.tensor({1, 8, 8});
        std::vector<TensorD> inputs;
        for (auto& p : params) inputs.push_back(p.value);
        run("reprogram_wrapper", opt.model_tolerance, inputs, [&wrapper, x, r] { return sum(mul(wrapper.forward(x), r)); },
            opt.model_step);
    }
    rows.push_back(check_gac_unet_16x16(opt.seed, opt.model_step, opt.model_tolerance));
    return rows;
}

inline bool all_passed(const std::vector<GradCheckRow>& rows) {
    for (const auto& r : rows)
        if (!r.passed) return false;
    return true;
}

}  // namespace gacunet
