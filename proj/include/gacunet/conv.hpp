#pragma once

// Convolutional building blocks (C x H x W feature maps, single sample) and the
// two segmentation losses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "gacunet/kernels.hpp"
#include "gacunet/tensor.hpp"

namespace gacunet {

template <typename T>
struct ConvParams {
    Tensor<T> kernel;  // C_out x C_in x k x k
    Tensor<T> bias;    // C_out
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t padding = 0;
};

/// Zero padding that keeps the spatial size at stride 1.
constexpr std::size_t same_padding(std::size_t kernel, std::size_t dilation) { return dilation * (kernel - 1) / 2; }

constexpr std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                         std::size_t dilation, std::size_t padding) {
    return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

namespace detail {

struct ConvGeometry {
    std::size_t c_in, h, w, c_out, k, stride, dilation, padding, out_h, out_w;

    std::size_t patch() const { return c_in * k * k; }
    std::size_t pixels() const { return out_h * out_w; }
    bool is_pointwise() const { return k == 1 && stride == 1 && padding == 0; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
    for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = cols + ((c * g.k + ki) * g.k + kj) * g.pixels();
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki * g.dilation) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    T* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = in + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj * g.dilation) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[iw];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* in) {
    std::fill(in, in + g.c_in * g.h * g.w, T(0));
    for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = cols + ((c * g.k + ki) * g.k + kj) * g.pixels();
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki * g.dilation) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* dst = in + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
                    const T* src = row + oh * g.out_w;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj * g.dilation) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding, dilation and stride.
/// input: C_in x H x W; output: C_out x H' x W' with
/// H' = floor((H + 2p - d(k-1) - 1) / s) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params) {
    const auto& kernel = params.kernel;
    const auto& bias = params.bias;
    if (input.rank() != 3) throw ShapeError("conv2d: input must be C x H x W, got " + to_string(input.shape()));
    if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0)
        throw ShapeError("conv2d: kernel must be C_out x C_in x k x k with odd k, got " + to_string(kernel.shape()));
    if (kernel.dim(1) != input.dim(0))
        throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " does not match input " +
                         to_string(input.shape()));
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
        throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match kernel " +
                         to_string(kernel.shape()));
    if (params.stride == 0 || params.dilation == 0) throw ShapeError("conv2d: stride and dilation must be >= 1");

    detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernel.dim(0), kernel.dim(2),
                           params.stride, params.dilation, params.padding, 0, 0};
    const std::size_t span = g.dilation * (g.k - 1) + 1;
    if (span > g.h + 2 * g.padding || span > g.w + 2 * g.padding)
        throw ShapeError("conv2d: effective kernel extent " + std::to_string(span) + " exceeds padded input " +
                         to_string(input.shape()));
    g.out_h = conv_output_extent(g.h, g.k, g.stride, g.dilation, g.padding);
    g.out_w = conv_output_extent(g.w, g.k, g.stride, g.dilation, g.padding);

    std::shared_ptr<std::vector<T>> cols;
    const T* col_data = input.data().data();
    if (!g.is_pointwise()) {
        cols = std::make_shared<std::vector<T>>(g.patch() * g.pixels());
        detail::im2col(g, input.data().data(), cols->data());
        col_data = cols->data();
    }

    std::vector<T> out(g.c_out * g.pixels());
    for (std::size_t o = 0; o < g.c_out; ++o) std::fill_n(out.begin() + o * g.pixels(), g.pixels(), bias[o]);
    kernels::gemm_nn(g.c_out, g.pixels(), g.patch(), kernel.data().data(), col_data, out.data(), true);

    return record<T>(
        "conv2d", Shape{g.c_out, g.out_h, g.out_w}, std::move(out), {&input, &kernel, &bias},
        [input, kernel, bias, cols, g](std::span<const T> grad) {
            const T* col_data = cols ? cols->data() : input.data().data();
            if (kernel.requires_grad()) {
                std::vector<T> gk(kernel.numel());
                kernels::gemm_nt(g.c_out, g.patch(), g.pixels(), grad.data(), col_data, gk.data(), false);
                send<T>(kernel, gk);
            }
            if (bias.requires_grad()) {
                std::vector<T> gb(g.c_out, T(0));
                for (std::size_t o = 0; o < g.c_out; ++o)
                    for (std::size_t p = 0; p < g.pixels(); ++p) gb[o] += grad[o * g.pixels() + p];
                send<T>(bias, gb);
            }
            if (input.requires_grad()) {
                std::vector<T> gcols(g.patch() * g.pixels());
                kernels::gemm_tn(g.patch(), g.pixels(), g.c_out, kernel.data().data(), grad.data(), gcols.data(),
                                 false);
                if (g.is_pointwise()) {
                    send<T>(input, gcols);
                } else {
                    std::vector<T> gin(input.numel());
                    detail::col2im(g, gcols.data(), gin.data());
                    send<T>(input, gin);
                }
            }
        });
}

/// Convolution with taps spaced `params.dilation` apart; dilation 1 is conv2d.
template <typename T>
Tensor<T> dilated_conv2d(const Tensor<T>& input, const ConvParams<T>& params) {
    return conv2d(input, params);
}

/// 2x2 non-overlapping max pooling. Gradient goes to the first maximal tap in
/// row-major window order.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input) {
    if (input.rank() != 3) throw ShapeError("maxpool2: input must be C x H x W, got " + to_string(input.shape()));
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2: odd spatial extents in " + to_string(input.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<T> out(c * oh * ow);
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                const std::size_t base = (ch * h + 2 * i) * w + 2 * j;
                const std::size_t taps[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = taps[0];
                for (std::size_t t = 1; t < 4; ++t)
                    if (input[taps[t]] > input[best]) best = taps[t];
                const std::size_t o = (ch * oh + i) * ow + j;
                out[o] = input[best];
                (*argmax)[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return record<T>("maxpool2", Shape{c, oh, ow}, std::move(out), {&input}, [input, argmax](std::span<const T> g) {
        std::vector<T> gin(input.numel(), T(0));
        for (std::size_t o = 0; o < g.size(); ++o) gin[(*argmax)[o]] += g[o];
        send<T>(input, gin);
    });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& input) {
    if (input.rank() != 3) throw ShapeError("upsample2: input must be C x H x W, got " + to_string(input.shape()));
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<T> out(c * oh * ow);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) out[(ch * oh + i) * ow + j] = input[(ch * h + i / 2) * w + j / 2];
    return record<T>("upsample2", Shape{c, oh, ow}, std::move(out), {&input}, [input, c, h, w](std::span<const T> g) {
        std::vector<T> gin(input.numel(), T(0));
        const std::size_t ow = 2 * w;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < 2 * h; ++i)
                for (std::size_t j = 0; j < ow; ++j) gin[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * ow + j];
        send<T>(input, gin);
    });
}

/// Mean binary cross-entropy. Log arguments are clamped to >= 1e-12.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require_same_shape("bce_loss", pred.shape(), target.shape());
    const T floor = static_cast<T>(kLogClamp);
    const T n = static_cast<T>(pred.numel());
    T total = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const T p = pred[i], y = target[i];
        total += y * std::log(std::max(p, floor)) + (T(1) - y) * std::log(std::max(T(1) - p, floor));
    }
    return record<T>("bce_loss", Shape{}, {-total / n}, {&pred, &target}, [pred, target, n, floor](std::span<const T> g) {
        if (pred.requires_grad()) {
            std::vector<T> gp(pred.numel());
            for (std::size_t i = 0; i < gp.size(); ++i) {
                const T p = pred[i], y = target[i];
                T d = 0;
                if (p >= floor) d -= y / p;
                if (T(1) - p >= floor) d += (T(1) - y) / (T(1) - p);
                gp[i] = g[0] * d / n;
            }
            send<T>(pred, gp);
        }
        if (target.requires_grad()) {
            std::vector<T> gt(target.numel());
            for (std::size_t i = 0; i < gt.size(); ++i) {
                const T p = pred[i];
                gt[i] = -g[0] * (std::log(std::max(p, floor)) - std::log(std::max(T(1) - p, floor))) / n;
            }
            send<T>(target, gt);
        }
    });
}

inline constexpr double kDiceEpsilon = 1e-6;

/// Soft Dice loss 1 - 2 (sum(y p) + eps) / (sum(y) + sum(p) + eps).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps = static_cast<T>(kDiceEpsilon)) {
    detail::require_same_shape("dice_loss", pred.shape(), target.shape());
    if (!(eps > 0)) throw Error("dice_loss: epsilon must be positive");
    T inter = 0, total = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        inter += pred[i] * target[i];
        total += pred[i] + target[i];
    }
    const T num = inter + eps, den = total + eps;
    return record<T>("dice_loss", Shape{}, {T(1) - T(2) * num / den}, {&pred, &target},
                     [pred, target, num, den](std::span<const T> g) {
                         // d/dx of -2 num/den with num' = other operand, den' = 1
                         const T scale = -T(2) * g[0] / (den * den);
                         if (pred.requires_grad()) {
                             std::vector<T> gp(pred.numel());
                             for (std::size_t i = 0; i < gp.size(); ++i) gp[i] = scale * (target[i] * den - num);
                             send<T>(pred, gp);
                         }
                         if (target.requires_grad()) {
                             std::vector<T> gt(target.numel());
                             for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = scale * (pred[i] * den - num);
                             send<T>(target, gt);
                         }
                     });
}

}  // namespace gacunet
