#pragma once

// Dense row-major tensors with a per-thread recording tape for reverse-mode
// differentiation. Tensor is a shared handle: copies alias the same storage,
// clone() materializes an independent copy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gacunet/error.hpp"
#include "gacunet/kernels.hpp"

namespace gacunet {

template <typename T>
class Tensor;

namespace detail {

inline constexpr std::size_t kLeaf = std::numeric_limits<std::size_t>::max();

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool retain_grad = false;
    std::uint64_t generation = 0;
    std::size_t node = kLeaf;
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// Lower clamp applied to the arguments of log and of divisions.
inline constexpr double kLogClamp = 1e-12;

/// Disables tape recording for its lifetime (inference, finite differences).
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
    ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

inline bool grad_mode() { return detail::grad_mode_enabled; }

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so every node's inputs precede it. A backward pass consumes the
/// recording; the tape then starts a new generation.
template <typename T>
class Tape {
   public:
    using Impl = detail::TensorImpl<T>;
    using BackwardFn = std::function<void(std::span<const T>)>;

    static Tape& current() {
        thread_local Tape tape;
        return tape;
    }

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t generation() const { return generation_; }
    std::string_view op_name(std::size_t i) const { return nodes_.at(i).op; }

    void record(const std::shared_ptr<Impl>& out, std::string_view op, BackwardFn fn) {
        out->requires_grad = true;
        out->generation = generation_;
        out->node = nodes_.size();
        nodes_.push_back(Node{op, {}, std::move(fn), out});
    }

    bool is_live(const Impl& t) const {
        return t.node != detail::kLeaf && t.generation == generation_ && t.node < nodes_.size();
    }

    void accumulate(const std::shared_ptr<Impl>& t, std::span<const T> g) {
        if (!t->requires_grad) return;
        std::vector<T>& target = is_live(*t) ? nodes_[t->node].grad : t->grad;
        if (target.empty()) {
            target.assign(g.begin(), g.end());
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) target[i] += g[i];
        }
    }

    void backward(const std::shared_ptr<Impl>& loss) {
        if (numel(loss->shape) != 1)
            throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss->shape));
        if (loss->node == detail::kLeaf) {
            if (!loss->requires_grad) throw Error("backward: loss does not require grad");
            const T one = 1;
            accumulate(loss, std::span<const T>(&one, 1));
            return;
        }
        if (!is_live(*loss))
            throw Error("backward: tape for this loss was already consumed; re-run the forward pass");
        nodes_[loss->node].grad.assign(1, T(1));
        for (std::size_t i = loss->node + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (node.grad.empty()) continue;
            if (auto out = node.output.lock(); out && out->retain_grad) out->grad = node.grad;
            if (node.backward) node.backward(node.grad);
            node.grad.clear();
            node.grad.shrink_to_fit();
        }
        clear();
    }

    /// Drops the recording without differentiating it.
    void clear() {
        nodes_.clear();
        ++generation_;
    }

   private:
    struct Node {
        std::string_view op;
        std::vector<T> grad;
        BackwardFn backward;
        std::weak_ptr<Impl> output;
    };

    std::vector<Node> nodes_;
    std::uint64_t generation_ = 1;
};

template <typename T>
class Tensor {
   public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
        impl_->data.assign(gacunet::numel(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
        if (gacunet::numel(shape) != data.size())
            throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                             std::to_string(gacunet::numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    T& operator[](std::size_t i) { return impl_->data[i]; }
    T operator[](std::size_t i) const { return impl_->data[i]; }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        return *this;
    }
    void retain_grad() { impl_->retain_grad = true; }

    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; zero-filled if nothing has flowed into this tensor.
    std::span<const T> grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(numel(), T(0));
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const { return Tensor(shape(), impl_->data); }

    const std::shared_ptr<Impl>& impl() const { return impl_; }

   private:
    std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Creates an output tensor and records it on the tape when any input is
/// differentiable and grad mode is on. `backward` receives d(loss)/d(output)
/// and forwards gradients to the inputs with send().
template <typename T>
Tensor<T> record(std::string_view op, Shape shape, std::vector<T> data,
                 std::initializer_list<const Tensor<T>*> inputs,
                 typename Tape<T>::BackwardFn backward) {
    Tensor<T> out(std::move(shape), std::move(data));
    if (!grad_mode()) return out;
    const bool tracked =
        std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
    if (tracked) Tape<T>::current().record(out.impl(), op, std::move(backward));
    return out;
}

template <typename T>
void send(const Tensor<T>& target, std::span<const T> g) {
    Tape<T>::current().accumulate(target.impl(), g);
}

template <typename T>
void backward(const Tensor<T>& loss) {
    Tape<T>::current().backward(loss.impl());
}

namespace detail {

inline void require_same_shape(std::string_view op, const Shape& a, const Shape& b) {
    if (a != b)
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

struct AxisSplit {
    std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(std::string_view op, const Shape& shape, std::size_t axis) {
    if (axis >= shape.size())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape));
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return record<T>("add", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const T> g) {
        send(a, g);
        send(b, g);
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return record<T>("sub", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const T> g) {
        send(a, g);
        if (b.requires_grad()) {
            std::vector<T> neg(g.begin(), g.end());
            for (auto& v : neg) v = -v;
            send<T>(b, neg);
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return record<T>("mul", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const T> g) {
        std::vector<T> buf(g.size());
        if (a.requires_grad()) {
            for (std::size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * b[i];
            send<T>(a, buf);
        }
        if (b.requires_grad()) {
            for (std::size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * a[i];
            send<T>(b, buf);
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
    return record<T>("scale", a.shape(), std::move(out), {&a}, [a, factor](std::span<const T> g) {
        std::vector<T> buf(g.begin(), g.end());
        for (auto& v : buf) v *= factor;
        send<T>(a, buf);
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + offset;
    return record<T>("add_scalar", a.shape(), std::move(out), {&a}, [a](std::span<const T> g) { send(a, g); });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
    return record<T>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [a, b, m, n, k](std::span<const T> g) {
        if (a.requires_grad()) {
            std::vector<T> ga(m * k);
            kernels::gemm_nt(m, k, n, g.data(), b.data().data(), ga.data(), false);
            send<T>(a, ga);
        }
        if (b.requires_grad()) {
            std::vector<T> gb(k * n);
            kernels::gemm_tn(k, n, m, a.data().data(), g.data(), gb.data(), false);
            send<T>(b, gb);
        }
    });
}

namespace detail {
template <typename T>
std::vector<T> transpose2d(std::span<const T> x, std::size_t rows, std::size_t cols) {
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
    return out;
}
}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got shape " + to_string(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    return record<T>("transpose", Shape{c, r}, detail::transpose2d<T>(a.data(), r, c), {&a},
                     [a, r, c](std::span<const T> g) { send<T>(a, detail::transpose2d<T>(g, c, r)); });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    std::vector<T> out(a.data().begin(), a.data().end());
    return record<T>("reshape", std::move(shape), std::move(out), {&a}, [a](std::span<const T> g) { send(a, g); });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape shape = parts.front().shape();
    if (axis >= shape.size()) throw ShapeError("concat: axis out of range for shape " + to_string(shape));
    shape[axis] = 0;
    for (const auto& p : parts) {
        Shape expect = parts.front().shape();
        Shape got = p.shape();
        if (got.size() != expect.size()) throw ShapeError("concat: rank mismatch " + to_string(expect) + " vs " + to_string(got));
        expect[axis] = got[axis];
        if (expect != got) throw ShapeError("concat: shape mismatch " + to_string(parts.front().shape()) + " vs " + to_string(got));
        shape[axis] += got[axis];
    }
    const auto s = detail::split_axis("concat", shape, axis);
    std::vector<T> out(numel(shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t ext = p.dim(axis);
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(p.data().begin() + o * ext * s.inner, ext * s.inner,
                        out.begin() + (o * s.extent + offset) * s.inner);
        offset += ext;
    }
    Tensor<T> result(shape, std::move(out));
    if (!grad_mode()) return result;
    bool tracked = false;
    for (const auto& p : parts) tracked = tracked || p.requires_grad();
    if (!tracked) return result;
    Tape<T>::current().record(result.impl(), "concat", [parts, axis, s](std::span<const T> g) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t ext = p.dim(axis);
            if (p.requires_grad()) {
                std::vector<T> gp(p.numel());
                for (std::size_t o = 0; o < s.outer; ++o)
                    std::copy_n(g.begin() + (o * s.extent + off) * s.inner, ext * s.inner,
                                gp.begin() + o * ext * s.inner);
                send<T>(p, gp);
            }
            off += ext;
        }
    });
    return result;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto s = detail::split_axis("slice", a.shape(), axis);
    if (begin >= end || end > s.extent)
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for shape " + to_string(a.shape()));
    Shape shape = a.shape();
    shape[axis] = end - begin;
    const std::size_t ext = end - begin;
    std::vector<T> out(numel(shape));
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(a.data().begin() + (o * s.extent + begin) * s.inner, ext * s.inner,
                    out.begin() + o * ext * s.inner);
    return record<T>("slice", shape, std::move(out), {&a}, [a, s, begin, ext](std::span<const T> g) {
        std::vector<T> ga(a.numel(), T(0));
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(g.begin() + o * ext * s.inner, ext * s.inner, ga.begin() + (o * s.extent + begin) * s.inner);
        send<T>(a, ga);
    });
}

/// Expands size-1 dimensions of `a` to `shape` (equal rank required).
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, Shape shape) {
    if (shape.size() != a.rank())
        throw ShapeError("broadcast_to: rank mismatch " + to_string(a.shape()) + " vs " + to_string(shape));
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (a.dim(i) != shape[i] && a.dim(i) != 1)
            throw ShapeError("broadcast_to: cannot expand " + to_string(a.shape()) + " to " + to_string(shape));
    const std::size_t n = numel(shape);
    std::vector<std::size_t> source(n);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t rem = flat, src = 0, stride = 1;
        for (std::size_t d = shape.size(); d-- > 0;) {
            const std::size_t idx = rem % shape[d];
            rem /= shape[d];
            if (a.dim(d) != 1) src += idx * stride;
            stride *= a.dim(d);
        }
        source[flat] = src;
    }
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[source[i]];
    return record<T>("broadcast_to", std::move(shape), std::move(out), {&a},
                     [a, source = std::move(source)](std::span<const T> g) {
                         std::vector<T> ga(a.numel(), T(0));
                         for (std::size_t i = 0; i < g.size(); ++i) ga[source[i]] += g[i];
                         send<T>(a, ga);
                     });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (auto v : a.data()) total += v;
    return record<T>("sum", Shape{}, {total}, {&a}, [a](std::span<const T> g) {
        std::vector<T> ga(a.numel(), g[0]);
        send<T>(a, ga);
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    const T n = static_cast<T>(a.numel());
    T total = 0;
    for (auto v : a.data()) total += v;
    return record<T>("mean", Shape{}, {total / n}, {&a}, [a, n](std::span<const T> g) {
        std::vector<T> ga(a.numel(), g[0] / n);
        send<T>(a, ga);
    });
}

/// Sum over one axis; the axis is removed from the shape.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
    const auto s = detail::split_axis("sum_axis", a.shape(), axis);
    Shape shape = a.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<T> out(s.outer * s.inner, T(0));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += a[(o * s.extent + e) * s.inner + i];
    return record<T>("sum_axis", std::move(shape), std::move(out), {&a}, [a, s](std::span<const T> g) {
        std::vector<T> ga(a.numel());
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e)
                for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.extent + e) * s.inner + i] = g[o * s.inner + i];
        send<T>(a, ga);
    });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
    const auto s = detail::split_axis("mean_axis", a.shape(), axis);
    return scale(sum_axis(a, axis), T(1) / static_cast<T>(s.extent));
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
    auto y = std::make_shared<std::vector<T>>(out);
    return record<T>("exp", a.shape(), std::move(out), {&a}, [a, y](std::span<const T> g) {
        std::vector<T> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*y)[i];
        send<T>(a, ga);
    });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    const T floor = static_cast<T>(kLogClamp);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a[i], floor));
    return record<T>("log", a.shape(), std::move(out), {&a}, [a, floor](std::span<const T> g) {
        std::vector<T> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = a[i] >= floor ? g[i] / a[i] : T(0);
        send<T>(a, ga);
    });
}

template <typename T>
T sigmoid_value(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(a[i]);
    auto y = std::make_shared<std::vector<T>>(out);
    return record<T>("sigmoid", a.shape(), std::move(out), {&a}, [a, y](std::span<const T> g) {
        std::vector<T> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*y)[i] * (T(1) - (*y)[i]);
        send<T>(a, ga);
    });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0 ? a[i] : slope * a[i];
    return record<T>("leaky_relu", a.shape(), std::move(out), {&a}, [a, slope](std::span<const T> g) {
        std::vector<T> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = a[i] > 0 ? g[i] : slope * g[i];
        send<T>(a, ga);
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return leaky_relu(a, T(0));
}

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
    const auto s = detail::split_axis("softmax", a.shape(), axis);
    std::vector<T> out(a.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const auto at = [&](std::size_t e) { return (o * s.extent + e) * s.inner + i; };
            T peak = a[at(0)];
            for (std::size_t e = 1; e < s.extent; ++e) peak = std::max(peak, a[at(e)]);
            T total = 0;
            for (std::size_t e = 0; e < s.extent; ++e) total += (out[at(e)] = std::exp(a[at(e)] - peak));
            for (std::size_t e = 0; e < s.extent; ++e) out[at(e)] /= total;
        }
    }
    auto y = std::make_shared<std::vector<T>>(out);
    return record<T>("softmax", a.shape(), std::move(out), {&a}, [a, y, s](std::span<const T> g) {
        std::vector<T> ga(g.size());
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const auto at = [&](std::size_t e) { return (o * s.extent + e) * s.inner + i; };
                T dot = 0;
                for (std::size_t e = 0; e < s.extent; ++e) dot += g[at(e)] * (*y)[at(e)];
                for (std::size_t e = 0; e < s.extent; ++e) ga[at(e)] = (*y)[at(e)] * (g[at(e)] - dot);
            }
        }
        send<T>(a, ga);
    });
}

}  // namespace gacunet
