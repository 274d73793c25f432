#pragma once

// Graph layers applied to the bottleneck feature grid: graph attention,
// Chebyshev spectral filtering and the center-of-mass layer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gacunet/tensor.hpp"

namespace gacunet {

/// Undirected simple graph. Edges are stored once with first < second;
/// self-loops are never stored as edges, only flagged for attention.
class Graph {
   public:
    Graph(std::size_t node_count, std::vector<std::pair<std::size_t, std::size_t>> edges,
          bool attention_self_loops = true)
        : node_count_(node_count), self_loops_(attention_self_loops), neighbors_(node_count) {
        std::set<std::pair<std::size_t, std::size_t>> seen;
        for (auto [u, v] : edges) {
            if (u >= node_count || v >= node_count)
                throw ShapeError("graph: edge (" + std::to_string(u) + ", " + std::to_string(v) +
                                 ") out of range for " + std::to_string(node_count) + " nodes");
            if (u == v) throw ShapeError("graph: self-loop edges are implicit, got (" + std::to_string(u) + ", " + std::to_string(v) + ")");
            if (u > v) std::swap(u, v);
            if (!seen.insert({u, v}).second)
                throw ShapeError("graph: duplicate edge (" + std::to_string(u) + ", " + std::to_string(v) + ")");
            edges_.emplace_back(u, v);
            neighbors_[u].push_back(v);
            neighbors_[v].push_back(u);
        }
        for (auto& n : neighbors_) std::sort(n.begin(), n.end());
    }

    std::size_t node_count() const { return node_count_; }
    std::size_t edge_count() const { return edges_.size(); }
    const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }
    const std::vector<std::size_t>& neighbors(std::size_t i) const { return neighbors_.at(i); }
    std::size_t degree(std::size_t i) const { return neighbors_.at(i).size(); }
    bool attention_self_loops() const { return self_loops_; }

    std::vector<std::size_t> degrees() const {
        std::vector<std::size_t> d(node_count_);
        for (std::size_t i = 0; i < node_count_; ++i) d[i] = degree(i);
        return d;
    }

    /// Attention neighbourhood of i: itself (if self-loops are on) followed by
    /// its neighbours in ascending order.
    std::vector<std::size_t> attention_neighborhood(std::size_t i) const {
        std::vector<std::size_t> out;
        if (self_loops_) out.push_back(i);
        out.insert(out.end(), neighbors_.at(i).begin(), neighbors_.at(i).end());
        return out;
    }

   private:
    std::size_t node_count_;
    bool self_loops_;
    std::vector<std::pair<std::size_t, std::size_t>> edges_;
    std::vector<std::vector<std::size_t>> neighbors_;
};

/// Pixel grid graph with row-major node ids; connectivity 4 or 8.
inline Graph build_grid_graph(std::size_t height, std::size_t width, int connectivity = 4) {
    if (height == 0 || width == 0) throw ShapeError("build_grid_graph: extents must be >= 1");
    if (connectivity != 4 && connectivity != 8)
        throw ShapeError("build_grid_graph: connectivity must be 4 or 8, got " + std::to_string(connectivity));
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    const auto id = [width](std::size_t r, std::size_t c) { return r * width + c; };
    for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
            if (c + 1 < width) edges.emplace_back(id(r, c), id(r, c + 1));
            if (r + 1 < height) edges.emplace_back(id(r, c), id(r + 1, c));
            if (connectivity == 8 && r + 1 < height) {
                if (c + 1 < width) edges.emplace_back(id(r, c), id(r + 1, c + 1));
                if (c > 0) edges.emplace_back(id(r, c), id(r + 1, c - 1));
            }
        }
    }
    return Graph(height * width, std::move(edges));
}

/// L_sym = I - D^-1/2 A D^-1/2 (zero rows for isolated nodes) and its scaled
/// form L~ = L_sym - I, stored sparsely.
class NormalizedLaplacian {
   public:
    explicit NormalizedLaplacian(const Graph& graph) : n_(graph.node_count()), sym_diag_(n_), rows_(n_) {
        for (std::size_t i = 0; i < n_; ++i) {
            const std::size_t di = graph.degree(i);
            sym_diag_[i] = di > 0 ? 1.0 : 0.0;
            for (std::size_t j : graph.neighbors(i))
                rows_[i].push_back({j, -1.0 / std::sqrt(static_cast<double>(di) * static_cast<double>(graph.degree(j)))});
        }
    }

    std::size_t node_count() const { return n_; }

    std::vector<double> dense_sym() const {
        std::vector<double> m(n_ * n_, 0.0);
        for (std::size_t i = 0; i < n_; ++i) {
            m[i * n_ + i] = sym_diag_[i];
            for (const auto& e : rows_[i]) m[i * n_ + e.col] = e.weight;
        }
        return m;
    }

    std::vector<double> dense_scaled() const {
        auto m = dense_sym();
        for (std::size_t i = 0; i < n_; ++i) m[i * n_ + i] -= 1.0;
        return m;
    }

    /// out[n x f] = L~ x[n x f]
    template <typename T>
    void apply_scaled(const T* x, std::size_t f, T* out) const {
        for (std::size_t i = 0; i < n_; ++i) {
            const T d = static_cast<T>(sym_diag_[i] - 1.0);
            for (std::size_t c = 0; c < f; ++c) out[i * f + c] = d * x[i * f + c];
            for (const auto& e : rows_[i]) {
                const T w = static_cast<T>(e.weight);
                for (std::size_t c = 0; c < f; ++c) out[i * f + c] += w * x[e.col * f + c];
            }
        }
    }

   private:
    struct Entry {
        std::size_t col;
        double weight;
    };
    std::size_t n_;
    std::vector<double> sym_diag_;
    std::vector<std::vector<Entry>> rows_;
};

inline NormalizedLaplacian normalized_laplacian(const Graph& graph) { return NormalizedLaplacian(graph); }

/// Y = L~ X for node features X (N x F). L~ is symmetric, so the backward pass
/// applies the same operator.
template <typename T>
Tensor<T> scaled_laplacian_apply(const std::shared_ptr<const NormalizedLaplacian>& lap, const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(0) != lap->node_count())
        throw ShapeError("scaled_laplacian_apply: features " + to_string(x.shape()) + " do not match " +
                         std::to_string(lap->node_count()) + " nodes");
    const std::size_t f = x.dim(1);
    std::vector<T> out(x.numel());
    lap->apply_scaled(x.data().data(), f, out.data());
    return record<T>("laplacian", x.shape(), std::move(out), {&x}, [lap, x, f](std::span<const T> g) {
        std::vector<T> gx(g.size());
        lap->apply_scaled(g.data(), f, gx.data());
        send<T>(x, gx);
    });
}

inline constexpr double kAttentionSlope = 0.2;

template <typename T>
struct GatParams {
    Tensor<T> weight;     // F' x F
    Tensor<T> attention;  // 2F'
    T slope = static_cast<T>(kAttentionSlope);
};

template <typename T>
struct ChebParams {
    std::vector<Tensor<T>> theta;  // K+1 matrices, each F' x F

    std::size_t order() const { return theta.empty() ? 0 : theta.size() - 1; }
};

/// Attention coefficients alpha_ij for projected features Z = X W^T (N x F').
/// Row i lists coefficients in the order of graph.attention_neighborhood(i).
template <typename T>
std::vector<std::vector<T>> attention_coefficients(const Graph& graph, std::span<const T> z, std::size_t f,
                                                   std::span<const T> a, T slope) {
    const std::size_t n = graph.node_count();
    std::vector<T> src(n, T(0)), dst(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < f; ++c) {
            src[i] += a[c] * z[i * f + c];
            dst[i] += a[f + c] * z[i * f + c];
        }
    }
    std::vector<std::vector<T>> alpha(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto hood = graph.attention_neighborhood(i);
        if (hood.empty()) continue;
        auto& row = alpha[i];
        row.resize(hood.size());
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < hood.size(); ++k) {
            const T pre = src[i] + dst[hood[k]];
            row[k] = pre > 0 ? pre : slope * pre;
            peak = std::max(peak, row[k]);
        }
        T total = 0;
        for (auto& v : row) total += (v = std::exp(v - peak));
        for (auto& v : row) v /= total;
    }
    return alpha;
}

/// Attention-weighted neighbourhood aggregation: out_i = sum_j alpha_ij z_j.
/// Differentiable in both the projected features and the attention vector.
template <typename T>
Tensor<T> attention_aggregate(const Tensor<T>& z, const Tensor<T>& attention, std::shared_ptr<const Graph> graph,
                              T slope) {
    if (z.rank() != 2 || z.dim(0) != graph->node_count())
        throw ShapeError("gat_conv: projected features " + to_string(z.shape()) + " do not match " +
                         std::to_string(graph->node_count()) + " nodes");
    const std::size_t n = z.dim(0), f = z.dim(1);
    if (attention.rank() != 1 || attention.dim(0) != 2 * f)
        throw ShapeError("gat_conv: attention vector " + to_string(attention.shape()) + " does not match " +
                         std::to_string(2 * f) + " = 2 x output features");
    auto alpha = std::make_shared<std::vector<std::vector<T>>>(
        attention_coefficients<T>(*graph, z.data(), f, attention.data(), slope));
    std::vector<T> out(n * f, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto hood = graph->attention_neighborhood(i);
        for (std::size_t k = 0; k < hood.size(); ++k)
            for (std::size_t c = 0; c < f; ++c) out[i * f + c] += (*alpha)[i][k] * z[hood[k] * f + c];
    }
    return record<T>(
        "gat_aggregate", Shape{n, f}, std::move(out), {&z, &attention},
        [z, attention, graph, alpha, slope, n, f](std::span<const T> g) {
            std::vector<T> gz(n * f, T(0)), gsrc(n, T(0)), gdst(n, T(0));
            for (std::size_t i = 0; i < n; ++i) {
                const auto hood = graph->attention_neighborhood(i);
                const auto& row = (*alpha)[i];
                std::vector<T> galpha(hood.size(), T(0));
                T weighted = 0;
                for (std::size_t k = 0; k < hood.size(); ++k) {
                    const std::size_t j = hood[k];
                    for (std::size_t c = 0; c < f; ++c) {
                        gz[j * f + c] += row[k] * g[i * f + c];
                        galpha[k] += g[i * f + c] * z[j * f + c];
                    }
                    weighted += row[k] * galpha[k];
                }
                T src_i = 0;
                for (std::size_t c = 0; c < f; ++c) src_i += attention[c] * z[i * f + c];
                for (std::size_t k = 0; k < hood.size(); ++k) {
                    const std::size_t j = hood[k];
                    T dst_j = 0;
                    for (std::size_t c = 0; c < f; ++c) dst_j += attention[f + c] * z[j * f + c];
                    const T pre = src_i + dst_j;
                    const T glogit = row[k] * (galpha[k] - weighted) * (pre > 0 ? T(1) : slope);
                    gsrc[i] += glogit;
                    gdst[j] += glogit;
                }
            }
            if (attention.requires_grad()) {
                std::vector<T> ga(2 * f, T(0));
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < f; ++c) {
                        ga[c] += gsrc[i] * z[i * f + c];
                        ga[f + c] += gdst[i] * z[i * f + c];
                    }
                send<T>(attention, ga);
            }
            if (z.requires_grad()) {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < f; ++c) gz[i * f + c] += attention[c] * gsrc[i] + attention[f + c] * gdst[i];
                send<T>(z, gz);
            }
        });
}

/// Graph attention layer on node features X (N x F):
/// h'_i = LeakyReLU(sum_j alpha_ij W h_j) over the attention neighbourhood.
template <typename T>
Tensor<T> gat_conv(const Tensor<T>& features, std::shared_ptr<const Graph> graph, const GatParams<T>& params) {
    if (features.rank() != 2 || params.weight.rank() != 2 || params.weight.dim(1) != features.dim(1))
        throw ShapeError("gat_conv: features " + to_string(features.shape()) + " do not match weight " +
                         to_string(params.weight.shape()));
    const Tensor<T> projected = matmul(features, transpose(params.weight));
    return leaky_relu(attention_aggregate(projected, params.attention, std::move(graph), params.slope), params.slope);
}

/// Chebyshev filter Y = sum_k T_k(L~) X theta_k^T using the three-term
/// recurrence T_k = 2 L~ T_{k-1} - T_{k-2}.
template <typename T>
Tensor<T> cheb_conv(const Tensor<T>& features, const std::shared_ptr<const NormalizedLaplacian>& lap,
                    const ChebParams<T>& params) {
    if (params.theta.empty()) throw ShapeError("cheb_conv: need at least theta_0");
    const Shape& first = params.theta.front().shape();
    for (const auto& th : params.theta)
        if (th.shape() != first || th.rank() != 2)
            throw ShapeError("cheb_conv: inconsistent filter shapes " + to_string(first) + " vs " + to_string(th.shape()));
    if (features.rank() != 2 || features.dim(1) != first[1] || features.dim(0) != lap->node_count())
        throw ShapeError("cheb_conv: features " + to_string(features.shape()) + " do not match filter " +
                         to_string(first) + " on " + std::to_string(lap->node_count()) + " nodes");

    Tensor<T> prev = features;
    Tensor<T> out = matmul(prev, transpose(params.theta[0]));
    if (params.theta.size() == 1) return out;
    Tensor<T> cur = scaled_laplacian_apply(lap, features);
    out = add(out, matmul(cur, transpose(params.theta[1])));
    for (std::size_t k = 2; k < params.theta.size(); ++k) {
        Tensor<T> next = sub(scale(scaled_laplacian_apply(lap, cur), T(2)), prev);
        out = add(out, matmul(next, transpose(params.theta[k])));
        prev = cur;
        cur = next;
    }
    return out;
}

template <typename T>
struct CenterOfMassOutput {
    Tensor<T> centroids;  // C x 2: (row, col) in [0, 1]
    Tensor<T> augmented;  // (C + 2) x H x W
};

/// Normalized (row, col) coordinates of every pixel: position / (extent - 1),
/// or 0.5 for a unit extent.
template <typename T>
Tensor<T> pixel_coordinates(std::size_t h, std::size_t w) {
    const auto norm = [](std::size_t p, std::size_t extent) {
        return extent == 1 ? T(0.5) : static_cast<T>(p) / static_cast<T>(extent - 1);
    };
    std::vector<T> coords(h * w * 2);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            coords[(r * w + c) * 2] = norm(r, h);
            coords[(r * w + c) * 2 + 1] = norm(c, w);
        }
    return Tensor<T>(Shape{h * w, 2}, std::move(coords));
}

/// Soft spatial centroid of every channel (softmax over positions), plus the
/// feature map with two constant channels holding the channel-averaged row and
/// column centroids.
template <typename T>
CenterOfMassOutput<T> center_of_mass(const Tensor<T>& features) {
    if (features.rank() != 3)
        throw ShapeError("center_of_mass: features must be C x H x W, got " + to_string(features.shape()));
    const std::size_t c = features.dim(0), h = features.dim(1), w = features.dim(2);
    const Tensor<T> weights = softmax(reshape(features, Shape{c, h * w}), 1);
    Tensor<T> centroids = matmul(weights, pixel_coordinates<T>(h, w));
    const Tensor<T> averaged = reshape(mean_axis(centroids, 0), Shape{2, 1});
    const Tensor<T> planes = reshape(broadcast_to(averaged, Shape{2, h * w}), Shape{2, h, w});
    return {centroids, concat<T>({features, planes}, 0)};
}

}  // namespace gacunet
