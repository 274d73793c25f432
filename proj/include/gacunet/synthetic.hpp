#pragma once

// Procedural flood scenes: textured vegetation background with a few roofs,
// and smooth blob-shaped water regions. Also a multi-class labelling of the
// same scenes used to pretrain reprogramming bases.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gacunet/dataio.hpp"
#include "gacunet/tensor.hpp"

namespace gacunet {

/// Uniform double in [0, 1) from the top 53 bits of one engine draw, so the
/// sequence is identical across standard libraries.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

namespace detail {

struct Wave {
    double fy, fx, phase, amp;
};

struct Blob {
    double cy, cx, ry, rx, angle, wobble, lobes, phase;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double u = (dy * std::cos(angle) + dx * std::sin(angle)) / ry;
        const double v = (-dy * std::sin(angle) + dx * std::cos(angle)) / rx;
        const double r = std::sqrt(u * u + v * v);
        return r < 1.0 + wobble * std::sin(lobes * std::atan2(v, u) + phase);
    }
};

}  // namespace detail

/// One size x size scene. Identical (size, seed) always gives identical bytes.
inline ImagePair make_flood_pair(std::size_t size, std::uint64_t seed, std::string id) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const double s = static_cast<double>(size);
    const double two_pi = 2.0 * std::numbers::pi;

    const double ground[3] = {uniform(rng, 0.22, 0.34), uniform(rng, 0.38, 0.52), uniform(rng, 0.14, 0.24)};
    const double water[3] = {uniform(rng, 0.36, 0.46), uniform(rng, 0.32, 0.40), uniform(rng, 0.24, 0.32)};

    std::vector<detail::Wave> waves(4);
    for (auto& w : waves)
        w = {uniform(rng, 1.0, 6.0) / s, uniform(rng, 1.0, 6.0) / s, uniform(rng, 0.0, two_pi), uniform(rng, 0.02, 0.05)};

    std::vector<detail::Blob> blobs(1 + rng() % 3);
    for (auto& b : blobs)
        b = {uniform(rng, 0.2, 0.8) * s, uniform(rng, 0.2, 0.8) * s, uniform(rng, 0.12, 0.3) * s, uniform(rng, 0.12, 0.3) * s,
             uniform(rng, 0.0, std::numbers::pi), uniform(rng, 0.05, 0.2), static_cast<double>(2 + rng() % 4),
             uniform(rng, 0.0, two_pi)};

    struct Roof {
        std::size_t top, left, h, w;
        double shade;
    };
    std::vector<Roof> roofs(rng() % 4);
    for (auto& r : roofs) {
        r.h = 2 + rng() % std::max<std::size_t>(1, size / 10);
        r.w = 2 + rng() % std::max<std::size_t>(1, size / 10);
        r.top = rng() % std::max<std::size_t>(1, size - std::min(size, r.h));
        r.left = rng() % std::max<std::size_t>(1, size - std::min(size, r.w));
        r.shade = uniform(rng, 0.55, 0.75);
    }

    ImagePair pair{Image(size, size, 3), Image(size, size, 1), std::move(id)};
    for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
            const double y = static_cast<double>(r) + 0.5, x = static_cast<double>(c) + 0.5;
            const bool wet = std::any_of(blobs.begin(), blobs.end(), [&](const auto& b) { return b.contains(y, x); });
            double texture = 0;
            for (const auto& w : waves) texture += w.amp * std::sin(two_pi * (w.fy * y + w.fx * x) + w.phase);
            double rgb[3];
            if (wet) {
                const double ripple = 0.3 * texture + uniform(rng, -0.015, 0.015);
                for (int ch = 0; ch < 3; ++ch) rgb[ch] = water[ch] + ripple;
            } else {
                const double grain = uniform(rng, -0.05, 0.05);
                for (int ch = 0; ch < 3; ++ch) rgb[ch] = ground[ch] + texture + grain;
                for (const auto& roof : roofs)
                    if (r >= roof.top && r < roof.top + roof.h && c >= roof.left && c < roof.left + roof.w)
                        rgb[0] = rgb[1] = rgb[2] = roof.shade + 0.5 * grain;
            }
            for (int ch = 0; ch < 3; ++ch) pair.image.at(r, c, static_cast<std::size_t>(ch)) = static_cast<float>(std::clamp(rgb[ch], 0.0, 1.0));
            pair.mask.at(r, c) = wet ? 1.0f : 0.0f;
        }
    // Round through 8-bit so in-memory scenes equal what a file round trip gives.
    for (auto& v : pair.image.data) v = static_cast<float>(detail::to_byte(v)) / 255.0f;
    return pair;
}

inline std::string synthetic_id(std::size_t index) {
    std::string digits = std::to_string(index);
    return "flood_" + std::string(digits.size() < 3 ? 3 - digits.size() : 0, '0') + digits;
}

inline std::vector<ImagePair> make_flood_set(std::size_t count, std::size_t size, std::uint64_t seed) {
    std::vector<ImagePair> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(make_flood_pair(size, seed * 1000003ULL + i, synthetic_id(i)));
    return out;
}

/// Writes `<id>.ppm` and `<id>.pgm` for each pair.
inline void write_pairs(const std::vector<ImagePair>& pairs, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& p : pairs) {
        save_image(p.image, dir / (p.source_id + ".ppm"));
        save_mask(p.mask, dir / (p.source_id + ".pgm"));
    }
}

/// K x H x W multi-label target: water, dry land, then K - 2 brightness bands
/// of the land pixels.
template <typename T>
Tensor<T> multiclass_target(const ImagePair& pair, std::size_t classes) {
    if (classes < 2) throw ConfigError("multiclass_target: need at least 2 classes");
    const std::size_t h = pair.mask.height, w = pair.mask.width, plane = h * w;
    std::vector<T> out(classes * plane, T(0));
    const std::size_t bands = classes - 2;
    for (std::size_t p = 0; p < plane; ++p) {
        const bool wet = pair.mask.data[p] > 0.5f;
        out[(wet ? 0 : 1) * plane + p] = T(1);
        if (wet || bands == 0) continue;
        const double lum = (pair.image.data[p * 3] + pair.image.data[p * 3 + 1] + pair.image.data[p * 3 + 2]) / 3.0;
        const auto band = std::min(bands - 1, static_cast<std::size_t>(std::clamp(lum, 0.0, 1.0) * 2.0 * bands));
        out[(2 + band) * plane + p] = T(1);
    }
    return Tensor<T>(Shape{classes, h, w}, std::move(out));
}

}  // namespace gacunet
