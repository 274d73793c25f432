#pragma once

// Mask overlap metrics and their per-image/aggregate report.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gacunet/dataio.hpp"
#include "gacunet/error.hpp"

namespace gacunet {

struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : bits) n += b;
        return n;
    }

    static BinaryMask from_image(const Image& mask) {
        if (mask.channels != 1) throw ShapeError("BinaryMask: expected a single-channel mask");
        BinaryMask out(mask.height, mask.width);
        for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = mask.data[i] > 0.5f ? 1 : 0;
        return out;
    }

    /// 1 where probability >= threshold.
    template <typename T>
    static BinaryMask threshold(std::span<const T> probs, std::size_t h, std::size_t w, double level) {
        if (probs.size() != h * w)
            throw ShapeError("BinaryMask: " + std::to_string(probs.size()) + " values for a " + std::to_string(h) + "x" +
                             std::to_string(w) + " mask");
        BinaryMask out(h, w);
        for (std::size_t i = 0; i < probs.size(); ++i) out.bits[i] = static_cast<double>(probs[i]) >= level ? 1 : 0;
        return out;
    }

    Image to_image() const {
        Image img(height, width, 1);
        for (std::size_t i = 0; i < bits.size(); ++i) img.data[i] = bits[i] ? 1.0f : 0.0f;
        return img;
    }
};

struct OverlapCounts {
    std::size_t intersection = 0;
    std::size_t predicted = 0;
    std::size_t truth = 0;

    std::size_t union_size() const { return predicted + truth - intersection; }
};

inline OverlapCounts overlap(const BinaryMask& pred, const BinaryMask& truth) {
    if (pred.height != truth.height || pred.width != truth.width)
        throw ShapeError("overlap: shape mismatch [" + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         "] vs [" + std::to_string(truth.height) + "x" + std::to_string(truth.width) + "]");
    OverlapCounts c;
    for (std::size_t i = 0; i < pred.bits.size(); ++i) {
        c.intersection += pred.bits[i] & truth.bits[i];
        c.predicted += pred.bits[i];
        c.truth += truth.bits[i];
    }
    return c;
}

/// Both empty counts as perfect agreement.
inline double iou(const OverlapCounts& c) {
    const std::size_t u = c.union_size();
    return u == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(u);
}

inline double dice_score(const OverlapCounts& c) {
    const std::size_t total = c.predicted + c.truth;
    return total == 0 ? 1.0 : 2.0 * static_cast<double>(c.intersection) / static_cast<double>(total);
}

inline double iou(const BinaryMask& pred, const BinaryMask& truth) { return iou(overlap(pred, truth)); }
inline double dice_score(const BinaryMask& pred, const BinaryMask& truth) { return dice_score(overlap(pred, truth)); }

/// 0.50, 0.55, ..., 0.95.
inline std::vector<double> default_map_thresholds() {
    std::vector<double> t;
    for (int k = 0; k < 10; ++k) t.push_back(static_cast<double>(50 + 5 * k) / 100.0);
    return t;
}

/// Fraction of images whose IoU reaches the threshold.
inline double precision_at(std::span<const double> ious, double threshold) {
    if (ious.empty()) throw Error("precision_at: no images");
    std::size_t hits = 0;
    for (double v : ious) hits += v >= threshold ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(ious.size());
}

inline double mean_average_precision(std::span<const double> ious, std::span<const double> thresholds) {
    if (ious.empty()) throw Error("mean_average_precision: no images");
    if (thresholds.empty()) throw Error("mean_average_precision: no thresholds");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (thresholds[i] < thresholds[i - 1]) throw Error("mean_average_precision: thresholds must ascend");
    for (double v : ious)
        if (!(v >= 0.0 && v <= 1.0)) throw Error("mean_average_precision: IoU outside [0, 1]");
    std::size_t hits = 0;
    for (double t : thresholds)
        for (double v : ious) hits += v >= t ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(ious.size() * thresholds.size());
}

inline double mean_average_precision(std::span<const double> ious) {
    const auto t = default_map_thresholds();
    return mean_average_precision(ious, t);
}

struct ImageMetric {
    std::string id;
    double iou = 0;
    double dice = 0;
};

struct MetricReport {
    std::vector<ImageMetric> images;
    double mean_iou = 0;
    double mean_dice = 0;
    double map = 0;
    std::vector<std::pair<double, double>> precision_table;
    double prediction_threshold = 0.5;
};

inline MetricReport make_report(std::vector<ImageMetric> images, double prediction_threshold = 0.5,
                                const std::vector<double>& thresholds = default_map_thresholds()) {
    if (images.empty()) throw Error("evaluate: empty test set");
    MetricReport r;
    r.prediction_threshold = prediction_threshold;
    std::vector<double> ious;
    for (const auto& m : images) {
        r.mean_iou += m.iou;
        r.mean_dice += m.dice;
        ious.push_back(m.iou);
    }
    r.mean_iou /= static_cast<double>(images.size());
    r.mean_dice /= static_cast<double>(images.size());
    r.map = mean_average_precision(ious, thresholds);
    for (double t : thresholds) r.precision_table.emplace_back(t, precision_at(ious, t));
    r.images = std::move(images);
    return r;
}

/// `predict(i)` returns the probability map for test item i as a flat H*W
/// sequence; `truth(i)` returns its mask and `id(i)` its name.
template <typename Predict, typename Truth, typename Id>
MetricReport evaluate(std::size_t count, Predict&& predict, Truth&& truth, Id&& id, double prediction_threshold = 0.5) {
    if (count == 0) throw Error("evaluate: empty test set");
    std::vector<ImageMetric> images;
    for (std::size_t i = 0; i < count; ++i) {
        const BinaryMask t = truth(i);
        const auto probs = predict(i);
        const auto p = BinaryMask::threshold(std::span(probs.data(), probs.size()), t.height, t.width, prediction_threshold);
        const auto c = overlap(p, t);
        images.push_back({id(i), iou(c), dice_score(c)});
    }
    return make_report(std::move(images), prediction_threshold);
}

inline void write_report(std::ostream& os, const MetricReport& r) {
    std::ostringstream out;
    out << std::setprecision(10);
    for (const auto& m : r.images) out << m.id << '\t' << m.iou << '\t' << m.dice << '\n';
    out << "# images=" << r.images.size() << '\n';
    out << "# prediction_threshold=" << r.prediction_threshold << '\n';
    out << "# mean_iou=" << r.mean_iou << '\n';
    out << "# mean_dice=" << r.mean_dice << '\n';
    out << "# map=" << r.map << '\n';
    for (const auto& [t, p] : r.precision_table) out << "# precision@" << std::fixed << std::setprecision(2) << t
                                                     << '=' << std::defaultfloat << std::setprecision(10) << p << '\n';
    os << out.str();
}

}  // namespace gacunet
