#pragma once

// Minibatch training of a Model with Adam, per-epoch seeded shuffling, name
// prefix freezing and best-validation selection.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gacunet/conv.hpp"
#include "gacunet/dataio.hpp"
#include "gacunet/error.hpp"
#include "gacunet/metrics.hpp"
#include "gacunet/model.hpp"
#include "gacunet/optim.hpp"

namespace gacunet {

template <typename T>
struct Sample {
    Tensor<T> input;   // C x H x W
    Tensor<T> target;  // K x H x W
    std::string id;
};

template <typename T>
Sample<T> make_sample(const ImagePair& pair) {
    return {to_tensor<T>(pair.image), to_tensor<T>(pair.mask), pair.source_id};
}

enum class LossKind { Bce, Dice };

inline std::string_view to_string(LossKind k) { return k == LossKind::Bce ? "bce" : "dice"; }

inline LossKind parse_loss(std::string_view s) {
    if (s == "bce") return LossKind::Bce;
    if (s == "dice") return LossKind::Dice;
    throw ConfigError("loss must be bce or dice, got '" + std::string(s) + "'");
}

template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
    return kind == LossKind::Bce ? bce_loss(pred, target) : dice_loss(pred, target);
}

/// Seeded Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng() % (i + 1)]);
    return order;
}

inline bool matches_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
    for (const auto& p : prefixes)
        if (!p.empty() && name.compare(0, p.size(), p) == 0) return true;
    return false;
}

/// Metrics of the first output channel against the first target channel.
template <typename T>
MetricReport evaluate_samples(const Model<T>& model, const std::vector<Sample<T>>& samples, double threshold = 0.5) {
    NoGradGuard guard;
    return evaluate(
        samples.size(),
        [&](std::size_t i) {
            const auto out = forward(model, samples[i].input);
            const std::size_t plane = out.dim(1) * out.dim(2);
            return std::vector<T>(out.data().begin(), out.data().begin() + static_cast<std::ptrdiff_t>(plane));
        },
        [&](std::size_t i) {
            const auto& t = samples[i].target;
            BinaryMask m(t.dim(1), t.dim(2));
            for (std::size_t k = 0; k < m.bits.size(); ++k) m.bits[k] = t[k] > T(0.5) ? 1 : 0;
            return m;
        },
        [&](std::size_t i) { return samples[i].id; }, threshold);
}

struct TrainOptions {
    LossKind loss = LossKind::Dice;
    std::size_t epochs = 1;
    std::size_t batch_size = 4;
    AdamOptions adam;
    std::uint64_t seed = 0;
    std::vector<std::string> freeze;
    double prediction_threshold = 0.5;
    std::size_t eval_every = 1;
    double target_train_dice = 0;  // stop once the train-set Dice score reaches this (0: never)
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0;
    std::optional<double> val_iou;
    std::optional<double> val_dice;
    std::optional<double> train_dice;
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    std::optional<double> best_val_dice;
    bool reached_target = false;
};

/// Trains in place. With validation samples, the parameters of the epoch with
/// the highest validation Dice score (earliest on ties) are restored at the end.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<Sample<T>>& train_set, const std::vector<Sample<T>>& val_set,
                  const TrainOptions& opt, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    if (train_set.empty()) throw DataError("train: empty training set");
    if (opt.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (opt.eval_every == 0) throw ConfigError("eval_every must be positive");

    std::vector<Tensor<T>> handles;
    std::vector<bool> flags;
    for (auto& p : model.parameters()) {
        handles.push_back(p.value);
        flags.push_back(p.value.requires_grad());
        handles.back().set_requires_grad(!matches_prefix(p.name, opt.freeze));
    }
    const auto restore_flags = [&] {
        for (std::size_t i = 0; i < handles.size(); ++i) handles[i].set_requires_grad(flags[i]);
    };

    Adam<T> adam(handles, opt.adam);
    std::mt19937_64 rng(opt.seed);
    TrainResult result;
    std::vector<std::vector<T>> best;
    Tape<T>::current().clear();
    try {
        for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
            const auto order = shuffled_indices(train_set.size(), rng);
            double loss_sum = 0;
            for (std::size_t start = 0, batch = 0; start < order.size(); start += opt.batch_size, ++batch) {
                const std::size_t end = std::min(order.size(), start + opt.batch_size);
                const T weight = T(1) / static_cast<T>(end - start);
                adam.zero_grad();
                for (std::size_t k = start; k < end; ++k) {
                    const auto& s = train_set[order[k]];
                    const Tensor<T> loss = segmentation_loss(forward(model, s.input), s.target, opt.loss);
                    const double value = static_cast<double>(loss.item());
                    if (!std::isfinite(value))
                        throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                           std::to_string(batch) + " (sample " + s.id + ")");
                    loss_sum += value;
                    const Tensor<T> scaled = scale(loss, weight);
                    if (scaled.requires_grad())
                        backward(scaled);
                    else
                        Tape<T>::current().clear();
                }
                adam.step();
            }
            EpochRecord rec;
            rec.epoch = epoch;
            rec.loss = loss_sum / static_cast<double>(train_set.size());
            const bool eval_now = epoch % opt.eval_every == 0 || epoch == opt.epochs;
            if (eval_now && !val_set.empty()) {
                const auto report = evaluate_samples(model, val_set, opt.prediction_threshold);
                rec.val_iou = report.mean_iou;
                rec.val_dice = report.mean_dice;
                if (!result.best_val_dice || report.mean_dice > *result.best_val_dice) {
                    result.best_val_dice = report.mean_dice;
                    result.best_epoch = epoch;
                    best.clear();
                    for (const auto& p : model.parameters()) best.emplace_back(p.value.data().begin(), p.value.data().end());
                }
            }
            if (eval_now && opt.target_train_dice > 0) {
                rec.train_dice = evaluate_samples(model, train_set, opt.prediction_threshold).mean_dice;
                result.reached_target = *rec.train_dice >= opt.target_train_dice;
            }
            result.epochs.push_back(rec);
            if (on_epoch) on_epoch(rec);
            if (result.reached_target) break;
        }
    } catch (...) {
        Tape<T>::current().clear();
        restore_flags();
        throw;
    }
    restore_flags();
    adam.zero_grad();
    if (!best.empty() && result.best_epoch != result.epochs.back().epoch)
        for (std::size_t i = 0; i < best.size(); ++i) std::copy(best[i].begin(), best[i].end(), handles[i].data().begin());
    if (best.empty()) result.best_epoch = result.epochs.back().epoch;
    return result;
}

}  // namespace gacunet
