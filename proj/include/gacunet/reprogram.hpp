#pragma once

// Reprogramming a frozen model: a trainable elementwise affine transform of the
// input and a trainable 1x1 convolution on the output, with the base weights
// guarded by a checksum of their serialization.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gacunet/conv.hpp"
#include "gacunet/model.hpp"
#include "gacunet/optim.hpp"
#include "gacunet/train.hpp"

namespace gacunet {

/// X~ = W * X + B per channel. W and B are m x n (shared by all channels) or
/// C x m x n (one pair per channel).
template <typename T>
Tensor<T> input_transform(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (w.shape() != b.shape())
        throw ShapeError("input_transform: shape mismatch " + to_string(w.shape()) + " vs " + to_string(b.shape()));
    if (x.rank() != 3) throw ShapeError("input_transform: input must be C x m x n, got " + to_string(x.shape()));
    const Shape spatial{x.dim(1), x.dim(2)};
    if (w.shape() == x.shape()) return add(mul(x, w), b);
    if (w.shape() != spatial)
        throw ShapeError("input_transform: shape mismatch " + to_string(x.shape()) + " vs " + to_string(w.shape()));
    const Shape one{1, x.dim(1), x.dim(2)};
    return add(mul(x, broadcast_to(reshape(w, one), x.shape())), broadcast_to(reshape(b, one), x.shape()));
}

/// Per-pixel linear map C_old -> C_new; kernel is C_new x C_old x 1 x 1.
template <typename T>
Tensor<T> output_map(const Tensor<T>& base_out, const Tensor<T>& kernel, const Tensor<T>& bias, bool apply_sigmoid) {
    if (kernel.rank() != 4 || kernel.dim(2) != 1 || kernel.dim(3) != 1)
        throw ShapeError("output_map: kernel must be C_new x C_old x 1 x 1, got " + to_string(kernel.shape()));
    if (base_out.rank() != 3 || base_out.dim(0) != kernel.dim(1))
        throw ShapeError("output_map: channel mismatch " + to_string(base_out.shape()) + " vs " + to_string(kernel.shape()));
    const Tensor<T> mapped = conv2d(base_out, ConvParams<T>{kernel, bias, 1, 1, 0});
    return apply_sigmoid ? sigmoid(mapped) : mapped;
}

/// Sigmoid only for a single (binary) output channel.
template <typename T>
Tensor<T> output_map(const Tensor<T>& base_out, const Tensor<T>& kernel, const Tensor<T>& bias) {
    return output_map(base_out, kernel, bias, kernel.rank() > 0 && kernel.dim(0) == 1);
}

struct ReprogramOptions {
    std::size_t out_channels = 1;
    bool per_channel = false;
    std::uint64_t seed = 0;
};

template <typename T>
std::uint64_t model_checksum(const Model<T>& model) {
    return fnv1a64(serialize_model(model));
}

template <typename T>
class ReprogramWrapper {
   public:
    ReprogramWrapper(std::shared_ptr<const Model<T>> base, ReprogramOptions options)
        : base_(std::move(base)), options_(options) {
        if (!base_) throw Error("reprogram: missing base model");
        for (const auto& p : base_->parameters()) {
            Tensor<T> handle = p.value;
            handle.set_requires_grad(false);
        }
        checksum_ = model_checksum(*base_);
        const auto& spec = base_->spec();
        const std::size_t s = spec.input_size, c_old = spec.out_channels, c_new = options_.out_channels;
        if (c_new == 0) throw ConfigError("reprogram: out_channels must be positive");
        const Shape transform = options_.per_channel ? Shape{spec.in_channels, s, s} : Shape{s, s};
        params_.push_back({"input.weight", Tensor<T>(transform, T(1)), 0, 0, false});
        params_.push_back({"input.bias", Tensor<T>(transform, T(0)), 0, 0, true});
        params_.push_back({"map.weight", Tensor<T>(Shape{c_new, c_old, 1, 1}), c_old, c_new, false});
        params_.push_back({"map.bias", Tensor<T>(Shape{c_new}, T(0)), 0, 0, true});
        std::mt19937_64 rng(options_.seed);
        const double bound = std::sqrt(6.0 / static_cast<double>(c_old + c_new));
        for (auto& v : params_[2].value.data()) v = static_cast<T>(uniform(rng, -bound, bound));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        const Tensor<T> transformed = input_transform(x, params_[0].value, params_[1].value);
        return output_map(gacunet::forward(*base_, transformed), params_[2].value, params_[3].value);
    }

    std::vector<NamedParameter<T>>& parameters() { return params_; }
    const std::vector<NamedParameter<T>>& parameters() const { return params_; }
    const Model<T>& base() const { return *base_; }
    const ReprogramOptions& options() const { return options_; }

    /// Checksum of the base serialization taken when the wrapper was built.
    std::uint64_t base_checksum() const { return checksum_; }

    void verify_base() const {
        const auto now = model_checksum(*base_);
        if (now != checksum_)
            throw InvariantError("frozen base changed: checksum " + hex64(checksum_) + " became " + hex64(now));
    }

   private:
    std::shared_ptr<const Model<T>> base_;
    ReprogramOptions options_;
    std::vector<NamedParameter<T>> params_;
    std::uint64_t checksum_ = 0;
};

struct ReprogramTrainOptions {
    LossKind loss = LossKind::Dice;
    std::size_t steps = 100;
    std::size_t batch_size = 4;
    AdamOptions adam;
    std::uint64_t seed = 0;
};

struct ReprogramResult {
    double initial_loss = 0;  // mean loss over the dataset before the first step
    double final_loss = 0;    // and after the last
    std::vector<double> step_losses;
};

template <typename T>
double mean_dataset_loss(const ReprogramWrapper<T>& wrapper, const std::vector<Sample<T>>& data, LossKind kind) {
    NoGradGuard guard;
    double total = 0;
    for (const auto& s : data) total += static_cast<double>(segmentation_loss(wrapper.forward(s.input), s.target, kind).item());
    return total / static_cast<double>(data.size());
}

/// Trains only the wrapper parameters. Each step draws the next minibatch from
/// a seeded shuffle of the data, reshuffled after every pass.
template <typename T>
ReprogramResult reprogram_train(ReprogramWrapper<T>& wrapper, const std::vector<Sample<T>>& data,
                                const ReprogramTrainOptions& opt,
                                const std::function<void(std::size_t, double)>& on_step = {}) {
    if (data.empty()) throw DataError("reprogram: empty dataset");
    if (opt.batch_size == 0) throw ConfigError("batch_size must be positive");
    wrapper.verify_base();
    std::vector<Tensor<T>> handles;
    for (auto& p : wrapper.parameters()) {
        handles.push_back(p.value);
        handles.back().set_requires_grad(true);
    }
    Adam<T> adam(handles, opt.adam);
    std::mt19937_64 rng(opt.seed);
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    ReprogramResult result;
    result.initial_loss = mean_dataset_loss(wrapper, data, opt.loss);
    Tape<T>::current().clear();
    for (std::size_t step = 1; step <= opt.steps; ++step) {
        adam.zero_grad();
        double step_loss = 0;
        const T weight = T(1) / static_cast<T>(opt.batch_size);
        for (std::size_t k = 0; k < opt.batch_size; ++k) {
            if (cursor == order.size()) {
                order = shuffled_indices(data.size(), rng);
                cursor = 0;
            }
            const auto& s = data[order[cursor++]];
            const Tensor<T> loss = segmentation_loss(wrapper.forward(s.input), s.target, opt.loss);
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value))
                throw NumericError("non-finite loss in reprogramming step " + std::to_string(step) + " (sample " + s.id + ")");
            step_loss += value / static_cast<double>(opt.batch_size);
            backward(scale(loss, weight));
        }
        adam.step();
        result.step_losses.push_back(step_loss);
        if (on_step) on_step(step, step_loss);
    }
    adam.zero_grad();
    for (auto& h : handles) h.set_requires_grad(false);
    result.final_loss = mean_dataset_loss(wrapper, data, opt.loss);
    wrapper.verify_base();
    return result;
}

// ---------------------------------------------------------------------------
// Wrapper files: the .gacm container with the reprogram payload kind. The text
// block records the wrapper options and the base checksum; the payload holds
// input.weight, input.bias, map.weight, map.bias.

template <typename T>
std::vector<std::uint8_t> serialize_wrapper(const ReprogramWrapper<T>& w) {
    std::ostringstream text;
    text << "out_channels=" << w.options().out_channels << "\nper_channel=" << (w.options().per_channel ? 1 : 0)
         << "\nseed=" << w.options().seed << "\nbase_checksum=" << hex64(w.base_checksum()) << "\n";
    auto out = encode_header(PayloadKind::Reprogram, sizeof(T), text.str());
    for (const auto& p : w.parameters()) detail::put_values<T>(out, p.value.data());
    return out;
}

template <typename T>
ReprogramWrapper<T> deserialize_wrapper(std::span<const std::uint8_t> bytes, std::shared_ptr<const Model<T>> base) {
    const auto h = decode_header(bytes);
    if (h.kind != PayloadKind::Reprogram) throw DataError("file holds a model, not a reprogramming wrapper");
    ReprogramOptions opt;
    std::string checksum;
    std::istringstream in(h.text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "out_channels") opt.out_channels = detail::parse_unsigned(key, value);
        else if (key == "per_channel") opt.per_channel = detail::parse_flag(key, value);
        else if (key == "seed") opt.seed = detail::parse_unsigned(key, value);
        else if (key == "base_checksum") checksum = value;
        else throw DataError("wrapper header: unknown field '" + key + "'");
    }
    ReprogramWrapper<T> w(std::move(base), opt);
    if (checksum != hex64(w.base_checksum()))
        throw DataError("wrapper was trained against base " + checksum + ", given base is " + hex64(w.base_checksum()));
    std::vector<std::span<T>> targets;
    for (auto& p : w.parameters()) targets.push_back(p.value.data());
    read_payload<T>(bytes, h, targets);
    return w;
}

}  // namespace gacunet
