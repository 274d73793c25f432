#pragma once

// The driver's commands. Each one reads a resolved RunConfig, writes its files
// under out_dir, prints a short summary and returns a process exit code.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gacunet/config.hpp"
#include "gacunet/dataio.hpp"
#include "gacunet/gradcheck_suite.hpp"
#include "gacunet/metrics.hpp"
#include "gacunet/model.hpp"
#include "gacunet/reprogram.hpp"
#include "gacunet/synthetic.hpp"
#include "gacunet/train.hpp"

namespace gacunet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

namespace detail {

inline std::filesystem::path output_dir(const RunConfig& cfg) {
    const std::filesystem::path dir = cfg.require("out_dir");
    std::filesystem::create_directories(dir);
    return dir;
}

/// True when `child` is `parent` or lies below it.
inline bool is_within(const std::filesystem::path& child, const std::filesystem::path& parent) {
    const auto rel = std::filesystem::weakly_canonical(child).lexically_relative(std::filesystem::weakly_canonical(parent));
    return !rel.empty() && *rel.begin() != "..";
}

/// Runs f.template operator()<T>() with T = double for 64-bit widths, else float.
template <typename F>
decltype(auto) with_float(std::size_t bits, F&& f) {
    if (bits == 64) return f.template operator()<double>();
    return f.template operator()<float>();
}

inline std::size_t file_float_bits(const std::filesystem::path& path) { return 8u * peek_float_width(path); }

inline std::vector<ManifestEntry> select_entries(const RunConfig& cfg, std::string_view which) {
    if (which != "train" && which != "test" && which != "all")
        throw ConfigError("split must be train, test or all, got '" + std::string(which) + "'");
    if (!cfg.get("manifest").empty()) {
        const auto m = read_manifest(cfg.get("manifest"));
        if (which == "all") return m.entries;
        auto subset = m.subset(which == "train" ? Split::Train : Split::Test);
        if (subset.empty()) throw DataError("manifest has no " + std::string(which) + " entries");
        return subset;
    }
    if (cfg.get("dataset_dir").empty()) throw ConfigError("set manifest or dataset_dir");
    std::vector<ManifestEntry> out;
    for (const auto& [image, mask] : scan_dataset(cfg.get("dataset_dir"))) out.push_back({image, mask, Split::Train});
    return out;
}

inline std::vector<ImagePair> load_pairs(const std::vector<ManifestEntry>& entries) {
    std::vector<ImagePair> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(load_pair(e));
    return out;
}

inline bool resize_test_images(const RunConfig& cfg) {
    const auto& policy = cfg.get("test_resize");
    if (policy == "direct") return true;
    if (policy == "none") return false;
    throw ConfigError("test_resize must be direct or none, got '" + policy + "'");
}

inline Image fit_image(const Image& img, std::size_t size, bool resize, const std::string& id) {
    if (img.height == size && img.width == size) return img;
    if (!resize)
        throw DataError(id + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) + " but the model takes " +
                        std::to_string(size) + "x" + std::to_string(size) + " (test_resize=none)");
    return resize_bilinear(img, size, size);
}

/// Binary mask target for one output channel, the multi-label target otherwise.
template <typename T>
Sample<T> model_sample(const ImagePair& pair, std::size_t size, std::size_t out_channels, bool resize = true) {
    const ImagePair fitted{fit_image(pair.image, size, resize, pair.source_id),
                           binarize_mask(fit_image(pair.mask, size, resize, pair.source_id)), pair.source_id};
    Tensor<T> target = out_channels > 1 ? multiclass_target<T>(fitted, out_channels) : to_tensor<T>(fitted.mask);
    return {to_tensor<T>(fitted.image), std::move(target), fitted.source_id};
}

template <typename T>
std::vector<Sample<T>> model_samples(const std::vector<ImagePair>& pairs, std::size_t size, std::size_t out_channels,
                                     bool resize = true) {
    std::vector<Sample<T>> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(model_sample<T>(p, size, out_channels, resize));
    return out;
}

struct PixelTally {
    double positive = 0;
    double total = 0;

    void add(const Image& mask) {
        for (float v : mask.data) positive += v > 0.5f ? 1.0 : 0.0;
        total += static_cast<double>(mask.data.size());
    }
    double fraction() const { return total > 0 ? positive / total : 0.0; }
};

/// Probability map of the first output channel at the image's own size.
template <typename T>
struct Predictor {
    std::size_t input_size = 0;
    std::function<Tensor<T>(const Tensor<T>&)> run;

    std::vector<float> operator()(const Image& image, bool resize) const {
        NoGradGuard guard;
        const Image input = fit_image(image, input_size, resize, "image");
        const Tensor<T> out = run(to_tensor<T>(input));
        Image prob(input.height, input.width, 1);
        for (std::size_t i = 0; i < prob.data.size(); ++i) prob.data[i] = static_cast<float>(out[i]);
        if (!prob.same_size(image)) prob = resize_bilinear(prob, image.height, image.width);
        return prob.data;
    }
};

/// A trained model, or a reprogramming wrapper around its frozen base.
template <typename T>
Predictor<T> load_predictor(const RunConfig& cfg) {
    if (!cfg.get("wrapper").empty()) {
        auto base = std::make_shared<const Model<T>>(load_model<T>(cfg.require("base_model")));
        auto wrapper = std::make_shared<ReprogramWrapper<T>>(
            deserialize_wrapper<T>(read_file_bytes(cfg.get("wrapper")), base));
        if (base->spec().in_channels != 3) throw DataError("base model does not take RGB input");
        return {base->spec().input_size, [wrapper](const Tensor<T>& x) { return wrapper->forward(x); }};
    }
    auto model = std::make_shared<const Model<T>>(load_model<T>(cfg.require("model")));
    if (model->spec().in_channels != 3) throw DataError("model does not take RGB input");
    return {model->spec().input_size, [model](const Tensor<T>& x) { return forward(*model, x); }};
}

inline std::filesystem::path predictor_file(const RunConfig& cfg) {
    return cfg.get("wrapper").empty() ? cfg.require("model") : cfg.require("base_model");
}

inline void echo_config(std::ostream& log, const RunConfig& cfg) {
    std::istringstream lines(cfg.to_text());
    std::string line;
    while (std::getline(lines, line)) log << "# " << line << '\n';
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

template <typename T>
int run_training(const RunConfig& cfg, std::ostream& out, bool multilabel) {
    const auto start = std::chrono::steady_clock::now();
    const ModelSpec spec = cfg.model_spec();
    if (spec.in_channels != 3) throw ConfigError("in_channels must be 3 for RGB images");
    if (multilabel && spec.out_channels < 2) throw ConfigError("pretrain-base needs out_channels >= 2");
    if (!multilabel && spec.out_channels != 1)
        throw ConfigError("train fits binary masks and needs out_channels=1; use pretrain-base for several outputs");

    const bool with_manifest = !cfg.get("manifest").empty();
    std::vector<ManifestEntry> train_entries;
    if (with_manifest && cfg.flag("augment")) {
        const auto aug_dir = std::filesystem::path(cfg.get("manifest")).parent_path() / "train_aug";
        for (const auto& [image, mask] : scan_dataset(aug_dir)) train_entries.push_back({image, mask, Split::Train});
    } else {
        train_entries = select_entries(cfg, "train");
    }
    const auto train_set = model_samples<T>(load_pairs(train_entries), spec.input_size, spec.out_channels);
    std::vector<Sample<T>> val_set;
    if (with_manifest && cfg.flag("validate"))
        val_set = model_samples<T>(load_pairs(select_entries(cfg, "test")), spec.input_size, spec.out_channels,
                                   resize_test_images(cfg));

    TrainOptions opt;
    opt.loss = cfg.loss();
    opt.epochs = cfg.size("epochs");
    opt.batch_size = cfg.size("batch_size");
    opt.adam = cfg.adam();
    opt.seed = cfg.size("seed");
    opt.freeze = cfg.list("freeze");
    opt.prediction_threshold = cfg.real("pred_threshold");
    opt.eval_every = cfg.size("eval_every");
    opt.target_train_dice = cfg.real("target_train_dice");
    if (opt.epochs == 0) throw ConfigError("epochs must be positive");

    const auto dir = output_dir(cfg);
    const auto model_path = dir / (multilabel ? "base.gacm" : "model.gacm");
    const auto log_path = dir / (multilabel ? "pretrain_log.tsv" : "train_log.tsv");
    std::ofstream log(log_path);
    if (!log) throw DataError("cannot write " + log_path.string());
    echo_config(log, cfg);
    log << "# train_pairs=" << train_set.size() << " val_pairs=" << val_set.size() << '\n';
    log << "# epoch\tloss\tval_iou\tval_dice\n" << std::flush;
    out << "training on " << train_set.size() << " pairs, validating on " << val_set.size() << '\n';

    auto model = build_model<T>(spec);
    const auto fmt = [](const std::optional<double>& v) {
        std::ostringstream s;
        s << std::setprecision(10);
        if (v) s << *v;
        else s << '-';
        return s.str();
    };
    const auto result = train(model, train_set, val_set, opt, [&](const EpochRecord& r) {
        log << r.epoch << '\t' << std::setprecision(10) << r.loss << '\t' << fmt(r.val_iou) << '\t' << fmt(r.val_dice)
            << '\n'
            << std::flush;
        out << "epoch " << r.epoch << "  loss " << std::setprecision(6) << r.loss;
        if (r.val_dice) out << "  val_dice " << *r.val_dice;
        if (r.train_dice) out << "  train_dice " << *r.train_dice;
        out << '\n' << std::flush;
    });
    save_model(model, model_path);
    const double wall = seconds_since(start);
    log << "# best_epoch=" << result.best_epoch << '\n';
    if (result.best_val_dice) log << "# best_val_dice=" << std::setprecision(10) << *result.best_val_dice << '\n';
    log << "# wall_seconds=" << std::setprecision(6) << wall << '\n';
    log << "# model=" << model_path.string() << '\n';
    out << "saved " << model_path.string() << " (epoch " << result.best_epoch << ")\n";
    return kExitOk;
}

}  // namespace detail

/// Writes `count` generated image/mask pairs into out_dir.
inline int cmd_synth(const RunConfig& cfg, std::ostream& out) {
    const std::size_t count = cfg.size("count"), size = cfg.size("size");
    if (count == 0 || size < 8) throw ConfigError("synth needs count >= 1 and size >= 8");
    const auto dir = detail::output_dir(cfg);
    write_pairs(make_flood_set(count, size, cfg.size("seed")), dir);
    out << "wrote " << count << " pairs of " << size << "x" << size << " to " << dir.string() << '\n';
    return kExitOk;
}

/// Splits dataset_dir, writes out_dir/manifest.tsv and the augmented training
/// corpus out_dir/train_aug.
inline int cmd_prepare(const RunConfig& cfg, std::ostream& out) {
    const auto data = std::filesystem::absolute(cfg.require("dataset_dir"));
    const std::filesystem::path dir = cfg.require("out_dir");
    if (std::filesystem::exists(data) && detail::is_within(dir, data))
        throw ConfigError("out_dir must not be inside dataset_dir");
    const auto manifest = split_dataset(scan_dataset(data), cfg.size("seed"));
    const std::size_t crop = cfg.size("crop_size") ? cfg.size("crop_size") : cfg.size("input_size");
    const std::size_t side = cfg.size("resize_to") ? cfg.size("resize_to") : 2 * crop;
    if (crop == 0 || side < crop) throw ConfigError("need 0 < crop_size <= resize_to");
    const bool augment = cfg.flag("augment");

    std::filesystem::create_directories(dir);
    write_manifest(manifest, dir / "manifest.tsv");
    const auto aug_dir = dir / "train_aug";
    std::filesystem::remove_all(aug_dir);
    if (augment) std::filesystem::create_directories(aug_dir);

    const auto train = manifest.subset(Split::Train), test = manifest.subset(Split::Test);
    detail::PixelTally train_px, test_px;
    std::size_t augmented = 0;
    for (const auto& e : train) {
        const auto pair = load_pair(e);
        train_px.add(pair.mask);
        if (!augment) continue;
        for (const auto& a : augment_expand(resize_pair(pair, side, side), crop)) {
            save_image(a.image, aug_dir / (a.source_id + ".ppm"));
            save_mask(a.mask, aug_dir / (a.source_id + ".pgm"));
            ++augmented;
        }
    }
    for (const auto& e : test) test_px.add(load_pair(e).mask);
    detail::PixelTally all = train_px;
    all.positive += test_px.positive;
    all.total += test_px.total;
    out << train.size() << " train / " << test.size() << " test, " << augmented << " augmented train pairs\n";
    out << std::setprecision(6) << "positive pixel fraction " << all.fraction() << " (train " << train_px.fraction()
        << ", test " << test_px.fraction() << ")\n";
    out << "manifest " << (dir / "manifest.tsv").string() << '\n';
    return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
    return detail::with_float(cfg.float_width(),
                              [&]<typename T>() { return detail::run_training<T>(cfg, out, false); });
}

/// Trains a multi-output base model on the multi-label land-cover targets, for
/// later reprogramming.
inline int cmd_pretrain_base(const RunConfig& cfg, std::ostream& out) {
    return detail::with_float(cfg.float_width(),
                              [&]<typename T>() { return detail::run_training<T>(cfg, out, true); });
}

/// Scores a model, a wrapper, or a directory of predicted masks against the
/// selected split and writes out_dir/eval_report.tsv.
inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
    const auto pairs = detail::load_pairs(detail::select_entries(cfg, cfg.get("split")));
    const double threshold = cfg.real("pred_threshold");
    const bool resize = detail::resize_test_images(cfg);
    const auto truth = [&](std::size_t i) { return BinaryMask::from_image(pairs[i].mask); };
    const auto id = [&](std::size_t i) { return pairs[i].source_id; };
    MetricReport report;
    if (!cfg.get("predictions").empty()) {
        const std::filesystem::path pred_dir = cfg.get("predictions");
        report = evaluate(
            pairs.size(),
            [&](std::size_t i) {
                const auto path = pred_dir / (pairs[i].source_id + ".pgm");
                const Image m = load_mask(path);
                if (!m.same_size(pairs[i].mask)) throw DataError(path.string() + ": size differs from the ground truth");
                return m.data;
            },
            truth, id, threshold);
    } else {
        report = detail::with_float(detail::file_float_bits(detail::predictor_file(cfg)), [&]<typename T>() {
            const auto predict = detail::load_predictor<T>(cfg);
            return evaluate(
                pairs.size(), [&](std::size_t i) { return predict(pairs[i].image, resize); }, truth, id, threshold);
        });
    }
    const auto path = detail::output_dir(cfg) / "eval_report.tsv";
    std::ofstream file(path);
    write_report(file, report);
    if (!file) throw DataError("cannot write " + path.string());
    out << std::setprecision(6) << report.images.size() << " images  mean_iou " << report.mean_iou << "  mean_dice "
        << report.mean_dice << "  map " << report.map << '\n';
    out << "report " << path.string() << '\n';
    return kExitOk;
}

/// Writes the thresholded mask of one image as a {0,255} graymap.
inline int cmd_predict(const RunConfig& cfg, std::ostream& out) {
    const std::filesystem::path image_path = cfg.require("image");
    const Image image = load_image(image_path);
    const auto probs = detail::with_float(detail::file_float_bits(detail::predictor_file(cfg)), [&]<typename T>() {
        return detail::load_predictor<T>(cfg)(image, detail::resize_test_images(cfg));
    });
    const auto mask = BinaryMask::threshold(std::span<const float>(probs), image.height, image.width,
                                            cfg.real("pred_threshold"));
    std::filesystem::path target = cfg.get("output");
    if (target.empty()) target = detail::output_dir(cfg) / (image_path.stem().string() + "_mask.pgm");
    else if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    save_mask(mask.to_image(), target);
    out << std::setprecision(6) << "wrote " << target.string() << " (" << image.height << "x" << image.width << ", "
        << static_cast<double>(mask.count()) / static_cast<double>(mask.bits.size()) << " positive)\n";
    return kExitOk;
}

/// Trains an input transform and output map around a frozen base model and
/// logs the base checksum before and after.
inline int cmd_reprogram(const RunConfig& cfg, std::ostream& out) {
    const std::filesystem::path base_path = cfg.require("base_model");
    return detail::with_float(detail::file_float_bits(base_path), [&]<typename T>() {
        const auto start = std::chrono::steady_clock::now();
        auto base = std::make_shared<const Model<T>>(load_model<T>(base_path));
        if (base->spec().in_channels != 3) throw DataError("base model does not take RGB input");
        ReprogramOptions ropt{cfg.size("out_channels"), cfg.flag("per_channel"), cfg.size("seed")};
        ReprogramWrapper<T> wrapper(base, ropt);
        const auto data = detail::model_samples<T>(detail::load_pairs(detail::select_entries(cfg, "train")),
                                                   base->spec().input_size, ropt.out_channels);
        ReprogramTrainOptions opt;
        opt.loss = cfg.loss();
        opt.steps = cfg.size("steps");
        opt.batch_size = cfg.size("batch_size");
        opt.adam = cfg.adam();
        opt.seed = cfg.size("seed");

        const auto dir = detail::output_dir(cfg);
        const auto log_path = dir / "reprogram_log.tsv";
        std::ofstream log(log_path);
        if (!log) throw DataError("cannot write " + log_path.string());
        const std::string before = hex64(wrapper.base_checksum());
        log << "# base_checksum=" << before << '\n';
        detail::echo_config(log, cfg);
        log << "# samples=" << data.size() << '\n' << "# step\tloss\n" << std::flush;
        out << "base checksum " << before << '\n';

        const auto result = reprogram_train(wrapper, data, opt, [&](std::size_t step, double loss) {
            log << step << '\t' << std::setprecision(10) << loss << '\n' << std::flush;
        });
        const std::string after = hex64(model_checksum(*base));
        log << "# initial_loss=" << std::setprecision(10) << result.initial_loss << '\n';
        log << "# final_loss=" << result.final_loss << '\n';
        log << "# base_checksum=" << after << '\n';
        if (after != before) throw InvariantError("frozen base changed: checksum " + before + " became " + after);

        const auto wrapper_path = dir / "wrapper.gacm";
        const auto bytes = serialize_wrapper(wrapper);
        write_file_bytes(wrapper_path, bytes);
        log << "# wall_seconds=" << std::setprecision(6) << detail::seconds_since(start) << '\n';
        log << "# wrapper=" << wrapper_path.string() << '\n';
        out << std::setprecision(6) << "loss " << result.initial_loss << " -> " << result.final_loss << " over "
            << opt.steps << " steps\n";
        out << "base checksum " << after << '\n';
        out << "saved " << wrapper_path.string() << '\n';
        return kExitOk;
    });
}

/// Finite-difference table over every layer, both losses and two full models.
inline int cmd_gradcheck(const RunConfig&, std::ostream& out, bool inject_sign_bug = false) {
    GradSuiteOptions opt;
    opt.inject_sign_bug = inject_sign_bug;
    const auto rows = run_gradcheck_suite(opt);
    out << std::left << std::setw(22) << "check" << std::setw(14) << "max_rel_err" << std::setw(10) << "tol"
        << std::setw(8) << "coords" << "result\n";
    for (const auto& r : rows) {
        std::ostringstream err, tol;
        err << std::scientific << std::setprecision(3) << r.max_rel_error;
        tol << std::scientific << std::setprecision(0) << r.tolerance;
        out << std::left << std::setw(22) << r.name << std::setw(14) << err.str() << std::setw(10) << tol.str()
            << std::setw(8) << r.coordinates << (r.passed ? "pass" : "FAIL") << '\n';
    }
    const bool ok = all_passed(rows);
    out << (ok ? "all checks passed\n" : "gradient check failed\n");
    return ok ? kExitOk : kExitNumeric;
}

/// Counts, sizes, positive fraction and channel means of a dataset or manifest.
inline int cmd_dataset_stats(const RunConfig& cfg, std::ostream& out) {
    const auto entries = detail::select_entries(cfg, "all");
    std::size_t train = 0, min_h = SIZE_MAX, max_h = 0, min_w = SIZE_MAX, max_w = 0;
    detail::PixelTally px;
    double channel_sum[3] = {0, 0, 0}, pixels = 0;
    for (const auto& e : entries) {
        const auto pair = load_pair(e);
        train += e.split == Split::Train;
        min_h = std::min(min_h, pair.image.height);
        max_h = std::max(max_h, pair.image.height);
        min_w = std::min(min_w, pair.image.width);
        max_w = std::max(max_w, pair.image.width);
        px.add(pair.mask);
        for (std::size_t i = 0; i < pair.image.data.size(); ++i) channel_sum[i % 3] += pair.image.data[i];
        pixels += static_cast<double>(pair.image.height * pair.image.width);
    }
    out << entries.size() << " pairs";
    if (!cfg.get("manifest").empty()) out << " (" << train << " train / " << entries.size() - train << " test)";
    out << '\n' << "height " << min_h << ".." << max_h << "  width " << min_w << ".." << max_w << '\n';
    out << std::setprecision(6) << "positive pixel fraction " << px.fraction() << '\n';
    out << "channel means " << channel_sum[0] / pixels << ' ' << channel_sum[1] / pixels << ' ' << channel_sum[2] / pixels
        << '\n';
    return kExitOk;
}

}  // namespace gacunet
