#pragma once

// Flat key=value run configuration shared by every command.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gacunet/error.hpp"
#include "gacunet/model.hpp"
#include "gacunet/optim.hpp"
#include "gacunet/train.hpp"

namespace gacunet {

struct ConfigKey {
    std::string_view name;
    std::string_view fallback;
    std::string_view help;
};

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys{
        {"dataset_dir", "", "directory of <stem>.ppm / <stem>.pgm pairs"},
        {"out_dir", "run", "directory for every file a command writes"},
        {"manifest", "", "split manifest written by prepare"},
        {"model", "", "model file to evaluate or predict with"},
        {"base_model", "", "frozen model to reprogram"},
        {"wrapper", "", "reprogramming wrapper file"},
        {"image", "", "input image for predict"},
        {"output", "", "output path for predict"},
        {"predictions", "", "directory of predicted <stem>.pgm masks to score instead of a model"},
        {"split", "test", "manifest subset to evaluate: train, test or all"},
        {"input_size", "256", "model input side length"},
        {"in_channels", "3", "input channels"},
        {"out_channels", "1", "output channels"},
        {"widths", "16,32,64", "encoder widths, one per stage"},
        {"variant", "gac-unet", "gac-unet or plain-unet"},
        {"connectivity", "4", "bottleneck grid connectivity, 4 or 8"},
        {"gat_out", "0", "attention layer width (0: last encoder width)"},
        {"cheb_order", "2", "Chebyshev order K"},
        {"cheb_out", "0", "Chebyshev layer width (0: attention width)"},
        {"center_of_mass", "1", "append centroid channels at the bottleneck"},
        {"loss", "dice", "bce or dice"},
        {"lr", "0.001", "Adam learning rate"},
        {"beta1", "0.9", "Adam first-moment decay"},
        {"beta2", "0.999", "Adam second-moment decay"},
        {"adam_eps", "1e-8", "Adam epsilon"},
        {"epochs", "50", "training epochs"},
        {"batch_size", "4", "minibatch size"},
        {"seed", "0", "seed for initialisation, splitting and shuffling"},
        {"float_width", "32", "32 or 64 bit parameters"},
        {"freeze", "", "comma-separated parameter name prefixes that are not trained"},
        {"augment", "1", "train on the augmented corpus written by prepare"},
        {"validate", "1", "track the test split and keep the best epoch"},
        {"eval_every", "1", "epochs between validation passes"},
        {"pred_threshold", "0.5", "probability threshold for binary masks"},
        {"target_train_dice", "0", "stop once train Dice reaches this (0: never)"},
        {"crop_size", "0", "five-crop side (0: input_size)"},
        {"resize_to", "0", "side before cropping (0: twice crop_size)"},
        {"test_resize", "direct", "direct: resize to the model input; none: require matching size"},
        {"steps", "100", "reprogramming steps"},
        {"per_channel", "0", "one input transform per channel"},
        {"count", "20", "synthetic pairs to generate"},
        {"size", "64", "synthetic image side"},
        {"deterministic", "0", "single-threaded numerics"},
    };
    return keys;
}

inline const ConfigKey* find_config_key(std::string_view name) {
    const auto& keys = config_keys();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.name == name; });
    return it == keys.end() ? nullptr : &*it;
}

namespace detail {

inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

class RunConfig {
   public:
    RunConfig() {
        for (const auto& k : config_keys()) values_[std::string(k.name)] = std::string(k.fallback);
    }

    void set(std::string_view key, std::string_view value) {
        if (!find_config_key(key)) throw ConfigError("unknown config key '" + std::string(key) + "'");
        values_[std::string(key)] = std::string(value);
    }

    /// Reads `key=value` lines; blank lines and lines starting with # are skipped.
    void merge_text(std::string_view text, std::string_view origin = "config") {
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto body = detail::trim(line);
            if (body.empty() || body[0] == '#') continue;
            const auto eq = body.find('=');
            const std::string where = std::string(origin) + ":" + std::to_string(lineno);
            if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + body + "'");
            const auto key = detail::trim(std::string_view(body).substr(0, eq));
            if (!find_config_key(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
            set(key, detail::trim(std::string_view(body).substr(eq + 1)));
        }
    }

    void merge_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path.string());
        std::stringstream buf;
        buf << in.rdbuf();
        merge_text(buf.str(), path.string());
    }

    const std::string& get(std::string_view key) const {
        const auto it = values_.find(std::string(key));
        if (it == values_.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
        return it->second;
    }

    std::string require(std::string_view key) const {
        const auto& v = get(key);
        if (v.empty()) throw ConfigError("config key '" + std::string(key) + "' must be set");
        return v;
    }

    std::size_t size(std::string_view key) const {
        const auto& v = get(key);
        std::size_t out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
            throw ConfigError(std::string(key) + " must be a non-negative integer, got '" + v + "'");
        return out;
    }

    double real(std::string_view key) const {
        const auto& v = get(key);
        try {
            std::size_t used = 0;
            const double out = std::stod(v, &used);
            if (used == v.size()) return out;
        } catch (const std::exception&) {
        }
        throw ConfigError(std::string(key) + " must be a number, got '" + v + "'");
    }

    bool flag(std::string_view key) const {
        const auto& v = get(key);
        if (v == "1" || v == "true") return true;
        if (v == "0" || v == "false") return false;
        throw ConfigError(std::string(key) + " must be 0/1 or true/false, got '" + v + "'");
    }

    std::vector<std::string> list(std::string_view key) const {
        std::vector<std::string> out;
        std::istringstream in(get(key));
        std::string item;
        while (std::getline(in, item, ','))
            if (auto t = detail::trim(item); !t.empty()) out.push_back(std::move(t));
        return out;
    }

    ModelSpec model_spec() const {
        ModelSpec spec;
        for (const auto key : {"input_size", "in_channels", "out_channels", "widths", "variant", "connectivity", "gat_out",
                               "cheb_order", "cheb_out", "center_of_mass", "seed"}) {
            try {
                apply_spec_field(spec, key, get(key));
            } catch (const DataError& e) {
                throw ConfigError(e.what());
            }
        }
        spec.validate();
        return spec;
    }

    AdamOptions adam() const {
        AdamOptions o;
        o.lr = real("lr");
        o.beta1 = real("beta1");
        o.beta2 = real("beta2");
        o.eps = real("adam_eps");
        if (!(o.lr > 0) || !(o.beta1 >= 0 && o.beta1 < 1) || !(o.beta2 >= 0 && o.beta2 < 1) || !(o.eps > 0))
            throw ConfigError("optimizer settings out of range: lr > 0, 0 <= beta < 1, adam_eps > 0");
        return o;
    }

    LossKind loss() const { return parse_loss(get("loss")); }

    std::size_t float_width() const {
        const auto w = size("float_width");
        if (w != 32 && w != 64) throw ConfigError("float_width must be 32 or 64, got " + std::to_string(w));
        return w;
    }

    /// Every key in declaration order, one `key=value` per line.
    std::string to_text() const {
        std::string out;
        for (const auto& k : config_keys()) out += std::string(k.name) + "=" + get(k.name) + "\n";
        return out;
    }

   private:
    std::map<std::string, std::string> values_;
};

}  // namespace gacunet
