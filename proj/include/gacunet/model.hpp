#pragma once

// GAC-UNET and the plain U-Net baseline: declarative spec, named parameter
// set, Glorot initialization, forward pass, and the .gacm file container.

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gacunet/conv.hpp"
#include "gacunet/dataio.hpp"
#include "gacunet/error.hpp"
#include "gacunet/graph.hpp"
#include "gacunet/synthetic.hpp"
#include "gacunet/tensor.hpp"

namespace gacunet {

enum class Variant { GacUnet, PlainUnet };

inline std::string_view to_string(Variant v) { return v == Variant::GacUnet ? "gac-unet" : "plain-unet"; }

inline Variant parse_variant(std::string_view s) {
    if (s == "gac-unet") return Variant::GacUnet;
    if (s == "plain-unet") return Variant::PlainUnet;
    throw ConfigError("variant must be gac-unet or plain-unet, got '" + std::string(s) + "'");
}

/// Negative slope of the encoder/decoder activations.
inline constexpr double kConvSlope = 0.2;

struct GraphBlockSpec {
    int connectivity = 4;
    std::size_t gat_out = 0;  // 0: last encoder width
    std::size_t cheb_order = 2;
    std::size_t cheb_out = 0;  // 0: GAT width
    bool center_of_mass = true;
};

struct ModelSpec {
    std::size_t input_size = 256;
    std::size_t in_channels = 3;
    std::size_t out_channels = 1;
    std::vector<std::size_t> widths{16, 32, 64};
    GraphBlockSpec graph;
    Variant variant = Variant::GacUnet;
    std::uint64_t seed = 0;

    std::size_t stages() const { return widths.size(); }
    std::size_t bottleneck_extent() const { return input_size >> widths.size(); }
    std::size_t gat_width() const { return graph.gat_out ? graph.gat_out : widths.back(); }
    std::size_t cheb_width() const { return graph.cheb_out ? graph.cheb_out : gat_width(); }

    /// Channels entering the first decoder stage.
    std::size_t bottleneck_channels() const {
        if (variant == Variant::PlainUnet) return widths.back();
        return cheb_width() + (graph.center_of_mass ? 2 : 0);
    }

    void validate() const {
        if (widths.empty()) throw ConfigError("model spec: need at least one encoder stage");
        for (auto w : widths)
            if (w == 0) throw ConfigError("model spec: encoder widths must be positive");
        if (in_channels == 0 || out_channels == 0) throw ConfigError("model spec: channel counts must be positive");
        if (widths.size() >= 31 || input_size == 0 || input_size % (std::size_t{1} << widths.size()) != 0)
            throw ConfigError("model spec: input size " + std::to_string(input_size) + " is not divisible by 2^" +
                              std::to_string(widths.size()));
        if (graph.connectivity != 4 && graph.connectivity != 8)
            throw ConfigError("model spec: connectivity must be 4 or 8");
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "input_size=" << input_size << "\nin_channels=" << in_channels << "\nout_channels=" << out_channels
           << "\nwidths=";
        for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
        os << "\nvariant=" << to_string(variant) << "\nconnectivity=" << graph.connectivity
           << "\ngat_out=" << graph.gat_out << "\ncheb_order=" << graph.cheb_order << "\ncheb_out=" << graph.cheb_out
           << "\ncenter_of_mass=" << (graph.center_of_mass ? 1 : 0) << "\nseed=" << seed << "\n";
        return os.str();
    }

    static ModelSpec from_text(std::string_view text);

    bool operator==(const ModelSpec& o) const { return to_text() == o.to_text(); }
};

namespace detail {

inline std::uint64_t parse_unsigned(std::string_view key, std::string_view value) {
    if (value.empty()) throw ConfigError(std::string(key) + ": empty value");
    std::uint64_t v = 0;
    for (char c : value) {
        if (c < '0' || c > '9') throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" +
                                                  std::string(value) + "'");
        v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return v;
}

inline std::vector<std::size_t> parse_widths(std::string_view value) {
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const auto end = std::min(value.find(',', start), value.size());
        out.push_back(parse_unsigned("widths", value.substr(start, end - start)));
        start = end + 1;
    }
    return out;
}

inline bool parse_flag(std::string_view key, std::string_view value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw ConfigError(std::string(key) + ": expected true/false, got '" + std::string(value) + "'");
}

}  // namespace detail

/// Sets one spec field from its text form; false if the key is not a spec key.
inline bool apply_spec_field(ModelSpec& spec, std::string_view key, std::string_view value) {
    using detail::parse_unsigned;
    if (key == "input_size") spec.input_size = parse_unsigned(key, value);
    else if (key == "in_channels") spec.in_channels = parse_unsigned(key, value);
    else if (key == "out_channels") spec.out_channels = parse_unsigned(key, value);
    else if (key == "widths") spec.widths = detail::parse_widths(value);
    else if (key == "variant") spec.variant = parse_variant(value);
    else if (key == "connectivity") spec.graph.connectivity = static_cast<int>(parse_unsigned(key, value));
    else if (key == "gat_out") spec.graph.gat_out = parse_unsigned(key, value);
    else if (key == "cheb_order") spec.graph.cheb_order = parse_unsigned(key, value);
    else if (key == "cheb_out") spec.graph.cheb_out = parse_unsigned(key, value);
    else if (key == "center_of_mass") spec.graph.center_of_mass = detail::parse_flag(key, value);
    else if (key == "seed") spec.seed = parse_unsigned(key, value);
    else return false;
    return true;
}

inline ModelSpec ModelSpec::from_text(std::string_view text) {
    ModelSpec spec;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("model spec: malformed line '" + line + "'");
        if (!apply_spec_field(spec, std::string_view(line).substr(0, eq), std::string_view(line).substr(eq + 1)))
            throw DataError("model spec: unknown field '" + line.substr(0, eq) + "'");
    }
    spec.validate();
    return spec;
}

template <typename T>
struct NamedParameter {
    std::string name;
    Tensor<T> value;
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;
    bool is_bias = false;
};

template <typename T>
class Model {
   public:
    explicit Model(ModelSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        const auto& w = spec_.widths;
        std::size_t c_prev = spec_.in_channels;
        for (std::size_t s = 0; s < w.size(); ++s) {
            add_conv("enc" + std::to_string(s) + ".conv", w[s], c_prev, 3);
            add_conv("enc" + std::to_string(s) + ".dconv", w[s], w[s], 3);
            c_prev = w[s];
        }
        if (spec_.variant == Variant::GacUnet) {
            const std::size_t g = spec_.gat_width(), ch = spec_.cheb_width();
            add("gat.weight", {g, w.back()}, w.back(), g, false);
            add("gat.attention", {2 * g}, 2 * g, 1, false);
            for (std::size_t k = 0; k <= spec_.graph.cheb_order; ++k)
                add("cheb.theta" + std::to_string(k), {ch, g}, g, ch, false);
            const std::size_t e = spec_.bottleneck_extent();
            graph_ = std::make_shared<const Graph>(build_grid_graph(e, e, spec_.graph.connectivity));
            laplacian_ = std::make_shared<const NormalizedLaplacian>(normalized_laplacian(*graph_));
        }
        std::size_t c_up = spec_.bottleneck_channels();
        for (std::size_t s = w.size(); s-- > 0;) {
            add_conv("dec" + std::to_string(s) + ".conv", w[s], c_up + w[s], 3);
            c_up = w[s];
        }
        add_conv("head", spec_.out_channels, w.front(), 1);
    }

    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    /// Deep copy with independent parameter storage.
    Model clone() const {
        Model copy(spec_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto dst = copy.params_[i].value.data();
            const auto src = params_[i].value.data();
            std::copy(src.begin(), src.end(), dst.begin());
        }
        return copy;
    }

    const ModelSpec& spec() const { return spec_; }
    std::vector<NamedParameter<T>>& parameters() { return params_; }
    const std::vector<NamedParameter<T>>& parameters() const { return params_; }

    const Tensor<T>& parameter(std::string_view name) const {
        const auto it = index_.find(std::string(name));
        if (it == index_.end()) throw Error("model has no parameter '" + std::string(name) + "'");
        return params_[it->second].value;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    ConvParams<T> conv(std::string_view prefix, std::size_t dilation = 1) const {
        const auto& kernel = parameter(std::string(prefix) + ".weight");
        return {kernel, parameter(std::string(prefix) + ".bias"), 1, dilation, same_padding(kernel.dim(3), dilation)};
    }

    GatParams<T> gat() const { return {parameter("gat.weight"), parameter("gat.attention"), static_cast<T>(kAttentionSlope)}; }

    ChebParams<T> cheb() const {
        ChebParams<T> p;
        for (std::size_t k = 0; k <= spec_.graph.cheb_order; ++k) p.theta.push_back(parameter("cheb.theta" + std::to_string(k)));
        return p;
    }

    const std::shared_ptr<const Graph>& graph() const { return graph_; }
    const std::shared_ptr<const NormalizedLaplacian>& laplacian() const { return laplacian_; }

   private:
    void add(std::string name, Shape shape, std::size_t fan_in, std::size_t fan_out, bool bias) {
        index_.emplace(name, params_.size());
        params_.push_back({std::move(name), Tensor<T>(std::move(shape)), fan_in, fan_out, bias});
    }

    void add_conv(const std::string& prefix, std::size_t out, std::size_t in, std::size_t k) {
        add(prefix + ".weight", {out, in, k, k}, in * k * k, out * k * k, false);
        add(prefix + ".bias", {out}, 0, 0, true);
    }

    ModelSpec spec_;
    std::vector<NamedParameter<T>> params_;
    std::map<std::string, std::size_t> index_;
    std::shared_ptr<const Graph> graph_;
    std::shared_ptr<const NormalizedLaplacian> laplacian_;
};

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero, drawn in
/// declaration order from one seeded stream.
template <typename T>
void init_params(Model<T>& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : model.parameters()) {
        auto data = p.value.data();
        if (p.is_bias) {
            std::fill(data.begin(), data.end(), T(0));
            continue;
        }
        const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
        for (auto& v : data) v = static_cast<T>(uniform(rng, -bound, bound));
    }
}

template <typename T>
Model<T> build_model(const ModelSpec& spec) {
    Model<T> model(spec);
    init_params(model, spec.seed);
    return model;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct EncoderOutput {
    std::vector<Tensor<T>> skips;  // pre-pool features, shallow to deep
    Tensor<T> pooled;
};

template <typename T>
EncoderOutput<T> encode(const Model<T>& model, const Tensor<T>& input) {
    const auto& spec = model.spec();
    if (input.rank() != 3 || input.dim(0) != spec.in_channels || input.dim(1) != spec.input_size ||
        input.dim(2) != spec.input_size)
        throw ShapeError("model: expected input [" + std::to_string(spec.in_channels) + "x" +
                         std::to_string(spec.input_size) + "x" + std::to_string(spec.input_size) + "], got " +
                         to_string(input.shape()));
    const T slope = static_cast<T>(kConvSlope);
    EncoderOutput<T> out;
    Tensor<T> x = input;
    for (std::size_t s = 0; s < spec.stages(); ++s) {
        const std::string name = "enc" + std::to_string(s);
        x = leaky_relu(conv2d(x, model.conv(name + ".conv")), slope);
        x = leaky_relu(dilated_conv2d(x, model.conv(name + ".dconv", 2)), slope);
        out.skips.push_back(x);
        x = maxpool2(x);
    }
    out.pooled = x;
    return out;
}

/// Graph block on the pooled C x h x w grid: nodes -> GAT -> Chebyshev ->
/// grid -> centre of mass. Identity for the plain variant.
template <typename T>
Tensor<T> bottleneck(const Model<T>& model, const Tensor<T>& pooled) {
    const auto& spec = model.spec();
    if (spec.variant == Variant::PlainUnet) return pooled;
    const std::size_t c = pooled.dim(0), h = pooled.dim(1), w = pooled.dim(2);
    const Tensor<T> nodes = transpose(reshape(pooled, Shape{c, h * w}));
    const Tensor<T> attended = gat_conv(nodes, model.graph(), model.gat());
    const Tensor<T> filtered = cheb_conv(attended, model.laplacian(), model.cheb());
    const Tensor<T> grid = reshape(transpose(filtered), Shape{spec.cheb_width(), h, w});
    if (!spec.graph.center_of_mass) return grid;
    return center_of_mass(grid).augmented;
}

template <typename T>
Tensor<T> decode(const Model<T>& model, const EncoderOutput<T>& enc, Tensor<T> x) {
    const T slope = static_cast<T>(kConvSlope);
    for (std::size_t s = model.spec().stages(); s-- > 0;) {
        x = concat<T>({upsample2(x), enc.skips[s]}, 0);
        x = leaky_relu(conv2d(x, model.conv("dec" + std::to_string(s) + ".conv")), slope);
    }
    return sigmoid(conv2d(x, model.conv("head")));
}

/// in_channels x S x S input to out_channels x S x S probabilities.
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& input) {
    const auto enc = encode(model, input);
    return decode(model, enc, bottleneck(model, enc.pooled));
}

/// Probability map for an arbitrary-size image: resized to the model input,
/// evaluated, and the first output channel resized back.
template <typename T>
std::vector<T> predict_probabilities(const Model<T>& model, const Image& image) {
    NoGradGuard guard;
    const std::size_t s = model.spec().input_size;
    const Image resized = resize_bilinear(image, s, s);
    const Tensor<T> out = forward(model, to_tensor<T>(resized));
    Image prob(s, s, 1);
    for (std::size_t i = 0; i < s * s; ++i) prob.data[i] = static_cast<float>(out[i]);
    const Image back = resize_bilinear(prob, image.height, image.width);
    return {back.data.begin(), back.data.end()};
}

// ---------------------------------------------------------------------------
// Serialization
//
// Layout (little-endian): "GACM", u32 version, u8 float width in bytes,
// u8 payload kind, u16 reserved, u32 text length, text, then raw parameter
// values in declaration order.

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 16;

enum class PayloadKind : std::uint8_t { Model = 0, Reprogram = 1 };

struct ContainerHeader {
    std::uint32_t version = kFormatVersion;
    std::uint8_t float_width = 4;
    PayloadKind kind = PayloadKind::Model;
    std::string text;
    std::size_t payload_offset = 0;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}

template <typename T>
void put_values(std::vector<std::uint8_t>& out, std::span<const T> values) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : values) {
        const auto bits = std::bit_cast<Bits>(v);
        for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
}

template <typename T>
void get_values(std::span<const std::uint8_t> b, std::size_t at, std::span<T> values) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t k = 0; k < values.size(); ++k) {
        Bits bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<Bits>(b[at + k * sizeof(T) + i]) << (8 * i);
        values[k] = std::bit_cast<T>(bits);
    }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_header(PayloadKind kind, std::uint8_t float_width, const std::string& text) {
    std::vector<std::uint8_t> out{'G', 'A', 'C', 'M'};
    detail::put_u32(out, kFormatVersion);
    out.push_back(float_width);
    out.push_back(static_cast<std::uint8_t>(kind));
    out.push_back(0);
    out.push_back(0);
    detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    return out;
}

inline ContainerHeader decode_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes) throw DataError("model file truncated: " + std::to_string(bytes.size()) + " bytes");
    if (std::memcmp(bytes.data(), "GACM", 4) != 0) throw DataError("not a .gacm file: bad magic bytes");
    ContainerHeader h;
    h.version = detail::get_u32(bytes, 4);
    if (h.version != kFormatVersion)
        throw DataError("unsupported .gacm version " + std::to_string(h.version) + " (expected " +
                        std::to_string(kFormatVersion) + ")");
    h.float_width = bytes[8];
    if (h.float_width != 4 && h.float_width != 8)
        throw DataError("unsupported float width " + std::to_string(h.float_width));
    if (bytes[9] > 1) throw DataError("unknown .gacm payload kind " + std::to_string(bytes[9]));
    h.kind = static_cast<PayloadKind>(bytes[9]);
    const std::uint32_t len = detail::get_u32(bytes, 12);
    if (bytes.size() - kHeaderBytes < len) throw DataError("model file truncated inside the spec text");
    h.text.assign(bytes.begin() + kHeaderBytes, bytes.begin() + kHeaderBytes + len);
    h.payload_offset = kHeaderBytes + len;
    return h;
}

/// Fills `targets` in order from the payload, which must match their total
/// length exactly.
template <typename T>
void read_payload(std::span<const std::uint8_t> bytes, const ContainerHeader& h, std::vector<std::span<T>> targets) {
    if (h.float_width != sizeof(T))
        throw DataError("file stores " + std::to_string(h.float_width * 8) + "-bit floats, reader expects " +
                        std::to_string(sizeof(T) * 8) + "-bit");
    std::size_t expected = 0;
    for (const auto& t : targets) expected += t.size();
    const std::size_t have = bytes.size() - h.payload_offset;
    if (have != expected * sizeof(T))
        throw DataError("parameter payload has " + std::to_string(have) + " bytes, spec needs " +
                        std::to_string(expected * sizeof(T)) + (have < expected * sizeof(T) ? " (truncated)" : ""));
    std::size_t at = h.payload_offset;
    for (auto& t : targets) {
        detail::get_values<T>(bytes, at, t);
        at += t.size() * sizeof(T);
    }
}

template <typename T>
std::vector<std::uint8_t> serialize_model(const Model<T>& model) {
    auto out = encode_header(PayloadKind::Model, sizeof(T), model.spec().to_text());
    out.reserve(out.size() + model.parameter_count() * sizeof(T));
    for (const auto& p : model.parameters()) detail::put_values<T>(out, p.value.data());
    return out;
}

template <typename T>
Model<T> deserialize_model(std::span<const std::uint8_t> bytes) {
    const auto h = decode_header(bytes);
    if (h.kind != PayloadKind::Model) throw DataError("file holds a reprogramming wrapper, not a model");
    Model<T> model(ModelSpec::from_text(h.text));
    std::vector<std::span<T>> targets;
    for (auto& p : model.parameters()) targets.push_back(p.value.data());
    read_payload<T>(bytes, h, targets);
    return model;
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_model(model));
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return deserialize_model<T>(bytes);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// Float width in bytes recorded in a .gacm file.
inline std::uint8_t peek_float_width(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> head(kHeaderBytes);
    in.read(reinterpret_cast<char*>(head.data()), kHeaderBytes);
    if (in.gcount() != static_cast<std::streamsize>(kHeaderBytes)) throw DataError(path.string() + ": truncated header");
    if (std::memcmp(head.data(), "GACM", 4) != 0) throw DataError(path.string() + ": bad magic bytes");
    return head[8];
}

/// FNV-1a, 64-bit.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

}  // namespace gacunet
