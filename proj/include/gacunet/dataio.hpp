#pragma once

// Image/mask I/O (binary PPM/PGM, 8-bit), binarization, bilinear resizing,
// five-crop/flip augmentation and seeded train/test splitting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gacunet/error.hpp"
#include "gacunet/tensor.hpp"

namespace gacunet {

/// Interleaved H x W x C image with real values in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    float& at(std::size_t r, std::size_t c, std::size_t ch = 0) { return data[(r * width + c) * channels + ch]; }
    float at(std::size_t r, std::size_t c, std::size_t ch = 0) const { return data[(r * width + c) * channels + ch]; }

    bool same_size(const Image& other) const { return height == other.height && width == other.width; }
};

/// RGB image and binary mask of equal spatial size.
struct ImagePair {
    Image image;
    Image mask;
    std::string source_id;
};

// ---------------------------------------------------------------------------
// Netpbm

namespace detail {

class NetpbmReader {
   public:
    explicit NetpbmReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void expect_magic(std::string_view magic) {
        if (bytes_.size() < 2 || bytes_[0] != magic[0] || bytes_[1] != magic[1])
            throw ParseError("netpbm: expected magic '" + std::string(magic) + "'", 0);
        pos_ = 2;
    }

    std::size_t read_number(std::string_view field) {
        skip_space_and_comments();
        const std::size_t start = last_start_ = pos_;
        std::size_t value = 0;
        while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
            value = value * 10 + (bytes_[pos_] - '0');
            if (value > 1u << 24) throw ParseError("netpbm: " + std::string(field) + " too large", start);
            ++pos_;
        }
        if (pos_ == start) {
            if (pos_ >= bytes_.size()) throw ParseError("netpbm: truncated header reading " + std::string(field), pos_);
            throw ParseError("netpbm: expected decimal " + std::string(field), pos_);
        }
        return value;
    }

    void end_header() {
        if (pos_ >= bytes_.size()) throw ParseError("netpbm: truncated header", pos_);
        if (!is_space(bytes_[pos_])) throw ParseError("netpbm: expected whitespace after max value", pos_);
        ++pos_;
    }

    std::size_t position() const { return pos_; }
    std::size_t last_start() const { return last_start_; }

   private:
    static bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (is_space(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::size_t last_start_ = 0;
};

inline std::uint8_t to_byte(float v) {
    const float clamped = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

/// Decodes a binary PPM ("P6", channels = 3) or PGM ("P5", channels = 1)
/// with max value 255.
inline Image decode_netpbm(std::span<const std::uint8_t> bytes, std::size_t channels) {
    detail::NetpbmReader reader(bytes);
    reader.expect_magic(channels == 3 ? "P6" : "P5");
    const std::size_t width = reader.read_number("width");
    const std::size_t height = reader.read_number("height");
    const std::size_t maxval = reader.read_number("max value");
    const std::size_t maxval_at = reader.last_start();
    if (maxval != 255) throw ParseError("netpbm: unsupported max value " + std::to_string(maxval), maxval_at);
    if (width == 0 || height == 0) throw ParseError("netpbm: zero image extent", maxval_at);
    reader.end_header();
    const std::size_t offset = reader.position();
    const std::size_t needed = width * height * channels;
    if (bytes.size() - offset < needed)
        throw ParseError("netpbm: truncated payload, need " + std::to_string(needed) + " bytes, have " +
                             std::to_string(bytes.size() - offset),
                         bytes.size());
    Image img(height, width, channels);
    for (std::size_t i = 0; i < needed; ++i) img.data[i] = static_cast<float>(bytes[offset + i]) / 255.0f;
    return img;
}

inline std::vector<std::uint8_t> encode_netpbm(const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ShapeError("netpbm: only 1 or 3 channels can be written, got " + std::to_string(img.channels));
    const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                               std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.data.size());
    for (float v : img.data) out.push_back(detail::to_byte(v));
    return out;
}

inline Image load_image(const std::filesystem::path& path) {
    try {
        return decode_netpbm(read_file_bytes(path), 3);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.message(), e.offset());
    }
}

inline Image load_mask(const std::filesystem::path& path) {
    try {
        return decode_netpbm(read_file_bytes(path), 1);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.message(), e.offset());
    }
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
    if (img.channels != 3) throw ShapeError("save_image: expected 3 channels");
    write_file_bytes(path, encode_netpbm(img));
}

inline void save_mask(const Image& mask, const std::filesystem::path& path) {
    if (mask.channels != 1) throw ShapeError("save_mask: expected 1 channel");
    write_file_bytes(path, encode_netpbm(mask));
}

// ---------------------------------------------------------------------------
// Pixel operations

/// 1 where the value is strictly greater than 0.5, else 0.
inline Image binarize_mask(Image mask) {
    for (auto& v : mask.data) v = v > 0.5f ? 1.0f : 0.0f;
    return mask;
}

/// Bilinear resize with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& src, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: output extents must be positive");
    if (src.height == 0 || src.width == 0) throw ShapeError("resize_bilinear: empty source image");
    if (out_h == src.height && out_w == src.width) return src;
    struct Tap {
        std::size_t lo, hi;
        double frac;
    };
    const auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> t(out);
        for (std::size_t o = 0; o < out; ++o) {
            double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(std::floor(s));
            t[o] = {lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
        }
        return t;
    };
    const auto ty = taps(src.height, out_h);
    const auto tx = taps(src.width, out_w);
    Image out(out_h, out_w, src.channels);
    for (std::size_t r = 0; r < out_h; ++r)
        for (std::size_t c = 0; c < out_w; ++c)
            for (std::size_t ch = 0; ch < src.channels; ++ch) {
                const double top = src.at(ty[r].lo, tx[c].lo, ch) * (1 - tx[c].frac) + src.at(ty[r].lo, tx[c].hi, ch) * tx[c].frac;
                const double bot = src.at(ty[r].hi, tx[c].lo, ch) * (1 - tx[c].frac) + src.at(ty[r].hi, tx[c].hi, ch) * tx[c].frac;
                out.at(r, c, ch) = static_cast<float>(top * (1 - ty[r].frac) + bot * ty[r].frac);
            }
    return out;
}

/// Resizes image and mask together; the mask is re-binarized.
inline ImagePair resize_pair(const ImagePair& pair, std::size_t out_h, std::size_t out_w) {
    return {resize_bilinear(pair.image, out_h, out_w), binarize_mask(resize_bilinear(pair.mask, out_h, out_w)),
            pair.source_id};
}

inline Image flip_horizontal(const Image& src) {
    Image out(src.height, src.width, src.channels);
    for (std::size_t r = 0; r < src.height; ++r)
        for (std::size_t c = 0; c < src.width; ++c)
            for (std::size_t ch = 0; ch < src.channels; ++ch) out.at(r, src.width - 1 - c, ch) = src.at(r, c, ch);
    return out;
}

inline Image flip_vertical(const Image& src) {
    Image out(src.height, src.width, src.channels);
    for (std::size_t r = 0; r < src.height; ++r)
        std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(r * src.width * src.channels), src.width * src.channels,
                    out.data.begin() + static_cast<std::ptrdiff_t>((src.height - 1 - r) * src.width * src.channels));
    return out;
}

inline Image crop(const Image& src, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    if (top + h > src.height || left + w > src.width)
        throw ShapeError("crop: window exceeds " + std::to_string(src.height) + "x" + std::to_string(src.width));
    Image out(h, w, src.channels);
    for (std::size_t r = 0; r < h; ++r)
        std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(((top + r) * src.width + left) * src.channels),
                    w * src.channels, out.data.begin() + static_cast<std::ptrdiff_t>(r * w * src.channels));
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct CropWindow {
    std::string_view tag;
    std::size_t top;
    std::size_t left;
};

/// Four corner windows and the centre window (offset floor((dim - crop) / 2)),
/// in the order tl, tr, bl, br, c.
inline std::array<CropWindow, 5> five_crop_windows(std::size_t h, std::size_t w, std::size_t size) {
    if (size == 0 || h < size || w < size)
        throw ShapeError("five_crop: input " + std::to_string(h) + "x" + std::to_string(w) + " smaller than crop " +
                         std::to_string(size));
    return {{{"tl", 0, 0},
             {"tr", 0, w - size},
             {"bl", h - size, 0},
             {"br", h - size, w - size},
             {"c", (h - size) / 2, (w - size) / 2}}};
}

inline std::array<ImagePair, 5> five_crop(const ImagePair& pair, std::size_t size = 256) {
    if (!pair.image.same_size(pair.mask)) throw ShapeError("five_crop: image and mask sizes differ");
    const auto windows = five_crop_windows(pair.image.height, pair.image.width, size);
    std::array<ImagePair, 5> out;
    for (std::size_t i = 0; i < 5; ++i) {
        const auto& win = windows[i];
        out[i] = {crop(pair.image, win.top, win.left, size, size), crop(pair.mask, win.top, win.left, size, size),
                  pair.source_id + "_" + std::string(win.tag)};
    }
    return out;
}

/// 15 training pairs: five crops of the identity, horizontally flipped and
/// vertically flipped pair, named <stem>_<variant>_<crop>.
inline std::vector<ImagePair> augment_expand(const ImagePair& pair, std::size_t size = 256) {
    const std::pair<std::string_view, ImagePair> variants[] = {
        {"id", pair},
        {"hf", {flip_horizontal(pair.image), flip_horizontal(pair.mask), pair.source_id}},
        {"vf", {flip_vertical(pair.image), flip_vertical(pair.mask), pair.source_id}},
    };
    std::vector<ImagePair> out;
    out.reserve(15);
    for (const auto& [variant, source] : variants) {
        const auto windows = five_crop_windows(source.image.height, source.image.width, size);
        for (const auto& win : windows)
            out.push_back({crop(source.image, win.top, win.left, size, size),
                           crop(source.mask, win.top, win.left, size, size),
                           pair.source_id + "_" + std::string(variant) + "_" + std::string(win.tag)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset discovery and splitting

enum class Split { Train, Test };

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

struct ManifestEntry {
    std::string image_path;
    std::string mask_path;
    Split split = Split::Train;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::uint64_t seed = 0;

    std::vector<ManifestEntry> subset(Split s) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.split == s) out.push_back(e);
        return out;
    }
};

/// Train share of a corpus of n pairs: floor(0.7 n).
constexpr std::size_t train_count(std::size_t n) { return n * 7 / 10; }

/// Pairs `<stem>.ppm` with `<stem>.pgm` in one directory. Unmatched files are
/// listed in the error.
inline std::vector<std::pair<std::string, std::string>> scan_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
    std::map<std::string, std::pair<std::string, std::string>> by_stem;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto ext = entry.path().extension().string();
        const auto stem = entry.path().stem().string();
        if (ext == ".ppm") by_stem[stem].first = entry.path().string();
        if (ext == ".pgm") by_stem[stem].second = entry.path().string();
    }
    std::vector<std::pair<std::string, std::string>> pairs;
    std::string unmatched;
    for (const auto& [stem, p] : by_stem) {
        if (p.first.empty() || p.second.empty())
            unmatched += "\n  " + (p.first.empty() ? p.second : p.first);
        else
            pairs.push_back(p);
    }
    if (!unmatched.empty()) throw DataError("unmatched files in " + dir.string() + ":" + unmatched);
    if (pairs.empty()) throw DataError("no image/mask pairs in " + dir.string());
    return pairs;
}

/// Seeded split: pairs are sorted by image path, shuffled with a seeded
/// Fisher-Yates pass, and the first floor(0.7 N) become the training set.
/// Entries keep the sorted order.
inline DatasetManifest split_dataset(std::vector<std::pair<std::string, std::string>> pairs, std::uint64_t seed) {
    if (pairs.empty()) throw DataError("split_dataset: empty manifest");
    if (pairs.size() < 2) throw DataError("split_dataset: need at least 2 pairs, got 1");
    std::sort(pairs.begin(), pairs.end());
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    std::vector<Split> split(pairs.size(), Split::Test);
    for (std::size_t k = 0; k < train_count(pairs.size()); ++k) split[order[k]] = Split::Train;
    DatasetManifest manifest;
    manifest.seed = seed;
    for (std::size_t i = 0; i < pairs.size(); ++i) manifest.entries.push_back({pairs[i].first, pairs[i].second, split[i]});
    return manifest;
}

inline std::string format_manifest(const DatasetManifest& manifest) {
    std::string out;
    for (const auto& e : manifest.entries)
        out += e.image_path + "\t" + e.mask_path + "\t" + std::string(to_string(e.split)) + "\n";
    return out;
}

inline void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    const auto text = format_manifest(manifest);
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    DatasetManifest manifest;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        ManifestEntry e;
        std::string split;
        if (!std::getline(fields, e.image_path, '\t') || !std::getline(fields, e.mask_path, '\t') ||
            !std::getline(fields, split))
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected image<TAB>mask<TAB>split");
        if (split == "train")
            e.split = Split::Train;
        else if (split == "test")
            e.split = Split::Test;
        else
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": unknown split '" + split + "'");
        manifest.entries.push_back(std::move(e));
    }
    if (manifest.entries.empty()) throw DataError("manifest " + path.string() + " is empty");
    return manifest;
}

inline ImagePair load_pair(const ManifestEntry& e) {
    ImagePair pair{load_image(e.image_path), binarize_mask(load_mask(e.mask_path)),
                   std::filesystem::path(e.image_path).stem().string()};
    if (!pair.image.same_size(pair.mask))
        throw DataError("image " + e.image_path + " and mask " + e.mask_path + " differ in size");
    return pair;
}

inline double positive_fraction(const std::vector<Image>& masks) {
    double positive = 0, total = 0;
    for (const auto& m : masks) {
        for (float v : m.data) positive += v > 0.5f ? 1.0 : 0.0;
        total += static_cast<double>(m.data.size());
    }
    return total > 0 ? positive / total : 0.0;
}

/// C x H x W tensor from an interleaved image.
template <typename T>
Tensor<T> to_tensor(const Image& img) {
    std::vector<T> out(img.data.size());
    const std::size_t plane = img.height * img.width;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t ch = 0; ch < img.channels; ++ch) out[ch * plane + p] = static_cast<T>(img.data[p * img.channels + ch]);
    return Tensor<T>(Shape{img.channels, img.height, img.width}, std::move(out));
}

template <typename T>
Image to_image(const Tensor<T>& t) {
    if (t.rank() != 3) throw ShapeError("to_image: expected C x H x W, got " + to_string(t.shape()));
    Image img(t.dim(1), t.dim(2), t.dim(0));
    const std::size_t plane = img.height * img.width;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t ch = 0; ch < img.channels; ++ch) img.data[p * img.channels + ch] = static_cast<float>(t[ch * plane + p]);
    return img;
}

}  // namespace gacunet
