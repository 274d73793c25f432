#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "gacunet/dataio.hpp"
#include "gacunet/synthetic.hpp"

namespace fs = std::filesystem;
using namespace gacunet;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("gacunet_dataio_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

Image random_image(std::size_t h, std::size_t w, std::size_t c, unsigned seed) {
    std::mt19937 rng(seed);
    Image img(h, w, c);
    for (auto& v : img.data) v = static_cast<float>(rng() % 256) / 255.0f;
    return img;
}

// Scalar reference: sample position (o + 0.5) * in / out - 0.5, clamped.
double bilinear_reference(const Image& src, std::size_t oy, std::size_t ox, std::size_t out_h, std::size_t out_w) {
    auto coord = [](std::size_t o, std::size_t in, std::size_t out) {
        double s = (o + 0.5) * double(in) / double(out) - 0.5;
        if (s < 0) s = 0;
        if (s > double(in - 1)) s = double(in - 1);
        return s;
    };
    const double sy = coord(oy, src.height, out_h), sx = coord(ox, src.width, out_w);
    const auto y0 = std::size_t(sy), x0 = std::size_t(sx);
    const auto y1 = y0 + 1 < src.height ? y0 + 1 : y0;
    const auto x1 = x0 + 1 < src.width ? x0 + 1 : x0;
    const double fy = sy - double(y0), fx = sx - double(x0);
    return (1 - fy) * (1 - fx) * src.at(y0, x0) + (1 - fy) * fx * src.at(y0, x1) + fy * (1 - fx) * src.at(y1, x0) +
           fy * fx * src.at(y1, x1);
}

bool images_equal(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.channels == b.channels && a.data == b.data;
}

}  // namespace

TEST(Netpbm, WhitePixmapLoadsAsOnes) {
    auto bytes = bytes_of("P6\n2 2\n255\n");
    bytes.insert(bytes.end(), 12, 255);
    const auto img = decode_netpbm(bytes, 3);
    EXPECT_EQ(img.height, 2u);
    EXPECT_EQ(img.width, 2u);
    for (float v : img.data) EXPECT_EQ(v, 1.0f);
}

TEST(Netpbm, BlackGraymapPixel) {
    auto bytes = bytes_of("P5 1 1 255 ");
    bytes.push_back(0);
    const auto img = decode_netpbm(bytes, 1);
    ASSERT_EQ(img.data.size(), 1u);
    EXPECT_EQ(img.data[0], 0.0f);
}

TEST(Netpbm, CommentsInHeader) {
    auto bytes = bytes_of("P5\n# made by hand\n2 1\n# max\n255\n");
    bytes.push_back(51);
    bytes.push_back(204);
    const auto img = decode_netpbm(bytes, 1);
    EXPECT_FLOAT_EQ(img.data[0], 0.2f);
    EXPECT_FLOAT_EQ(img.data[1], 0.8f);
}

TEST(Netpbm, RoundTripIsBitIdentical) {
    const auto dir = scratch_dir("roundtrip");
    const auto img = random_image(8, 8, 3, 7);
    save_image(img, dir / "a.ppm");
    const auto first = read_file_bytes(dir / "a.ppm");
    const auto loaded = load_image(dir / "a.ppm");
    EXPECT_TRUE(images_equal(img, loaded));
    save_image(loaded, dir / "b.ppm");
    EXPECT_EQ(first, read_file_bytes(dir / "b.ppm"));
}

TEST(Netpbm, ErrorsCarryByteOffsets) {
    try {
        decode_netpbm(bytes_of("P3\n1 1\n255\n"), 3);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    try {
        decode_netpbm(bytes_of("P5\n1 1\n65535\n\x01\x02"), 1);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 7u);
        EXPECT_NE(std::string(e.what()).find("max value"), std::string::npos);
    }
    try {
        decode_netpbm(bytes_of("P6\n2 2\n255\nabc"), 3);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 14u);
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }
    try {
        decode_netpbm(bytes_of("P6\nx 2\n255\n"), 3);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 3u);
    }
    EXPECT_THROW(decode_netpbm(bytes_of("P6\n2"), 3), ParseError);
}

TEST(Netpbm, MissingFileIsDataError) { EXPECT_THROW(load_image("/nonexistent/x.ppm"), DataError); }

TEST(Binarize, StrictThreshold) {
    Image m(1, 4, 1);
    m.data = {0.0f, 1.0f, 0.5f, 128.0f / 255.0f};
    const auto b = binarize_mask(m);
    EXPECT_EQ(b.data, (std::vector<float>{0, 1, 0, 1}));
}

TEST(Resize, ConstantStaysConstant) {
    Image img(3, 5, 3, 0.25f);
    const auto out = resize_bilinear(img, 7, 2);
    for (float v : out.data) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Resize, IdentityResize) {
    const auto img = random_image(6, 4, 3, 3);
    EXPECT_TRUE(images_equal(resize_bilinear(img, 6, 4), img));
}

TEST(Resize, CheckerboardMatchesScalarReference) {
    Image img(2, 2, 1);
    img.data = {0, 1, 1, 0};
    const auto out = resize_bilinear(img, 4, 4);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(r, c), bilinear_reference(img, r, c, 4, 4), 1e-7);
    EXPECT_FLOAT_EQ(out.at(0, 0), 0.0f);
    EXPECT_FLOAT_EQ(out.at(0, 1), 0.25f);
    EXPECT_FLOAT_EQ(out.at(1, 1), 0.375f);
}

TEST(Resize, RandomDownAndUpsampleMatchReference) {
    const auto img = random_image(9, 7, 1, 11);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{4, 3}, {13, 20}, {1, 1}}) {
        const auto out = resize_bilinear(img, h, w);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) EXPECT_NEAR(out.at(r, c), bilinear_reference(img, r, c, h, w), 1e-6);
    }
}

TEST(Resize, ZeroExtentRejected) { EXPECT_THROW(resize_bilinear(Image(2, 2, 1), 0, 2), ShapeError); }

TEST(Resize, PairMaskIsRebinarized) {
    ImagePair p{random_image(5, 5, 3, 1), Image(5, 5, 1), "p"};
    p.mask.at(2, 2) = 1.0f;
    const auto out = resize_pair(p, 12, 12);
    for (float v : out.mask.data) EXPECT_TRUE(v == 0.0f || v == 1.0f);
    EXPECT_EQ(out.image.height, out.mask.height);
}

TEST(FiveCrop, OffsetsFor512) {
    const auto w = five_crop_windows(512, 512, 256);
    const std::pair<std::size_t, std::size_t> expected[] = {{0, 0}, {0, 256}, {256, 0}, {256, 256}, {128, 128}};
    for (int i = 0; i < 5; ++i) {
        EXPECT_EQ(w[i].top, expected[i].first);
        EXPECT_EQ(w[i].left, expected[i].second);
    }
}

TEST(FiveCrop, DegenerateInputGivesIdenticalCrops) {
    ImagePair p{random_image(16, 16, 3, 2), binarize_mask(random_image(16, 16, 1, 3)), "s"};
    const auto crops = five_crop(p, 16);
    for (const auto& c : crops) {
        EXPECT_TRUE(images_equal(c.image, p.image));
        EXPECT_TRUE(images_equal(c.mask, p.mask));
    }
}

TEST(FiveCrop, CropsAreSubmatrices) {
    ImagePair p{random_image(11, 9, 3, 4), binarize_mask(random_image(11, 9, 1, 5)), "s"};
    const auto crops = five_crop(p, 4);
    const auto windows = five_crop_windows(11, 9, 4);
    EXPECT_EQ(windows[4].top, 3u);
    EXPECT_EQ(windows[4].left, 2u);
    for (int i = 0; i < 5; ++i)
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 4; ++c) {
                for (std::size_t ch = 0; ch < 3; ++ch)
                    EXPECT_EQ(crops[i].image.at(r, c, ch), p.image.at(windows[i].top + r, windows[i].left + c, ch));
                EXPECT_EQ(crops[i].mask.at(r, c), p.mask.at(windows[i].top + r, windows[i].left + c));
            }
}

TEST(FiveCrop, TooSmallInputRejected) {
    ImagePair p{Image(8, 8, 3), Image(8, 8, 1), "s"};
    EXPECT_THROW(five_crop(p, 9), ShapeError);
}

TEST(Augment, FifteenPairsWithNames) {
    ImagePair p{random_image(32, 32, 3, 6), binarize_mask(random_image(32, 32, 1, 7)), "scene"};
    const auto out = augment_expand(p, 16);
    ASSERT_EQ(out.size(), 15u);
    std::set<std::string> names;
    for (const auto& q : out) {
        names.insert(q.source_id);
        EXPECT_EQ(q.image.height, 16u);
        EXPECT_TRUE(q.image.same_size(q.mask));
    }
    EXPECT_EQ(names.size(), 15u);
    EXPECT_TRUE(names.count("scene_id_tl"));
    EXPECT_TRUE(names.count("scene_hf_br"));
    EXPECT_TRUE(names.count("scene_vf_c"));
}

TEST(Augment, HorizontallySymmetricImageHasEqualCropSets) {
    Image img = random_image(20, 20, 3, 8);
    for (std::size_t r = 0; r < 20; ++r)
        for (std::size_t c = 0; c < 10; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, 19 - c, ch) = img.at(r, c, ch);
    ImagePair p{img, Image(20, 20, 1), "sym"};
    const auto out = augment_expand(p, 12);
    std::vector<std::vector<float>> id_set, hf_set;
    for (int i = 0; i < 5; ++i) id_set.push_back(out[i].image.data);
    for (int i = 5; i < 10; ++i) hf_set.push_back(out[i].image.data);
    std::sort(id_set.begin(), id_set.end());
    std::sort(hf_set.begin(), hf_set.end());
    EXPECT_EQ(id_set, hf_set);
}

TEST(Augment, FlipsAreInvolutions) {
    const auto img = random_image(7, 5, 3, 9);
    EXPECT_TRUE(images_equal(flip_horizontal(flip_horizontal(img)), img));
    EXPECT_TRUE(images_equal(flip_vertical(flip_vertical(img)), img));
    EXPECT_FALSE(images_equal(flip_horizontal(img), img));
}

TEST(Split, CorpusOf290Counts) {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (int i = 0; i < 290; ++i) pairs.push_back({"img" + std::to_string(i) + ".ppm", "img" + std::to_string(i) + ".pgm"});
    const auto m = split_dataset(pairs, 42);
    EXPECT_EQ(m.subset(Split::Train).size(), 203u);
    EXPECT_EQ(m.subset(Split::Test).size(), 87u);
    EXPECT_EQ(m.subset(Split::Train).size() * 15, 3045u);
}

TEST(Split, SeedsChangeAssignmentNotSizes) {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (int i = 0; i < 10; ++i) pairs.push_back({"f" + std::to_string(i), "m" + std::to_string(i)});
    const auto a = split_dataset(pairs, 1), b = split_dataset(pairs, 2), a2 = split_dataset(pairs, 1);
    EXPECT_EQ(a.subset(Split::Train).size(), 7u);
    EXPECT_EQ(b.subset(Split::Train).size(), 7u);
    EXPECT_EQ(format_manifest(a), format_manifest(a2));
    EXPECT_NE(format_manifest(a), format_manifest(b));
}

TEST(Split, IndependentOfInputOrder) {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (int i = 0; i < 12; ++i) pairs.push_back({"f" + std::to_string(i), "m" + std::to_string(i)});
    auto reversed = pairs;
    std::reverse(reversed.begin(), reversed.end());
    EXPECT_EQ(format_manifest(split_dataset(pairs, 5)), format_manifest(split_dataset(reversed, 5)));
}

TEST(Split, TooFewPairsRejected) {
    EXPECT_THROW(split_dataset({}, 0), DataError);
    EXPECT_THROW(split_dataset({{"a", "b"}}, 0), DataError);
}

TEST(Manifest, WriteReadRoundTrip) {
    const auto dir = scratch_dir("manifest");
    std::vector<std::pair<std::string, std::string>> pairs;
    for (int i = 0; i < 6; ++i) pairs.push_back({"f" + std::to_string(i) + ".ppm", "f" + std::to_string(i) + ".pgm"});
    const auto m = split_dataset(pairs, 3);
    write_manifest(m, dir / "manifest.tsv");
    EXPECT_EQ(format_manifest(read_manifest(dir / "manifest.tsv")), format_manifest(m));
    std::ofstream(dir / "bad.tsv") << "a\tb\tvalidation\n";
    EXPECT_THROW(read_manifest(dir / "bad.tsv"), DataError);
}

TEST(Scan, MatchesStemsAndListsOrphans) {
    const auto dir = scratch_dir("scan");
    write_pairs(make_flood_set(3, 16, 1), dir);
    EXPECT_EQ(scan_dataset(dir).size(), 3u);
    save_mask(Image(4, 4, 1), dir / "orphan.pgm");
    try {
        scan_dataset(dir);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("orphan.pgm"), std::string::npos);
    }
    EXPECT_THROW(scan_dataset(scratch_dir("empty")), DataError);
}

TEST(Synthetic, DeterministicAndPlausible) {
    const auto a = make_flood_pair(64, 17, "a"), b = make_flood_pair(64, 17, "a");
    EXPECT_TRUE(images_equal(a.image, b.image));
    EXPECT_TRUE(images_equal(a.mask, b.mask));
    const auto set = make_flood_set(20, 64, 0);
    std::vector<Image> masks;
    for (const auto& p : set) masks.push_back(p.mask);
    const double frac = positive_fraction(masks);
    EXPECT_GT(frac, 0.1);
    EXPECT_LT(frac, 0.7);
}

TEST(Synthetic, FileRoundTripPreservesScene) {
    const auto dir = scratch_dir("synth");
    const auto set = make_flood_set(2, 32, 4);
    write_pairs(set, dir);
    const auto loaded = load_pair({(dir / "flood_001.ppm").string(), (dir / "flood_001.pgm").string(), Split::Train});
    EXPECT_TRUE(images_equal(loaded.image, set[1].image));
    EXPECT_TRUE(images_equal(loaded.mask, set[1].mask));
}

TEST(Synthetic, MulticlassTargetIsPartition) {
    const auto p = make_flood_pair(16, 3, "m");
    const auto t = multiclass_target<double>(p, 8);
    const std::size_t plane = 256;
    for (std::size_t px = 0; px < plane; ++px) {
        EXPECT_EQ(t[px] + t[plane + px], 1.0);
        double bands = 0;
        for (std::size_t k = 2; k < 8; ++k) bands += t[k * plane + px];
        EXPECT_EQ(bands, t[plane + px]);
    }
}

TEST(TensorConversion, ChannelMajorRoundTrip) {
    const auto img = random_image(3, 4, 3, 12);
    const auto t = to_tensor<double>(img);
    EXPECT_EQ(t.shape(), (Shape{3, 3, 4}));
    EXPECT_EQ(t[1 * 12 + 2 * 4 + 3], static_cast<double>(img.at(2, 3, 1)));
    EXPECT_TRUE(images_equal(to_image(t), img));
}
