#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gacunet/model.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace gacunet;
using gacunet::testing::random_tensor;

namespace {

ModelSpec small_spec(std::size_t size, std::vector<std::size_t> widths, Variant v = Variant::GacUnet) {
    ModelSpec s;
    s.input_size = size;
    s.widths = std::move(widths);
    s.variant = v;
    return s;
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / "gacunet_model_test";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(ModelSpecTest, Validation) {
    EXPECT_NO_THROW(small_spec(64, {8, 16}).validate());
    EXPECT_THROW(small_spec(64, {}).validate(), ConfigError);
    EXPECT_THROW(small_spec(60, {8, 16, 32}).validate(), ConfigError);
    EXPECT_THROW(small_spec(64, {8, 0}).validate(), ConfigError);
    auto s = small_spec(64, {8});
    s.graph.connectivity = 6;
    EXPECT_THROW(s.validate(), ConfigError);
    try {
        small_spec(20, {8, 16, 32}).validate();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("divisible by 2^3"), std::string::npos);
    }
}

TEST(ModelSpecTest, TextRoundTrip) {
    auto s = small_spec(32, {4, 8}, Variant::PlainUnet);
    s.graph.connectivity = 8;
    s.graph.cheb_order = 3;
    s.graph.center_of_mass = false;
    s.seed = 99;
    EXPECT_EQ(ModelSpec::from_text(s.to_text()), s);
    EXPECT_THROW(ModelSpec::from_text("input_size=64\nmystery=1\n"), DataError);
}

TEST(ModelBuild, ParameterCountsMatchShapeEnumeration) {
    // Reference values printed by tests/oracles/param_count.py.
    auto s = small_spec(64, {8});
    s.graph.gat_out = 8;
    s.graph.cheb_order = 2;
    s.graph.cheb_out = 8;
    EXPECT_EQ(Model<float>(s).parameter_count(), 2393u);
    EXPECT_EQ(Model<float>(small_spec(64, {8, 16}, Variant::PlainUnet)).parameter_count(), 10665u);
    EXPECT_EQ(Model<float>(small_spec(64, {8, 16})).parameter_count(), 12009u);
    EXPECT_EQ(Model<float>(small_spec(256, {16, 32, 64})).parameter_count(), 198161u);
    EXPECT_EQ(Model<float>(small_spec(64, {8, 16, 32})).parameter_count(), 50057u);
}

TEST(ModelBuild, GacHasMoreParametersThanPlain) {
    EXPECT_GT(Model<float>(small_spec(64, {8, 16})).parameter_count(),
              Model<float>(small_spec(64, {8, 16}, Variant::PlainUnet)).parameter_count());
}

TEST(ModelBuild, UniqueNamesInDeclarationOrder) {
    Model<float> m(small_spec(32, {4, 8}));
    std::vector<std::string> names;
    for (const auto& p : m.parameters()) names.push_back(p.name);
    const std::vector<std::string> expected{
        "enc0.conv.weight", "enc0.conv.bias", "enc0.dconv.weight", "enc0.dconv.bias", "enc1.conv.weight",
        "enc1.conv.bias",   "enc1.dconv.weight", "enc1.dconv.bias", "gat.weight", "gat.attention",
        "cheb.theta0",      "cheb.theta1",    "cheb.theta2",      "dec1.conv.weight", "dec1.conv.bias",
        "dec0.conv.weight", "dec0.conv.bias", "head.weight",      "head.bias"};
    EXPECT_EQ(names, expected);
    EXPECT_EQ(m.parameter("dec1.conv.weight").shape(), (Shape{8, 18, 3, 3}));
    EXPECT_THROW(m.parameter("nope"), Error);
}

TEST(ModelInit, DeterministicPerSeed) {
    auto a = build_model<float>(small_spec(32, {4, 8}));
    auto b = build_model<float>(small_spec(32, {4, 8}));
    auto spec = small_spec(32, {4, 8});
    spec.seed = 1;
    auto c = build_model<float>(spec);
    EXPECT_EQ(serialize_model(a), serialize_model(b));
    EXPECT_NE(serialize_model(a), serialize_model(c));
}

TEST(ModelInit, BoundsZeroBiasesAndCenteredMeans) {
    auto m = build_model<double>(small_spec(64, {16, 32}));
    for (const auto& p : m.parameters()) {
        const auto d = p.value.data();
        if (p.is_bias) {
            for (double v : d) EXPECT_EQ(v, 0.0);
            continue;
        }
        const double bound = std::sqrt(6.0 / double(p.fan_in + p.fan_out));
        double mean = 0;
        for (double v : d) {
            EXPECT_LE(std::abs(v), bound);
            mean += v;
        }
        mean /= double(d.size());
        const double sigma = bound / std::sqrt(3.0 * double(d.size()));
        EXPECT_LT(std::abs(mean), 3 * sigma) << p.name;
    }
}

TEST(ModelForward, DefaultSpecShapeAndRange) {
    auto m = build_model<float>(ModelSpec{});
    const auto x = random_tensor<float>({3, 256, 256}, 1, 0.0, 1.0);
    NoGradGuard guard;
    const auto y = forward(m, x);
    EXPECT_EQ(y.shape(), (Shape{1, 256, 256}));
    for (float v : y.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(ModelForward, RandomSpecsPreserveSpatialShape) {
    std::mt19937 rng(4);
    for (int trial = 0; trial < 12; ++trial) {
        ModelSpec s;
        const std::size_t stages = 1 + rng() % 3;
        s.widths.clear();
        for (std::size_t i = 0; i < stages; ++i) s.widths.push_back(1 + rng() % 6);
        s.input_size = (std::size_t{1} << stages) * (1 + rng() % 3);
        s.variant = rng() % 2 ? Variant::GacUnet : Variant::PlainUnet;
        s.graph.connectivity = rng() % 2 ? 4 : 8;
        s.graph.cheb_order = rng() % 4;
        s.graph.gat_out = rng() % 5;
        s.graph.center_of_mass = rng() % 2;
        s.seed = trial;
        auto m = build_model<double>(s);
        NoGradGuard guard;
        const auto y = forward(m, random_tensor<double>({3, s.input_size, s.input_size}, trial, 0.0, 1.0));
        EXPECT_EQ(y.shape(), (Shape{1, s.input_size, s.input_size})) << s.to_text();
    }
}

TEST(ModelForward, WrongInputShapeRejected) {
    auto m = build_model<float>(small_spec(16, {4}));
    EXPECT_THROW(forward(m, TensorF({3, 8, 8})), ShapeError);
    EXPECT_THROW(forward(m, TensorF({1, 16, 16})), ShapeError);
}

TEST(ModelForward, VariantsShareEncoderFeatures) {
    auto gac = build_model<double>(small_spec(32, {4, 8}));
    auto plain = build_model<double>(small_spec(32, {4, 8}, Variant::PlainUnet));
    const auto x = random_tensor<double>({3, 32, 32}, 3, 0.0, 1.0);
    NoGradGuard guard;
    const auto a = encode(gac, x), b = encode(plain, x);
    ASSERT_EQ(a.skips.size(), b.skips.size());
    for (std::size_t s = 0; s < a.skips.size(); ++s)
        EXPECT_TRUE(std::equal(a.skips[s].data().begin(), a.skips[s].data().end(), b.skips[s].data().begin()));
    EXPECT_TRUE(std::equal(a.pooled.data().begin(), a.pooled.data().end(), b.pooled.data().begin()));
}

TEST(ModelForward, Deterministic) {
    auto m = build_model<float>(small_spec(32, {4, 8}));
    const auto x = random_tensor<float>({3, 32, 32}, 8, 0.0, 1.0);
    NoGradGuard guard;
    const auto a = forward(m, x), b = forward(m, x);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ModelIo, RoundTripIsBitExact) {
    auto spec = small_spec(32, {4, 8});
    spec.seed = 5;
    auto m = build_model<float>(spec);
    save_model(m, scratch("rt.gacm"));
    auto loaded = load_model<float>(scratch("rt.gacm"));
    EXPECT_EQ(loaded.spec(), m.spec());
    EXPECT_EQ(serialize_model(loaded), serialize_model(m));
    const auto x = random_tensor<float>({3, 32, 32}, 2, 0.0, 1.0);
    NoGradGuard guard;
    const auto a = forward(m, x), b = forward(loaded, x);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ModelIo, FileSizeIsHeaderPlusParameters) {
    const auto spec = small_spec(16, {4, 8});
    auto mf = build_model<float>(spec);
    auto md = build_model<double>(spec);
    const std::size_t text = spec.to_text().size();
    EXPECT_EQ(serialize_model(mf).size(), 16 + text + 4 * mf.parameter_count());
    EXPECT_EQ(serialize_model(md).size(), 16 + text + 8 * md.parameter_count());
    save_model(md, scratch("d.gacm"));
    EXPECT_EQ(fs::file_size(scratch("d.gacm")), 16 + text + 8 * md.parameter_count());
    EXPECT_EQ(peek_float_width(scratch("d.gacm")), 8);
}

TEST(ModelIo, CorruptFilesRejected) {
    auto bytes = serialize_model(build_model<float>(small_spec(16, {4})));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize_model<float>(bad_magic), DataError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_THROW(deserialize_model<float>(bad_version), DataError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    EXPECT_THROW(deserialize_model<float>(truncated), DataError);
    auto padded = bytes;
    padded.push_back(0);
    EXPECT_THROW(deserialize_model<float>(padded), DataError);
    EXPECT_THROW(deserialize_model<double>(bytes), DataError);
    EXPECT_THROW(deserialize_model<float>(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10)), DataError);
}

TEST(ModelIo, CloneIsIndependent) {
    auto m = build_model<float>(small_spec(16, {4}));
    auto c = m.clone();
    EXPECT_EQ(serialize_model(c), serialize_model(m));
    c.parameters()[0].value[0] += 1.0f;
    EXPECT_NE(serialize_model(c), serialize_model(m));
}

TEST(Checksum, Fnv1aKnownValues) {
    const std::string a = "a";
    EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(a.data()), 1)), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(hex64(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
}
