#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gacunet/synthetic.hpp"
#include "gacunet/train.hpp"

using namespace gacunet;

namespace {

ModelSpec tiny_spec() {
    ModelSpec s;
    s.input_size = 16;
    s.widths = {4, 8};
    s.seed = 3;
    return s;
}

std::vector<Sample<float>> tiny_set(std::size_t n, std::uint64_t seed = 1) {
    std::vector<Sample<float>> out;
    for (const auto& p : make_flood_set(n, 16, seed)) out.push_back(make_sample<float>(p));
    return out;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
    // With bias correction the first update is lr * g / (|g| + eps) per coordinate.
    TensorD p({3}, std::vector<double>{1.0, -2.0, 0.5});
    p.set_requires_grad(true);
    Adam<double> adam({p}, AdamOptions{});
    backward(sum(mul(p, TensorD({3}, std::vector<double>{4.0, -0.5, 0.0}))));
    adam.step();
    EXPECT_NEAR(p[0], 1.0 - 1e-3 * 4.0 / (4.0 + 1e-8), 1e-15);
    EXPECT_NEAR(p[1], -2.0 + 1e-3 * 0.5 / (0.5 + 1e-8), 1e-15);
    EXPECT_EQ(p[2], 0.5);
    EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, MatchesScalarRecurrence) {
    TensorD p({1}, std::vector<double>{0.3});
    p.set_requires_grad(true);
    AdamOptions o;
    o.lr = 0.05;
    Adam<double> adam({p}, o);
    double x = 0.3, m = 0, v = 0;
    for (int t = 1; t <= 25; ++t) {
        adam.zero_grad();
        backward(mul(mul(p, p), p));  // d/dx x^3
        const double g = 3 * x * x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        x -= o.lr / (1 - std::pow(0.9, t)) * m / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        adam.step();
        EXPECT_NEAR(p[0], x, 1e-12) << t;
    }
}

TEST(Adam, SkipsFrozenParameters) {
    TensorD a({2}, 1.0), b({2}, 1.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Adam<double> adam({a, b}, AdamOptions{});
    backward(sum(add(a, b)));
    b.set_requires_grad(false);
    adam.step();
    EXPECT_LT(a[0], 1.0);
    EXPECT_EQ(b[0], 1.0);
}

TEST(Shuffle, PermutationAndSeeded) {
    std::mt19937_64 r1(5), r2(5), r3(6);
    const auto a = shuffled_indices(50, r1), b = shuffled_indices(50, r2), c = shuffled_indices(50, r3);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Train, OneEpochOnFourPairs) {
    auto model = build_model<float>(tiny_spec());
    TrainOptions o;
    std::vector<EpochRecord> seen;
    const auto res = train(model, tiny_set(4), {}, o, [&](const EpochRecord& r) { seen.push_back(r); });
    ASSERT_EQ(res.epochs.size(), 1u);
    ASSERT_EQ(seen.size(), 1u);
    EXPECT_EQ(seen[0].epoch, 1u);
    EXPECT_TRUE(std::isfinite(seen[0].loss));
    EXPECT_GT(seen[0].loss, 0.0);
    EXPECT_FALSE(seen[0].val_dice.has_value());
}

TEST(Train, LossDecreasesOverEpochs) {
    auto model = build_model<float>(tiny_spec());
    TrainOptions o;
    o.epochs = 15;
    o.adam.lr = 5e-3;
    const auto res = train(model, tiny_set(4), {}, o);
    EXPECT_LT(res.epochs.back().loss, res.epochs.front().loss);
}

TEST(Train, FreezeEverythingKeepsBytes) {
    auto model = build_model<float>(tiny_spec());
    const auto before = serialize_model(model);
    TrainOptions o;
    o.epochs = 2;
    o.freeze = {"enc", "gat", "cheb", "dec", "head"};
    train(model, tiny_set(4), {}, o);
    EXPECT_EQ(serialize_model(model), before);
}

TEST(Train, FreezePrefixLeavesOthersTrainable) {
    auto model = build_model<float>(tiny_spec());
    const auto snapshot = model.clone();
    TrainOptions o;
    o.freeze = {"enc0."};
    train(model, tiny_set(4), {}, o);
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
        const auto& p = model.parameters()[i];
        const auto& q = snapshot.parameters()[i];
        const bool same = std::equal(p.value.data().begin(), p.value.data().end(), q.value.data().begin());
        if (p.name.rfind("enc0.", 0) == 0)
            EXPECT_TRUE(same) << p.name;
        else if (!p.is_bias)
            EXPECT_FALSE(same) << p.name;
    }
}

TEST(Train, DeterministicForSeed) {
    const auto run = [](std::uint64_t seed) {
        auto model = build_model<float>(tiny_spec());
        TrainOptions o;
        o.epochs = 2;
        o.batch_size = 3;
        o.seed = seed;
        std::vector<double> losses;
        train(model, tiny_set(7), {}, o, [&](const EpochRecord& r) { losses.push_back(r.loss); });
        return std::make_pair(serialize_model(model), losses);
    };
    const auto a = run(11), b = run(11), c = run(12);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    EXPECT_NE(a.first, c.first);
}

TEST(Train, NonFiniteLossNamesBatchAndSample) {
    auto model = build_model<float>(tiny_spec());
    auto data = tiny_set(4);
    data[2].input[5] = std::numeric_limits<float>::quiet_NaN();
    TrainOptions o;
    o.batch_size = 1;
    try {
        train(model, data, {}, o);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
        EXPECT_NE(msg.find(data[2].id), std::string::npos) << msg;
    }
    for (const auto& p : model.parameters()) EXPECT_FALSE(p.value.has_grad());
}

TEST(Train, BestValidationEpochIsRestored) {
    auto model = build_model<float>(tiny_spec());
    auto data = tiny_set(4);
    auto val = tiny_set(2, 9);
    TrainOptions o;
    o.epochs = 6;
    o.adam.lr = 5e-3;
    const auto res = train(model, data, val, o);
    ASSERT_TRUE(res.best_val_dice.has_value());
    double best = -1;
    for (const auto& r : res.epochs) best = std::max(best, *r.val_dice);
    EXPECT_EQ(*res.best_val_dice, best);
    EXPECT_NEAR(evaluate_samples(model, val).mean_dice, best, 1e-12);
}

TEST(Train, RejectsBadOptions) {
    auto model = build_model<float>(tiny_spec());
    TrainOptions o;
    EXPECT_THROW(train(model, {}, {}, o), DataError);
    o.batch_size = 0;
    EXPECT_THROW(train(model, tiny_set(2), {}, o), ConfigError);
}

TEST(Loss, ParseNames) {
    EXPECT_EQ(parse_loss("bce"), LossKind::Bce);
    EXPECT_EQ(parse_loss("dice"), LossKind::Dice);
    EXPECT_THROW(parse_loss("focal"), ConfigError);
}
