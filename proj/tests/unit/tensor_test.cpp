#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "gacunet/gradcheck.hpp"
#include "gacunet/tensor.hpp"
#include "unit/test_util.hpp"

namespace gacunet {
namespace {

using testing::project;
using testing::random_tensor;

TEST(TensorTest, ShapeMustMatchData) {
    EXPECT_THROW(TensorD(Shape{2, 3}, std::vector<double>(5)), ShapeError);
    TensorD t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
}

TEST(TensorTest, SigmoidOfZeroIsHalf) {
    const auto y = sigmoid(TensorD::scalar(0.0));
    EXPECT_EQ(y.item(), 0.5);
}

TEST(TensorTest, SoftmaxOfSingletonIsOne) {
    const auto y = softmax(TensorD(Shape{1}, std::vector<double>{-3.7}), 0);
    EXPECT_EQ(y.item(), 1.0);
}

TEST(TensorTest, MatmulMatchesTripleLoop) {
    const auto a = random_tensor(Shape{2, 3}, 1);
    const auto b = random_tensor(Shape{3, 2}, 2);
    const auto c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 2}));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double expect = 0;
            for (std::size_t k = 0; k < 3; ++k) expect += a[i * 3 + k] * b[k * 2 + j];
            EXPECT_NEAR(c[i * 2 + j], expect, 1e-15);
        }
}

TEST(TensorTest, ShapeErrorNamesPrimitiveAndShapes) {
    const TensorD a(Shape{2, 3}), b(Shape{3, 2});
    try {
        add(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[3x2]"), std::string::npos);
    }
    EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(BackwardTest, SquareAtThree) {
    TensorD x = TensorD::scalar(3.0);
    x.set_requires_grad(true);
    backward(mul(x, x));
    EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(BackwardTest, ProductRule) {
    TensorD x = TensorD::scalar(2.0), y = TensorD::scalar(5.0);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    backward(mul(x, y));
    EXPECT_EQ(x.grad()[0], 5.0);
    EXPECT_EQ(y.grad()[0], 2.0);
}

TEST(BackwardTest, NonScalarLossIsRejected) {
    TensorD x = random_tensor(Shape{3}, 4);
    x.set_requires_grad(true);
    EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
    Tape<double>::current().clear();
}

TEST(BackwardTest, SecondBackwardOnSameRecordingIsRejected) {
    TensorD x = random_tensor(Shape{3}, 5);
    x.set_requires_grad(true);
    const auto loss = sum(exp(x));
    backward(loss);
    EXPECT_THROW(backward(loss), Error);
}

TEST(BackwardTest, TapeIsTopologicallyOrdered) {
    Tape<double>::current().clear();
    TensorD x = random_tensor(Shape{2, 2}, 6);
    x.set_requires_grad(true);
    const auto y = sigmoid(matmul(x, transpose(x)));
    const auto z = sum(y);
    auto& tape = Tape<double>::current();
    ASSERT_EQ(tape.size(), 4u);
    EXPECT_EQ(tape.op_name(0), "transpose");
    EXPECT_EQ(tape.op_name(1), "matmul");
    EXPECT_EQ(tape.op_name(2), "sigmoid");
    EXPECT_EQ(tape.op_name(3), "sum");
    EXPECT_LT(y.impl()->node, z.impl()->node);
    tape.clear();
}

TEST(BackwardTest, NoGradGuardSkipsRecording) {
    Tape<double>::current().clear();
    TensorD x = random_tensor(Shape{4}, 7);
    x.set_requires_grad(true);
    {
        NoGradGuard guard;
        const auto y = exp(x);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_EQ(Tape<double>::current().size(), 0u);
}

TEST(BackwardTest, RandomCompositeMatchesFiniteDifferences) {
    TensorD a = random_tensor(Shape{3, 4}, 10);
    TensorD b = random_tensor(Shape{4, 2}, 11);
    const auto fn = [&] {
        const auto h = sigmoid(matmul(a, b));                 // matmul, sigmoid
        const auto s = softmax(leaky_relu(h, 0.1), 1);        // leaky_relu, softmax
        return mean(log(add_scalar(mul(s, h), 1.0)));        // mul, log, mean
    };
    const auto r = grad_check<double>(fn, {a, b}, 1e-6, 1e-5);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(BackwardTest, SumOfLossesIsLinear) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TensorD x = random_tensor(Shape{3, 3}, 100 + seed);
        x.set_requires_grad(true);
        const auto f = [&] { return project(sigmoid(matmul(x, x)), 200 + seed); };
        const auto g = [&] { return sum(exp(scale(x, 0.5))); };

        backward(f());
        const std::vector<double> gf(x.grad().begin(), x.grad().end());
        x.zero_grad();
        backward(g());
        const std::vector<double> gg(x.grad().begin(), x.grad().end());
        x.zero_grad();
        backward(add(f(), g()));
        for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], gf[i] + gg[i], 1e-10);
    }
}

TEST(BackwardTest, ForwardIsDeterministic) {
    const auto run = [] {
        const auto a = random_tensor(Shape{8, 8}, 21);
        return softmax(sigmoid(matmul(a, transpose(a))), 0);
    };
    const auto y1 = run(), y2 = run();
    for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(GradCheckTest, LinearFunctionIsExact) {
    TensorD w = random_tensor(Shape{5}, 30), x = random_tensor(Shape{5}, 31);
    const auto r = grad_check<double>([&] { return sum(mul(w, x)); }, {w, x}, 1e-6, 1e-9);
    EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheckTest, SigmoidMatmulChain) {
    TensorD a = random_tensor(Shape{3, 3}, 32), b = random_tensor(Shape{3, 2}, 33);
    const auto r = grad_check<double>([&] { return project(sigmoid(matmul(a, b)), 34); }, {a, b}, 1e-6, 1e-5);
    EXPECT_LT(r.max_rel_error, 1e-5);
}

TensorD negated_square(const TensorD& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
    return record<double>("bad_square", x.shape(), std::move(out), {&x}, [x](std::span<const double> g) {
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = -2.0 * x[i] * g[i];
        send<double>(x, gx);
    });
}

TEST(GradCheckTest, DetectsWrongBackwardRule) {
    TensorD x = random_tensor(Shape{4}, 35, 0.5, 1.5);
    const auto r = grad_check<double>([&] { return sum(negated_square(x)); }, {x}, 1e-6, 1e-5);
    EXPECT_GT(r.max_rel_error, 0.1);
    EXPECT_FALSE(r.passed);
}

TEST(GradCheckTest, NonScalarOutputIsRejected) {
    TensorD x = random_tensor(Shape{4}, 36);
    EXPECT_THROW(grad_check<double>([&] { return exp(x); }, {x}, 1e-6, 1e-5), ShapeError);
    Tape<double>::current().clear();
}

// Every primitive, random inputs, 64-bit, step 1e-6.
struct PrimitiveCase {
    const char* name;
    std::function<TensorD(const TensorD&, const TensorD&)> fn;
};

class PrimitiveGradTest : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradTest, FiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        TensorD a = random_tensor(Shape{3, 4}, 40 + seed, 0.1, 1.0);
        TensorD b = random_tensor(Shape{3, 4}, 50 + seed, -1.0, 1.0);
        const auto& fn = GetParam().fn;
        const auto r = grad_check<double>([&] { return project(fn(a, b), 60 + seed); }, {a, b}, 1e-6, 1e-5);
        EXPECT_LT(r.max_rel_error, 1e-5) << GetParam().name << " seed " << seed;
    }
}

INSTANTIATE_TEST_SUITE_P(
    AllPrimitives, PrimitiveGradTest,
    ::testing::Values(
        PrimitiveCase{"add", [](const TensorD& a, const TensorD& b) { return add(a, b); }},
        PrimitiveCase{"sub", [](const TensorD& a, const TensorD& b) { return sub(a, b); }},
        PrimitiveCase{"mul", [](const TensorD& a, const TensorD& b) { return mul(a, b); }},
        PrimitiveCase{"matmul", [](const TensorD& a, const TensorD& b) { return matmul(a, transpose(b)); }},
        PrimitiveCase{"concat", [](const TensorD& a, const TensorD& b) { return concat<double>({a, b}, 1); }},
        PrimitiveCase{"slice", [](const TensorD& a, const TensorD& b) { return mul(slice(a, 1, 1, 3), slice(b, 1, 0, 2)); }},
        PrimitiveCase{"reshape", [](const TensorD& a, const TensorD& b) { return mul(reshape(a, Shape{4, 3}), reshape(b, Shape{4, 3})); }},
        PrimitiveCase{"sum_axis", [](const TensorD& a, const TensorD& b) { return sum_axis(mul(a, b), 0); }},
        PrimitiveCase{"mean", [](const TensorD& a, const TensorD& b) { return add(mean(a), mean(mul(b, b))); }},
        PrimitiveCase{"mean_axis", [](const TensorD& a, const TensorD&) { return mean_axis(a, 1); }},
        PrimitiveCase{"broadcast_to", [](const TensorD& a, const TensorD& b) { return mul(broadcast_to(slice(a, 0, 0, 1), Shape{3, 4}), b); }},
        PrimitiveCase{"exp", [](const TensorD& a, const TensorD& b) { return exp(mul(a, b)); }},
        PrimitiveCase{"log", [](const TensorD& a, const TensorD&) { return log(a); }},
        PrimitiveCase{"sigmoid", [](const TensorD&, const TensorD& b) { return sigmoid(scale(b, 3.0)); }},
        PrimitiveCase{"relu", [](const TensorD& a, const TensorD& b) { return mul(relu(b), a); }},
        PrimitiveCase{"leaky_relu", [](const TensorD& a, const TensorD& b) { return mul(leaky_relu(b, 0.2), a); }},
        PrimitiveCase{"softmax0", [](const TensorD& a, const TensorD& b) { return softmax(mul(a, b), 0); }},
        PrimitiveCase{"softmax1", [](const TensorD& a, const TensorD& b) { return softmax(add(a, b), 1); }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(TensorTest, LogClampsAtFloor) {
    const auto y = log(TensorD(Shape{2}, std::vector<double>{0.0, -1.0}));
    EXPECT_TRUE(std::isfinite(y[0]));
    EXPECT_NEAR(y[0], std::log(1e-12), 1e-9);
    EXPECT_EQ(y[0], y[1]);
}

TEST(TensorTest, BroadcastRejectsIncompatibleShapes) {
    EXPECT_THROW(broadcast_to(TensorD(Shape{2, 3}), Shape{4, 3}), ShapeError);
    EXPECT_THROW(broadcast_to(TensorD(Shape{3}), Shape{1, 3}), ShapeError);
}

}  // namespace
}  // namespace gacunet
