#include "proxbin/autodiff.hpp"
#include "proxbin/errors.hpp"
#include "proxbin/quantizers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

namespace proxbin {
namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = n(rng);
    return t;
}

TEST(Matmul, IdentityTimesColumn) {
    Tape tape;
    const Var out = matmul(tape.constant(Tensor::matrix({{1, 0}, {0, 1}})), tape.constant(Tensor::matrix({{2}, {3}})));
    EXPECT_EQ(out.value(), Tensor::matrix({{2}, {3}}));
}

TEST(Matmul, RowTimesColumn) {
    Tape tape;
    const Var out = matmul(tape.constant(Tensor::matrix({{1, 2}})), tape.constant(Tensor::matrix({{3}, {4}})));
    EXPECT_EQ(out.value(), Tensor::matrix({{11}}));
}

TEST(Matmul, ShapeMismatchThrows) {
    Tape tape;
    EXPECT_THROW(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), DimensionError);
}

TEST(Conv2d, OnesSumToNine) {
    Tape tape;
    const Var out = conv2d(tape.constant(Tensor({1, 1, 3, 3}, 1.0)), tape.constant(Tensor({1, 1, 3, 3}, 1.0)));
    ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(out.value()[0], 9.0);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
    Tape tape;
    const Tensor x = random_tensor({2, 1, 5, 4}, 3);
    Tensor k({1, 1, 3, 3});
    k[4] = 1.0;
    const Var out = conv2d(tape.constant(x), tape.constant(k), 1, 1);
    EXPECT_EQ(out.value(), x);
}

TEST(Conv2d, KernelLargerThanInputThrows) {
    Tape tape;
    EXPECT_THROW(conv2d(tape.constant(Tensor({1, 1, 2, 2})), tape.constant(Tensor({1, 1, 3, 3}))), DimensionError);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
    Tape tape;
    const std::vector<int> labels{2};
    const Var loss = softmax_cross_entropy(tape.constant(Tensor({1, 4}, 0.3)), labels);
    EXPECT_NEAR(loss.value().item(), std::log(4.0), 1e-12);
    EXPECT_NEAR(loss.value().item(), 1.386294, 1e-6);
}

TEST(SoftmaxCrossEntropy, SaturatedTrueClass) {
    Tape tape;
    Tensor logits({1, 3});
    logits[1] = 1000.0;
    const std::vector<int> labels{1};
    const Var loss = softmax_cross_entropy(tape.constant(logits), labels);
    EXPECT_NEAR(loss.value().item(), 0.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
    Tape tape;
    const std::vector<int> labels{4};
    EXPECT_THROW(softmax_cross_entropy(tape.constant(Tensor({1, 4})), labels), IndexError);
}

TEST(ApplyCustom, SignWithIdentityBackward) {
    Tape tape;
    const Var x = tape.leaf(Tensor::vector({0.3, -2.0}));
    const QuantizerPair bc = make_pair("bc");
    const Var y = apply_custom(x, bc.custom_grad());
    EXPECT_EQ(y.value(), Tensor::vector({1.0, -1.0}));
    tape.backward(sum(y));
    EXPECT_EQ(x.grad(), Tensor::vector({1.0, 1.0}));
}

TEST(ApplyCustom, IdentityPassthrough) {
    Tape tape;
    const Tensor v = random_tensor({3, 2}, 7);
    const Var x = tape.leaf(v);
    const Var y = apply_custom(x, make_pair("fp").custom_grad());
    EXPECT_EQ(y.value(), v);
    tape.backward(sum(scale(y, 2.0)));
    EXPECT_EQ(x.grad(), Tensor(v.shape(), 2.0));
}

TEST(ApplyCustom, SignSwishGradientAtZero) {
    Tape tape;
    const Var x = tape.leaf(Tensor::vector({0.0}));
    QuantizerPair ss = make_pair("bnn++");
    ss.params().mu = 5.0;
    tape.backward(sum(apply_custom(x, ss.custom_grad())));
    EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(GradCheck, SumOfSquares) {
    const Tensor x = random_tensor({10}, 11);
    const double err = grad_check([](Tape&, Var v) { return sum(mul(v, v)); }, x);
    EXPECT_LT(err, 1e-7);
}

TEST(GradCheck, MatmulCrossEntropyPipeline) {
    const Tensor w = random_tensor({4, 3}, 12, 0.5);
    const Tensor input = random_tensor({5, 4}, 13);
    const std::vector<int> labels{0, 2, 1, 1, 0};
    const double err = grad_check(
        [&](Tape& tape, Var v) { return softmax_cross_entropy(matmul(tape.constant(input), v), labels); }, w);
    EXPECT_LT(err, 1e-5);
}

TEST(GradCheck, ConstantFunction) {
    const Tensor x = random_tensor({6}, 14);
    const double err = grad_check([](Tape& tape, Var) { return sum(tape.constant(Tensor({1}, 3.0))); }, x);
    EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, ConvPoolReluChain) {
    const Tensor k = random_tensor({2, 1, 3, 3}, 15, 0.5);
    const Tensor input = random_tensor({2, 1, 6, 6}, 16);
    const double err = grad_check(
        [&](Tape& tape, Var v) { return sum(max_pool2d(relu(conv2d(tape.constant(input), v, 1, 1)), 2)); }, k);
    EXPECT_LT(err, 1e-5);
}

TEST(GradCheck, LinearAndBias) {
    const Tensor w = random_tensor({3, 4}, 17, 0.5);
    const Tensor input = random_tensor({5, 4}, 18);
    const Tensor bias = random_tensor({3}, 19);
    const std::vector<int> labels{0, 2, 1, 1, 0};
    const double err = grad_check(
        [&](Tape& tape, Var v) {
            return softmax_cross_entropy(add_bias(linear(tape.constant(input), v), tape.constant(bias)), labels);
        },
        w);
    EXPECT_LT(err, 1e-5);
}

TEST(GradCheck, BatchNormTraining) {
    const Tensor x = random_tensor({4, 3}, 20);
    const Tensor g = random_tensor({3}, 21);
    const Tensor w = random_tensor({4, 3}, 22);
    const double err = grad_check(
        [&](Tape& tape, Var v) {
            BatchNormStats stats{Tensor({3}), Tensor({3}, 1.0)};
            const Var y = batch_norm(v, tape.constant(g), tape.constant(Tensor({3})), stats, true);
            return sum(mul(y, tape.constant(w)));
        },
        x);
    EXPECT_LT(err, 1e-5);
}

TEST(Tape, GradientsAccumulateOverReuse) {
    Tape tape;
    const Var x = tape.leaf(Tensor::vector({1.5, -2.0}));
    tape.backward(sum(add(x, x)));
    EXPECT_EQ(x.grad(), Tensor::vector({2.0, 2.0}));
}

} // namespace
} // namespace proxbin
