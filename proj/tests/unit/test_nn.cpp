#include "proxbin/errors.hpp"
#include "proxbin/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace proxbin {
namespace {

TEST(BinLinearForward, ScaledSignReproducesSymmetricWeights) {
    Tape tape;
    const Tensor w_star = Tensor::matrix({{0.5, -0.5}});
    const Var x = tape.constant(Tensor::matrix({{2.0, 3.0}}));
    const Var bin = bin_linear_forward(x, tape.leaf(w_star), make_pair("bc"), true);
    const Var fp = linear(x, tape.constant(w_star));
    EXPECT_EQ(bin.value(), fp.value());
}

TEST(BinLinearForward, UnscaledSign) {
    Tape tape;
    const Var out = bin_linear_forward(tape.constant(Tensor::matrix({{1.0, 1.0}})),
                                       tape.leaf(Tensor::matrix({{0.3, -2.0}})), make_pair("bc"), false);
    EXPECT_EQ(out.value().item(), 0.0);
}

TEST(BinLinearForward, IdentityIsStandardLinear) {
    Tape tape;
    const Tensor w = Tensor::matrix({{0.1, 0.7, -0.2}, {1.5, -0.3, 0.0}});
    const Var x = tape.constant(Tensor::matrix({{1, 2, 3}, {-1, 0, 4}}));
    const Var a = bin_linear_forward(x, tape.leaf(w), make_pair("fp"), false);
    const Var b = linear(x, tape.constant(w));
    EXPECT_EQ(a.value(), b.value());
}

TEST(BinLinearForward, BackwardCarriesScaleTimesB) {
    Tape tape;
    const Var w = tape.leaf(Tensor::matrix({{0.5, -1.5}}));
    QuantizerPair ss = make_pair("bnn++");
    ss.params().mu = 2.0;
    tape.backward(sum(bin_linear_forward(tape.constant(Tensor::matrix({{1.0, 1.0}})), w, ss, true)));
    EXPECT_NEAR(w.grad()[0], 1.0 * ss_backward(0.5, 2.0), 1e-12);
    EXPECT_NEAR(w.grad()[1], 1.0 * ss_backward(-1.5, 2.0), 1e-12);
}

TEST(BinActivation, Examples) {
    Tape tape;
    EXPECT_EQ(bin_activation(tape.constant(Tensor::vector({0.2, -0.1})), make_pair("bc")).value(),
              Tensor::vector({1.0, -1.0}));
    const Tensor v = Tensor::vector({0.2, -3.0, 7.0});
    EXPECT_EQ(bin_activation(tape.constant(v), make_pair("fp")).value(), v);
    QuantizerPair ss = make_pair("bnn++");
    ss.params().mu = 5.0;
    const Var x = tape.leaf(Tensor::vector({0.0, 0.0}));
    tape.backward(sum(bin_activation(x, ss)));
    EXPECT_EQ(x.grad(), Tensor::vector({5.0, 5.0}));
}

TEST(AccumulatorWrap, Examples) {
    const auto [in_range, r0] = accumulator_wrap(Tensor::vector({100}));
    EXPECT_EQ(in_range[0], 100.0);
    EXPECT_EQ(r0, 0.0);
    const auto [high, r1] = accumulator_wrap(Tensor::vector({300}));
    EXPECT_EQ(high[0], 44.0);
    EXPECT_EQ(r1, 1.0);
    const auto [low, r2] = accumulator_wrap(Tensor::vector({-129}));
    EXPECT_EQ(low[0], 127.0);
    EXPECT_EQ(r2, 1.0);
    const auto [mixed, r3] = accumulator_wrap(Tensor::vector({-128, 127, 128, 5}));
    EXPECT_EQ(mixed, Tensor::vector({-128, 127, -128, 5}));
    EXPECT_DOUBLE_EQ(r3, 0.25);
}

TEST(AccumulatorWrap, OnlyEightBits) { EXPECT_THROW(accumulator_wrap(Tensor::vector({1}), 4), ConfigError); }

TEST(BuildModel, BwaaNeedsBwa) {
    ModelOptions o;
    o.task.activations = false;
    o.task.accumulator_bits = 8;
    EXPECT_THROW(build_model(mlp_layers(4, {8}, 2), o), ConfigError);
}

TEST(BuildModel, BwOnlyBinarizesInteriorWeights) {
    ModelOptions o;
    o.task = TaskFlags::from_mode(TaskMode::BW);
    const Model m = build_model(mlp_layers(4, {8, 8}, 3), o);
    std::vector<bool> binarized;
    for (const LayerSpec& l : m.layers()) {
        EXPECT_FALSE(l.binarize_activations);
        if (l.has_weights()) binarized.push_back(l.binarize_weights);
    }
    EXPECT_EQ(binarized, (std::vector<bool>{false, true, false}));
    for (const Parameter& p : m.parameters()) {
        if (p.role != Parameter::Role::weight) {
            EXPECT_FALSE(p.binarized) << p.name;
        }
    }
}

TEST(BuildModel, BwaQuantizesActivationsBeforeBinaryLayers) {
    ModelOptions o;
    o.task = TaskFlags::from_mode(TaskMode::BWA);
    o.keep_first_last_fp = false;
    const Model m = build_model(mlp_layers(4, {8}, 3), o);
    for (const LayerSpec& l : m.layers())
        if (l.has_weights()) {
            EXPECT_TRUE(l.binarize_weights);
            EXPECT_TRUE(l.binarize_activations);
            EXPECT_FALSE(l.accumulator_bits.has_value());
        }
}

TEST(BuildModel, BwaaReportsOverflowPerLayer) {
    ModelOptions o;
    o.task = TaskFlags::from_mode(TaskMode::BWAA);
    o.keep_first_last_fp = false;
    Model m = build_model(mlp_layers(300, {16}, 3), o);
    m.initialize(3);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    Tensor input({5, 300});
    for (double& v : input.data()) v = std::abs(n(rng)) + 0.1;
    Tape tape;
    std::vector<Var> weights;
    for (const Parameter& p : m.parameters()) {
        Tensor w = p.value;
        if (p.binarized) {
            const double s = mean_abs(w);
            w.fill(s);
        }
        weights.push_back(tape.leaf(w));
    }
    const QuantizerPair bc = make_pair("bc");
    const ForwardResult r = m.forward(weights, tape.constant(input), {&bc, true});
    ASSERT_EQ(r.overflow.size(), 2u);
    EXPECT_EQ(r.overflow[0].first, m.layers()[0].name);
    EXPECT_EQ(r.overflow[0].second, 1.0);
    EXPECT_GE(r.overflow[1].second, 0.0);
    EXPECT_LE(r.overflow[1].second, 1.0);
    EXPECT_EQ(r.logits.shape(), (Shape{5, 3}));
}

TEST(Model, ParameterNamesAndInit) {
    Model a = build_model(cnn2_layers(1, 8, 4, 2, 3), {});
    Model b = build_model(cnn2_layers(1, 8, 4, 2, 3), {});
    a.initialize(9);
    b.initialize(9);
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    EXPECT_EQ(a.parameters().front().name, "conv2d0.weight");
}

TEST(Model, CnnForwardShapesAndGradient) {
    Model m = build_model(cnn2_layers(1, 8, 4, 2, 3), {});
    m.initialize(2);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u;
    Tensor input({3, 1, 8, 8});
    for (double& v : input.data()) v = u(rng);
    Tape tape;
    std::vector<Var> weights;
    for (const Parameter& p : m.parameters()) weights.push_back(tape.leaf(p.value));
    const QuantizerPair bc = make_pair("bc");
    const ForwardResult r = m.forward(weights, tape.constant(input), {&bc, true});
    EXPECT_EQ(r.logits.shape(), (Shape{3, 4}));
    const std::vector<int> labels{0, 1, 3};
    tape.backward(softmax_cross_entropy(r.logits, labels));
    for (const Var& w : weights) EXPECT_EQ(w.grad().shape(), w.shape());
}

TEST(Model, UnknownLayerKind) { EXPECT_THROW(parse_layer_kind("attention"), ConfigError); }

} // namespace
} // namespace proxbin
