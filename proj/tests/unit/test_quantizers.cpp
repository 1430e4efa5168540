#include "proxbin/errors.hpp"
#include "proxbin/quantizers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace proxbin {
namespace {

TEST(SignQ, Examples) {
    EXPECT_EQ(sign_q(0.5), 1.0);
    EXPECT_EQ(sign_q(-2.0), -1.0);
    EXPECT_EQ(sign_q(0.0), 1.0);
}

TEST(LinearQuantizer, HorizontalShift) { EXPECT_NEAR(linear_quantizer(0.4, 0.2, 0.0), 0.5, 1e-15); }

TEST(LinearQuantizer, VerticalShiftBranch) {
    // 0.2 + 0.5 * (1 - 0.2) / 1
    EXPECT_NEAR(linear_quantizer(0.5, 0.0, 0.2), 0.6, 1e-15);
}

TEST(LinearQuantizer, Saturates) {
    for (double rho : {0.0, 0.3, 0.9})
        for (double varrho : {0.0, 0.4}) {
            EXPECT_EQ(linear_quantizer(2.0, rho, varrho), 1.0);
            EXPECT_EQ(linear_quantizer(-2.0, rho, varrho), -1.0);
        }
}

TEST(LinearQuantizer, ReachesSignAtOneMinusRho) {
    EXPECT_DOUBLE_EQ(linear_quantizer(0.1, 0.2, 0.0), 0.125);
    EXPECT_EQ(linear_quantizer(0.8, 0.2, 0.0), 1.0);
    EXPECT_EQ(linear_quantizer(-0.9, 0.2, 0.0), -1.0);
}

TEST(LinearQuantizer, MonotoneProperty) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> shift(0.0, 0.9);
    for (int trial = 0; trial < 50; ++trial) {
        const double rho = shift(rng), varrho = shift(rng);
        double prev = linear_quantizer(-3.0, rho, varrho);
        for (double w = -3.0; w <= 3.0; w += 0.001) {
            const double v = linear_quantizer(w, rho, varrho);
            ASSERT_GE(v, prev - 1e-15) << "rho " << rho << " varrho " << varrho << " w " << w;
            prev = v;
        }
    }
}

TEST(BnnProx, Examples) {
    EXPECT_EQ(bnn_prox(0.5, 2.0), 1.0);
    EXPECT_DOUBLE_EQ(bnn_prox(2.0, 2.0), 1.5);
    EXPECT_NEAR(bnn_prox(-3.0, 3.0), -5.0 / 3.0, 1e-15);
}

TEST(BnnProx, RejectsMuAtMostOne) { EXPECT_THROW(ProximalQuantizer::bnn(1.0), ConfigError); }

TEST(HardTanh, Examples) {
    EXPECT_EQ(hard_tanh(0.3), 0.3);
    EXPECT_EQ(hard_tanh(5.0), 1.0);
    EXPECT_EQ(hard_tanh(-2.0), -1.0);
}

TEST(SignSwish, Forward) {
    EXPECT_EQ(ss_forward(0.0, 3.0), 0.0);
    const double oracle = 5.0 / (std::cosh(5.0) * std::cosh(5.0)) + std::tanh(5.0);
    EXPECT_NEAR(ss_forward(1.0, 10.0), oracle, 1e-14);
    EXPECT_NEAR(ss_forward(1.0, 10.0), 1.00082, 1e-5);
    EXPECT_NEAR(ss_forward(50.0, 5.0), 1.0, 1e-12);
}

TEST(SignSwish, Backward) {
    EXPECT_EQ(ss_backward(0.0, 5.0), 5.0);
    EXPECT_LT(ss_backward(0.5, 10.0), 0.0);
}

TEST(SignSwish, BackwardMatchesFiniteDifference) {
    for (double mu : {1.0, 5.0, 10.0, 30.0})
        for (double w = -3.0; w <= 3.0; w += 0.05) {
            const double h = 1e-6;
            const double fd = (ss_forward(w + h, mu) - ss_forward(w - h, mu)) / (2 * h);
            EXPECT_NEAR(ss_backward(w, mu), fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
}

TEST(AppendixPairs, PolyPlusForward) {
    const QuantizerPair p = appendix_pairs("poly_plus");
    EXPECT_DOUBLE_EQ(p.forward(0.5), 0.75);
}

TEST(AppendixPairs, EdeBackwardAtZero) {
    EXPECT_DOUBLE_EQ(ede_backward(0.0, 1.0, 10.0), 10.0);
    QuantizerPair ede = appendix_pairs("ede");
    ede.params().mu = 10.0;
    EXPECT_DOUBLE_EQ(ede.backward(0.0), 10.0);
}

TEST(AppendixPairs, ReactStep) {
    const QuantizerPair p = appendix_pairs("react");
    EXPECT_EQ(p.forward(0.6), 1.0);
    EXPECT_EQ(p.forward(0.4), -1.0);
}

TEST(AppendixPairs, UnknownNameIsConfigError) {
    EXPECT_THROW(appendix_pairs("bnn"), ConfigError);
    EXPECT_THROW(make_pair("nope"), ConfigError);
}

TEST(MakePair, AllNamesResolve) {
    for (const std::string& name : pair_names()) EXPECT_EQ(make_pair(name).name(), name);
}

TEST(ComposeWithProx, IdentityLeavesPairUnchanged) {
    const QuantizerPair ss = make_pair("bnn++");
    const QuantizerPair c = compose_with_prox(ss, ProximalQuantizer::identity());
    for (double w = -2.0; w <= 2.0; w += 0.01) {
        EXPECT_EQ(c.forward(w), ss.forward(w));
        EXPECT_EQ(c.backward(w), ss.backward(w));
    }
}

TEST(ComposeWithProx, IdentityAfterSignIsBinaryConnect) {
    const QuantizerPair c = compose_with_prox(make_pair("fp"), ProximalQuantizer::sign());
    const QuantizerPair bc = make_pair("bc");
    for (double w = -2.0; w <= 2.0; w += 0.01) {
        EXPECT_EQ(c.forward(w), bc.forward(w));
        EXPECT_EQ(c.backward(w), bc.backward(w));
    }
}

TEST(ComposeWithProx, TwoStepEvaluation) {
    QuantizerPair ss = make_pair("bnn++");
    ss.params().mu = 5.0;
    const QuantizerPair c = compose_with_prox(ss, ProximalQuantizer::bnn(2.0));
    EXPECT_DOUBLE_EQ(c.forward(0.5), ss_forward(1.0, 5.0));
}

TEST(ProximalQuantizer, ZooIsMonotone) {
    const std::vector<ProximalQuantizer> zoo{ProximalQuantizer::identity(), ProximalQuantizer::sign(),
                                             ProximalQuantizer::linear(0.2, 0.1), ProximalQuantizer::bnn(3.0)};
    for (const ProximalQuantizer& p : zoo) {
        double prev = p(-4.0);
        for (double w = -4.0; w <= 4.0; w += 0.002) {
            ASSERT_GE(p(w), prev) << p.name() << " at " << w;
            prev = p(w);
        }
    }
}

} // namespace
} // namespace proxbin
