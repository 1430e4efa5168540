#include "proxbin/decomposition.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

namespace proxbin {
namespace {

TEST(CheckFactorization, BnnAdmits) {
    const DecompositionVerdict v = analyze_pair(make_pair("bnn"));
    EXPECT_TRUE(v.admits()) << v.detail;
}

TEST(CheckFactorization, BnnPlusFailsOnBackward) {
    const DecompositionVerdict v = analyze_pair(make_pair("bnn+"));
    EXPECT_FALSE(v.admits());
    EXPECT_EQ(v.reason, FailureReason::B_not_function_of_P);
}

TEST(CheckFactorization, BnnPlusPlusAdmitsWithIdentityP) {
    const DecompositionVerdict v = analyze_pair(make_pair("bnn++"));
    ASSERT_TRUE(v.admits()) << v.detail;
    const SampledCurve& c = v.curve;
    // P - w is constant: the identity up to the integration constant.
    const double offset = c.values.front() - c.grid.front();
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c.values[i] - c.grid[i], offset, 1e-6);
}

TEST(CheckFactorization, PlainPairs) {
    EXPECT_TRUE(analyze_pair(make_pair("fp")).admits());
    EXPECT_TRUE(analyze_pair(make_pair("bc")).admits());
    EXPECT_TRUE(analyze_pair(make_pair("pc")).admits());
}

TEST(CheckFactorization, AppendixVerdicts) {
    for (const char* name : {"poly+", "ede+", "react"}) EXPECT_TRUE(analyze_pair(make_pair(name)).admits()) << name;
    for (const char* name : {"bireal", "rbnn", "ede"}) {
        const DecompositionVerdict v = analyze_pair(make_pair(name));
        EXPECT_FALSE(v.admits()) << name;
        EXPECT_EQ(v.reason, FailureReason::B_not_function_of_P) << name;
    }
}

TEST(IntegrateP, BnnStepValues) {
    const SampledCurve c = integrate_P(make_pair("bnn"), -3.0, 3.0, 10001);
    ASSERT_EQ(c.jumps.size(), 1u);
    EXPECT_NEAR(c.jumps[0].location, 0.0, 1e-9);
    for (std::size_t i = 0; i < c.size(); ++i) {
        const double w = c.grid[i];
        if (std::abs(w) > 1.0 || std::abs(w) < 1e-9) continue;
        EXPECT_NEAR(c.values[i], w < 0 ? -1.0 : 1.0, 1e-9) << "w " << w;
    }
}

TEST(IntegrateP, TranslationConsistent) {
    for (const char* name : {"bnn", "bnn++", "pc", "poly+"}) {
        const QuantizerPair base = make_pair(name);
        const QuantizerPair::Map f = base.forward_map();
        const QuantizerPair shifted(
            base.name(), [f](double w, const QuantizerParams& q) { return f(w, q) + 0.75; }, base.backward_map(),
            base.params());
        const SampledCurve a = integrate_P(base);
        const SampledCurve b = integrate_P(shifted);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a.values[i], b.values[i], 1e-9) << name;
    }
}

TEST(IntegrateP, RejectsCoarseGrid) { EXPECT_THROW(integrate_P(make_pair("bnn"), -3, 3, 100), ConfigError); }

TEST(CheckFactorization, StableUnderGridRefinement) {
    for (const std::string& name : pair_names()) {
        const bool coarse = analyze_pair(make_pair(name), -3, 3, 10001).admits();
        const bool fine = analyze_pair(make_pair(name), -3, 3, 20001).admits();
        EXPECT_EQ(coarse, fine) << name;
    }
}

TEST(DerivativeRule, SignSwishMatchesRegisteredPair) {
    const QuantizerPair p = derivative_rule_pair(smooth_forward("ss", 5.0));
    for (double w = -3.0; w <= 3.0; w += 0.01) {
        EXPECT_NEAR(p.forward(w), ss_forward(w, 5.0), 1e-8);
        EXPECT_NEAR(p.backward(w), ss_backward(w, 5.0), 1e-8);
    }
}

TEST(DerivativeRule, TanhIsEdePlus) {
    const QuantizerPair p = derivative_rule_pair(smooth_forward("tanh", 10.0));
    for (double w = -3.0; w <= 3.0; w += 0.01) {
        const double sech = 1.0 / std::cosh(10 * w);
        EXPECT_NEAR(p.forward(w), std::tanh(10 * w), 1e-12);
        EXPECT_NEAR(p.backward(w), 10 * sech * sech, 1e-8);
    }
}

TEST(DerivativeRule, SignRejectedAtZero) {
    try {
        derivative_rule_pair(smooth_forward("sign"));
        FAIL() << "sign accepted";
    } catch (const SmoothnessError& e) {
        EXPECT_NEAR(e.location(), 0.0, 1e-6);
    }
}

TEST(DerivativeRule, HardTanhRejectedAtKink) {
    try {
        derivative_rule_pair(smooth_forward("hard_tanh"));
        FAIL() << "hard_tanh accepted";
    } catch (const SmoothnessError& e) {
        EXPECT_NEAR(std::abs(e.location()), 1.0, 1e-3);
    }
}

TEST(DerivativeRule, EveryBuiltPairAdmits) {
    for (const char* name : {"identity", "ss", "poly", "tanh"})
        for (double mu : {1.0, 5.0, 30.0}) {
            const DecompositionVerdict v = analyze_pair(derivative_rule_pair(smooth_forward(name, mu)));
            EXPECT_TRUE(v.admits()) << name << " mu " << mu << ": " << v.detail;
        }
}

TEST(DerivativeRule, CompositionRoundTrip) {
    const std::vector<ProximalQuantizer> zoo{ProximalQuantizer::identity(), ProximalQuantizer::sign(),
                                             ProximalQuantizer::linear(0.2), ProximalQuantizer::linear(0.0, 0.3),
                                             ProximalQuantizer::bnn(2.0)};
    const std::vector<ScalarFunction> transforms{smooth_forward("identity"), smooth_forward("tanh", 1.0),
                                                 smooth_forward("ss", 2.0)};
    for (const ScalarFunction& t : transforms)
        for (const ProximalQuantizer& p : zoo) {
            const QuantizerPair pair = compose_with_prox(derivative_rule_pair(t), p);
            const DecompositionVerdict v = analyze_pair(pair);
            EXPECT_TRUE(v.admits()) << t.name << " o " << p.name() << ": " << to_string(v.reason) << " " << v.detail;
        }
}

TEST(MoreauEnv, Examples) {
    EXPECT_EQ(moreau_env(1.0, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(moreau_env(0.0, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(moreau_env(0.5, 2.0), 0.0625);
}

TEST(WriteCurveCsv, HeaderAndRows) {
    const SampledCurve c = integrate_P(make_pair("bc"), -1.0, 1.0, 1001);
    std::ostringstream os;
    write_curve_csv(os, c);
    const std::string text = os.str();
    EXPECT_EQ(text.substr(0, 8), "w,P,F,B\n");
    EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), c.size() + 1);
}

} // namespace
} // namespace proxbin
