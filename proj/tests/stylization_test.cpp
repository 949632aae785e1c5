#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "imsty/grad_check.hpp"
#include "imsty/ops.hpp"
#include "imsty/rng.hpp"
#include "imsty/stylization.hpp"

using namespace imsty;

namespace {

Tensor randn(std::vector<std::size_t> shape, std::uint64_t seed, double mean = 0.0,
             double stddev = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.raw()) v = rng.normal(mean, stddev);
    return t;
}

// Brute-force moment oracle, independent of the stats implementation.
void brute_moments(const Tensor& x, std::size_t c, double& mean, double& var) {
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    mean = 0.0;
    var = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) mean += x.raw()[(n * C + c) * HW + i];
    }
    mean /= static_cast<double>(N * HW);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            const double d = x.raw()[(n * C + c) * HW + i] - mean;
            var += d * d;
        }
    }
    var /= static_cast<double>(N * HW);
}

}  // namespace

TEST(ChannelStats, ConstantTensorHitsEpsFloor) {
    Tensor x = Tensor::full({2, 3, 4, 4}, 3.0);
    ChannelStats st = compute_channel_stats(x, StatScope::minibatch, 1e-5);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_DOUBLE_EQ(st.mu(c), 3.0);
        EXPECT_NEAR(st.sigma(c), std::sqrt(1e-5), 1e-15);
    }
}

TEST(ChannelStats, HandSummedPopulationMoments) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    const double eps = 1e-5;
    ChannelStats st = compute_channel_stats(x, StatScope::minibatch, eps);
    EXPECT_DOUBLE_EQ(st.mu(0), 2.5);
    EXPECT_NEAR(st.sigma(0), std::sqrt(1.25 + eps), 1e-15);
}

TEST(ChannelStats, InvariantUnderSpatialPermutation) {
    Tensor x = randn({2, 3, 4, 4}, 7);
    Tensor perm = x.detach();
    // reverse each channel's spatial block
    const std::size_t HW = 16;
    for (std::size_t g = 0; g < x.numel() / HW; ++g) {
        std::reverse(perm.raw().begin() + static_cast<std::ptrdiff_t>(g * HW),
                     perm.raw().begin() + static_cast<std::ptrdiff_t>((g + 1) * HW));
    }
    ChannelStats a = compute_channel_stats(x, StatScope::minibatch, 1e-5);
    ChannelStats b = compute_channel_stats(perm, StatScope::minibatch, 1e-5);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(a.mu(c), b.mu(c), 1e-12);
        EXPECT_NEAR(a.sigma(c), b.sigma(c), 1e-12);
    }
}

TEST(ChannelStats, RejectsDegenerateAndInvalidInput) {
    EXPECT_THROW(compute_channel_stats(Tensor(), StatScope::minibatch, 1e-5), std::invalid_argument);
    Tensor tiny({1, 3, 1, 1});
    EXPECT_THROW(compute_channel_stats(tiny, StatScope::per_instance, 1e-5), std::invalid_argument);
    Tensor x({2, 3, 4, 4});
    EXPECT_THROW(compute_channel_stats(x, StatScope::minibatch, 0.0), std::invalid_argument);
}

TEST(ChannelStats, PerInstanceScopeShape) {
    Tensor x = randn({3, 5, 4, 4}, 8);
    ChannelStats st = compute_channel_stats(x, StatScope::per_instance, 1e-5);
    EXPECT_EQ(st.mu.shape(), (std::vector<std::size_t>{3, 5}));
    EXPECT_EQ(st.sigma.shape(), (std::vector<std::size_t>{3, 5}));
    // per-instance mean of sample 0 channel 0 equals the plain mean of that block
    double m = 0.0;
    for (std::size_t i = 0; i < 16; ++i) m += x.raw()[i];
    EXPECT_NEAR(st.mu(0, 0), m / 16.0, 1e-12);
}

TEST(NormalizeFeatures, OwnStatsGiveZeroMeanUnitStd) {
    Tensor x = randn({4, 3, 16, 16}, 9, 2.0, 3.0);
    ChannelStats st = compute_channel_stats(x, StatScope::minibatch, 1e-5);
    Tensor n = normalize_features(x, st);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean, var;
        brute_moments(n, c, mean, var);
        EXPECT_LT(std::abs(mean), 1e-6);
        EXPECT_LT(std::abs(std::sqrt(var) - 1.0), 1e-4);
    }
}

TEST(NormalizeFeatures, NormalizingTwiceEqualsOnce) {
    // Large per-channel counts keep the sample variance near 1, where the
    // eps term of the second normalization cancels to O(eps * |v - 1|).
    Tensor x = randn({16, 4, 32, 32}, 10);
    ChannelStats st1 = compute_channel_stats(x, StatScope::minibatch, 1e-5);
    Tensor n1 = normalize_features(x, st1);
    ChannelStats st2 = compute_channel_stats(n1, StatScope::minibatch, 1e-5);
    Tensor n2 = normalize_features(n1, st2);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        max_diff = std::max(max_diff, std::abs(n2.raw()[i] - n1.raw()[i]));
    }
    EXPECT_LT(max_diff, 1e-6);
}

TEST(NormalizeFeatures, ConstantTensorMapsToZeros) {
    Tensor x = Tensor::full({2, 2, 4, 4}, 1.25);
    Tensor n = normalize_features(x, compute_channel_stats(x, StatScope::minibatch, 1e-5));
    for (double v : n.raw()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(NormalizeFeatures, ChannelMismatchIsAnError) {
    Tensor x = randn({2, 3, 4, 4}, 11);
    Tensor other = randn({2, 5, 4, 4}, 12);
    ChannelStats st = compute_channel_stats(other, StatScope::minibatch, 1e-5);
    EXPECT_THROW(normalize_features(x, st), std::invalid_argument);
}

TEST(NormalizeFeatures, ScaleEquivariantUpToEpsFloor) {
    Tensor x = randn({4, 3, 8, 8}, 13);
    const double eps = 1e-12;
    Tensor n1 = normalize_features(x, compute_channel_stats(x, StatScope::minibatch, eps));
    for (double c : {2.0, 10.0}) {
        Tensor xs = mul_scalar(x, c);
        Tensor n2 = normalize_features(xs, compute_channel_stats(xs, StatScope::minibatch, eps));
        double max_diff = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            max_diff = std::max(max_diff, std::abs(n2.raw()[i] - n1.raw()[i]));
        }
        EXPECT_LT(max_diff, 1e-8) << "scale " << c;
    }
}

TEST(ImplicitStylize, AlphaZeroIsBitExactIdentity) {
    Tensor a = randn({2, 3, 8, 8}, 14);
    Tensor b = randn({2, 3, 8, 8}, 15, 5.0, 2.0);
    Tensor out = implicit_stylize(a, b, 0.0, StatScope::minibatch);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(out.raw()[i], a.raw()[i]);
}

TEST(ImplicitStylize, AlphaOneOnSelfIsIdentity) {
    Tensor a = randn({2, 3, 8, 8}, 16);
    Tensor out = implicit_stylize(a, a, 1.0, StatScope::minibatch);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(out.raw()[i], a.raw()[i], 1e-10);
}

TEST(ImplicitStylize, SelfStylizationNeutralAcrossAlphas) {
    Tensor f = randn({2, 4, 8, 8}, 17, 1.0, 2.0);
    for (double alpha : {0.0, 0.25, 0.5, 1.0}) {
        Tensor out = implicit_stylize(f, f, alpha, StatScope::minibatch);
        for (std::size_t i = 0; i < f.numel(); ++i) {
            ASSERT_NEAR(out.raw()[i], f.raw()[i], 1e-10) << "alpha " << alpha;
        }
    }
}

TEST(ImplicitStylize, AlphaOneTransfersMoments) {
    // compute_channel_stats(output) equals compute_channel_stats(f_b) per channel.
    Tensor a = randn({4, 3, 16, 16}, 18, -1.0, 1.0);
    Tensor b = randn({4, 3, 16, 16}, 19, 2.0, 1.0);
    Tensor out = implicit_stylize(a, b, 1.0, StatScope::minibatch);
    for (std::size_t c = 0; c < 3; ++c) {
        double mo, vo, mb, vb;
        brute_moments(out, c, mo, vo);
        brute_moments(b, c, mb, vb);
        EXPECT_NEAR(mo, mb, 1e-6);
        EXPECT_NEAR(std::sqrt(vo), std::sqrt(vb), 1e-6);
    }
}

TEST(ImplicitStylize, RejectsBadArguments) {
    Tensor a = randn({2, 3, 4, 4}, 20);
    Tensor b = randn({2, 5, 4, 4}, 21);
    EXPECT_THROW(implicit_stylize(a, b, 0.5, StatScope::minibatch), std::invalid_argument);
    Tensor b2 = randn({2, 3, 4, 4}, 22);
    EXPECT_THROW(implicit_stylize(a, b2, -0.1, StatScope::minibatch), std::invalid_argument);
    EXPECT_THROW(implicit_stylize(a, b2, 1.1, StatScope::minibatch), std::invalid_argument);
}

TEST(ImplicitStylize, GradFlowsThroughBothInputs) {
    Tensor a = randn({2, 3, 6, 6}, 23);
    Tensor b = randn({2, 3, 6, 6}, 24, 1.0, 2.0);
    const double err_a = grad_check(
        [&](const Tensor& in) {
            Tensor out = implicit_stylize(in, b, 0.7, StatScope::minibatch);
            return mean_all(mul(out, out));
        },
        a, 1e-5);
    EXPECT_LT(err_a, 1e-4);
    const double err_b = grad_check(
        [&](const Tensor& in) {
            Tensor out = implicit_stylize(a, in, 0.7, StatScope::minibatch);
            return mean_all(mul(out, out));
        },
        b, 1e-5);
    EXPECT_LT(err_b, 1e-4);
}

TEST(ImplicitStylize, StopStatsGradCutsStatisticsPath) {
    Tensor a = randn({2, 3, 6, 6}, 25);
    Tensor b = randn({2, 3, 6, 6}, 26).set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor out = implicit_stylize(a, b, 0.9, StatScope::minibatch, 1e-5, true);
    Tensor loss = mean_all(mul(out, out));
    tape.backward(loss);
    // b enters only through its (detached) statistics, so it gets no gradient.
    EXPECT_FALSE(b.has_grad());
}

TEST(ImplicitStylize, PerInstanceScopeMatchesPerSampleMoments) {
    Tensor a = randn({3, 2, 8, 8}, 27);
    Tensor b = randn({3, 2, 8, 8}, 28, 4.0, 0.5);
    Tensor out = implicit_stylize(a, b, 1.0, StatScope::per_instance);
    for (std::size_t n = 0; n < 3; ++n) {
        for (std::size_t c = 0; c < 2; ++c) {
            double mo = 0.0, mb = 0.0;
            for (std::size_t i = 0; i < 64; ++i) {
                mo += out.raw()[(n * 2 + c) * 64 + i];
                mb += b.raw()[(n * 2 + c) * 64 + i];
            }
            EXPECT_NEAR(mo / 64.0, mb / 64.0, 1e-6);
        }
    }
}

TEST(ImplicitStylize, ModuleExposesNoParameters) {
    EXPECT_TRUE(stylization_parameters().empty());
}

TEST(SampleAlpha, FixedPolicyReturnsFixedValue) {
    AlphaSource zero(AlphaPolicy{AlphaPolicy::Mode::fixed, 0.0, 1});
    AlphaSource one(AlphaPolicy{AlphaPolicy::Mode::fixed, 1.0, 1});
    EXPECT_DOUBLE_EQ(sample_alpha(zero), 0.0);
    EXPECT_DOUBLE_EQ(sample_alpha(one), 1.0);
    EXPECT_THROW(AlphaSource(AlphaPolicy{AlphaPolicy::Mode::fixed, 1.5, 1}), std::invalid_argument);
}

TEST(SampleAlpha, UniformDrawsHaveHalfMean) {
    AlphaSource src(AlphaPolicy{AlphaPolicy::Mode::uniform01, 0.0, 42});
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double a = sample_alpha(src);
        ASSERT_GE(a, 0.0);
        ASSERT_LE(a, 1.0);
        sum += a;
    }
    const double mean = sum / n;
    EXPECT_GE(mean, 0.497);
    EXPECT_LE(mean, 0.503);
}

TEST(SampleAlpha, SeededStreamsReproduce) {
    AlphaSource a(AlphaPolicy{AlphaPolicy::Mode::uniform01, 0.0, 7});
    AlphaSource b(AlphaPolicy{AlphaPolicy::Mode::uniform01, 0.0, 7});
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_alpha(a), sample_alpha(b));
}
