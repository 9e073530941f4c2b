#include <gtest/gtest.h>

#include "lnfree/norm.hpp"

using namespace lnfree;

namespace {

Tensor<double> vec(std::vector<double> v) {
    return Tensor<double>({static_cast<int64_t>(v.size())}, std::move(v));
}

}  // namespace

TEST(LnForward, AlreadyNormalizedIsIdentity) {
    auto y = ln_forward(vec({1, -1, 1, -1}), Tensor<double>::full({4}, 1.0), Tensor<double>::zeros({4}), 0.0);
    EXPECT_DOUBLE_EQ(y[0], 1.0);
    EXPECT_DOUBLE_EQ(y[1], -1.0);
    EXPECT_DOUBLE_EQ(y[2], 1.0);
    EXPECT_DOUBLE_EQ(y[3], -1.0);
}

TEST(LnForward, MeanOneSigmaOne) {
    auto y = ln_forward(vec({2, 0}), Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), 0.0);
    EXPECT_DOUBLE_EQ(y[0], 1.0);
    EXPECT_DOUBLE_EQ(y[1], -1.0);
}

TEST(LnForward, ZeroVarianceInputMapsToBias) {
    auto gamma = vec({2.0, -3.0});
    auto beta = vec({0.25, 4.0});
    auto y = ln_forward(vec({5, 5}), gamma, beta, 1e-5);
    EXPECT_DOUBLE_EQ(y[0], 0.25);
    EXPECT_DOUBLE_EQ(y[1], 4.0);
}

TEST(LnForward, ZeroMeanUnitVarianceBeforeAffine) {
    Rng rng(9);
    for (int rep = 0; rep < 30; ++rep) {
        auto x = Tensor<double>::randn({4, 16}, rng, 2.5);
        auto y = ln_forward(x, Tensor<double>::full({16}, 1.0), Tensor<double>::zeros({16}), 0.0);
        for (int64_t r = 0; r < 4; ++r) {
            double mean = 0.0, var = 0.0;
            for (int64_t i = 0; i < 16; ++i) mean += y.at2(r, i);
            mean /= 16.0;
            for (int64_t i = 0; i < 16; ++i) var += (y.at2(r, i) - mean) * (y.at2(r, i) - mean);
            var /= 16.0;
            EXPECT_NEAR(mean, 0.0, 1e-6);
            EXPECT_NEAR(var, 1.0, 1e-6);
        }
    }
}

TEST(FakelnForward, CenteringAndFrozenScale) {
    auto y = fakeln_forward(vec({3, -1}), Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), 2.0);
    EXPECT_DOUBLE_EQ(y[0], 1.0);
    EXPECT_DOUBLE_EQ(y[1], -1.0);
}

TEST(FakelnForward, EqualsLnWhenSigmaBarIsTrueSigma) {
    Rng rng(21);
    for (int rep = 0; rep < 50; ++rep) {
        auto x = Tensor<double>::randn({1, 24}, rng, 1.7);
        auto gamma = Tensor<double>::randn({24}, rng, 0.3, 1.0);
        auto beta = Tensor<double>::randn({24}, rng, 0.2);
        const double eps = 1e-5;
        auto [grid, avg] = sigma_stats(x, eps);
        auto ln = ln_forward(x, gamma, beta, eps);
        auto fake = fakeln_forward(x, gamma, beta, grid[0]);
        for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(fake[i], ln[i], 1e-6);
        (void)avg;
    }
}

TEST(FakelnForward, LinearInScaleForZeroMeanInput) {
    Rng rng(4);
    auto x = Tensor<double>::randn({1, 8}, rng);
    double mean = 0.0;
    for (double v : x.data) mean += v / 8.0;
    for (auto& v : x.data) v -= mean;
    auto gamma = Tensor<double>::randn({8}, rng, 0.4, 1.0);
    auto beta = Tensor<double>::zeros({8});
    const double alpha = 2.75;
    auto scaled = x;
    for (auto& v : scaled.data) v *= alpha;
    auto a = fakeln_forward(scaled, gamma, beta, 1.9);
    auto b = fakeln_forward(x, gamma, beta, 1.9);
    for (int64_t i = 0; i < 8; ++i) EXPECT_NEAR(a[i], alpha * b[i], 1e-12);
}

TEST(FakelnForward, RejectsNonPositiveSigma) {
    auto gamma = Tensor<double>::full({2}, 1.0);
    EXPECT_THROW(fakeln_forward(vec({1, 2}), gamma, gamma, 0.0), ConfigError);
    EXPECT_THROW(fakeln_forward(vec({1, 2}), gamma, gamma, -1.0), ConfigError);
}

TEST(SigmaStats, RowExamples) {
    {
        auto [grid, avg] = sigma_stats(Tensor<double>({1, 2}, {3, -1}), 0.0);
        EXPECT_DOUBLE_EQ(grid[0], 2.0);
        EXPECT_DOUBLE_EQ(avg, 2.0);
    }
    {
        auto [grid, avg] = sigma_stats(Tensor<double>({2, 2}, {3, -1, 5, -3}), 0.0);
        EXPECT_DOUBLE_EQ(grid[0], 2.0);
        EXPECT_DOUBLE_EQ(grid[1], 4.0);
        EXPECT_DOUBLE_EQ(avg, 3.0);
    }
    {
        auto [grid, avg] = sigma_stats(Tensor<double>({2, 3}, {7, 7, 7, -2, -2, -2}), 1e-5);
        EXPECT_DOUBLE_EQ(grid[0], std::sqrt(1e-5));
        EXPECT_DOUBLE_EQ(grid[1], std::sqrt(1e-5));
        EXPECT_DOUBLE_EQ(avg, std::sqrt(1e-5));
    }
}

TEST(NormModeMap, SetAndQuery) {
    NormModeMap modes(2);
    EXPECT_FALSE(modes.at(NormSite::mlp(0)).fake);
    modes.set_norm_mode(NormSite::mlp(0), 2.5);
    EXPECT_TRUE(modes.at(NormSite::mlp(0)).fake);
    EXPECT_DOUBLE_EQ(modes.at(NormSite::mlp(0)).frozen_sigma, 2.5);
    EXPECT_FALSE(modes.at(NormSite::mlp(1)).fake);
    EXPECT_FALSE(modes.at(NormSite::qk(0)).fake);
    EXPECT_FALSE(modes.at(NormSite::final()).fake);
}

TEST(NormModeMap, DoubleRemovalIsProtocolError) {
    NormModeMap modes(1);
    modes.set_norm_mode(NormSite::qk(0), 1.0);
    EXPECT_THROW(modes.set_norm_mode(NormSite::qk(0), 2.0), ProtocolError);
}

TEST(NormModeMap, AllFakeRequiresEverySite) {
    NormModeMap modes(1);
    for (const auto& site : modes.all_sites()) {
        EXPECT_FALSE(modes.all_fake());
        modes.set_norm_mode(site, 1.0);
    }
    EXPECT_TRUE(modes.all_fake());
    EXPECT_EQ(modes.all_sites().size(), 4u);  // 3L+1 with L=1
}

TEST(NormSite, Names) {
    EXPECT_EQ(NormSite::qk(3).name(), "qk3");
    EXPECT_EQ(NormSite::v(0).name(), "v0");
    EXPECT_EQ(NormSite::mlp(11).name(), "mlp11");
    EXPECT_EQ(NormSite::final().name(), "final");
}
