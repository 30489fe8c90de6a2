#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <pxbo/acquisition.hpp>

#include "oracles.hpp"

using namespace pxbo;
using pxbo::test::ei_oracle;

namespace {

Posterior make_posterior(const std::vector<std::pair<double, double>>& mv)
{
    Posterior p;
    for (std::size_t i = 0; i < mv.size(); ++i) {
        p.mean[LocationId{i}] = mv[i].first;
        p.variance[LocationId{i}] = mv[i].second;
    }
    return p;
}

} // namespace

TEST(ExpectedImprovement, ZeroVarianceIsExactlyZero)
{
    EXPECT_EQ(expected_improvement(5.0, 0.0, 1.0), 0.0);
    EXPECT_EQ(expected_improvement(-5.0, 0.0, 1.0), 0.0);
    EXPECT_EQ(expected_improvement(1.0, 0.0, 1.0, 0.0), 0.0);
}

TEST(ExpectedImprovement, StandardNormalPieces)
{
    EXPECT_NEAR(normal_pdf(0.0), 0.3989422804014327, 1e-16);
    EXPECT_EQ(normal_cdf(0.0), 0.5);
    // mean == incumbent, xi = 0, unit variance: EI = phi(0)
    EXPECT_NEAR(expected_improvement(0.0, 1.0, 0.0, 0.0), 0.3989422804014327, 1e-15);
}

TEST(ExpectedImprovement, FarTailIsTinyButNonNegative)
{
    const double ei = expected_improvement(-10.0, 1.0, 0.0, 0.0);
    EXPECT_GE(ei, 0.0);
    EXPECT_LT(ei, 1e-20);
}

TEST(ExpectedImprovement, MatchesHighPrecisionOracle)
{
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::uniform_real_distribution<double> lv(-6.0, 1.0);
    for (int t = 0; t < 300; ++t) {
        const double mean = u(rng), incumbent = u(rng), var = std::pow(10.0, lv(rng));
        const double xi = t % 2 ? kDefaultXi : 0.0;
        EXPECT_NEAR(expected_improvement(mean, var, incumbent, xi), ei_oracle(mean, var, incumbent, xi), 1e-10);
    }
}

TEST(ExpectedImprovement, Monotonicity)
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int t = 0; t < 200; ++t) {
        const double mean = u(rng), incumbent = u(rng), var = 0.01 + std::abs(u(rng));
        const double ei = expected_improvement(mean, var, incumbent);
        EXPECT_GE(expected_improvement(mean + 0.1, var, incumbent), ei);
        EXPECT_GE(expected_improvement(mean, var * 1.5, incumbent), ei);
        EXPECT_LE(expected_improvement(mean, var, incumbent + 0.1), ei);
        EXPECT_GE(ei, std::max(0.0, mean - incumbent - kDefaultXi) - 1e-15);
    }
}

TEST(ExpectedImprovement, VanishingVarianceLimit)
{
    for (double var : {1e-8, 1e-12, 1e-16})
        EXPECT_NEAR(expected_improvement(2.0, var, 1.0, 0.0), 1.0, 1e-6);
    for (double var : {1e-8, 1e-12, 1e-16})
        EXPECT_NEAR(expected_improvement(0.5, var, 1.0, 0.0), 0.0, 1e-6);
}

TEST(ExpectedImprovement, Errors)
{
    EXPECT_THROW(expected_improvement(0.0, -1e-3, 0.0), ArgumentError);
    EXPECT_THROW(expected_improvement(std::nan(""), 1.0, 0.0), ArgumentError);
    EXPECT_THROW(expected_improvement(0.0, INFINITY, 0.0), ArgumentError);
    EXPECT_THROW(expected_improvement(0.0, 1.0, 0.0, -0.1), ArgumentError);
}

TEST(SelectNext, PicksArgmax)
{
    auto p = make_posterior({{0.0, 0.1}, {1.0, 0.1}, {0.5, 0.1}});
    EXPECT_EQ(select_next(p, 0.2), LocationId{1});
}

TEST(SelectNext, TieBreaksOnVarianceThenIndex)
{
    // all zero-variance below the incumbent: EI ties at 0
    auto p = make_posterior({{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}});
    EXPECT_EQ(select_next(p, 1.0), LocationId{0});

    // equal EI (both effectively zero) but different variance
    auto q = make_posterior({{-50.0, 1e-4}, {-50.0, 2e-4}, {-50.0, 0.0}});
    EXPECT_EQ(select_next(q, 0.0), LocationId{1});
}

TEST(SelectNext, EmptyPosteriorIsAnError)
{
    EXPECT_THROW(select_next(Posterior{}, 0.0), ArgumentError);
}

TEST(SelectNext, EvaluateFieldCoversEveryLocation)
{
    auto p = make_posterior({{0.0, 1.0}, {0.2, 0.5}, {-0.1, 0.0}});
    auto f = evaluate_acquisition(p, 0.1);
    ASSERT_EQ(f.values.size(), 3u);
    EXPECT_EQ(f.values.at(LocationId{2}), 0.0);
    EXPECT_EQ(f.incumbent, 0.1);
    EXPECT_EQ(f.xi, kDefaultXi);
}
