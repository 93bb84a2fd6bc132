#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace earnlab;

namespace {

double scalar_pinball(double y, double q, double a) { return y >= q ? a * (y - q) : (1.0 - a) * (q - y); }

}  // namespace

TEST(Pinball, MatchesScalarOracle) {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    std::array<double, kNumLevels> q{};
    for (auto& v : q) v = r.normal();
    const double y = r.normal();
    const double point = r.normal();
    double s = 0.0;
    for (std::size_t k = 0; k < kNumLevels; ++k) s += scalar_pinball(y, q[k], kQuantileLevels[k]);
    EXPECT_NEAR(pinball_sum(q, y), s, 1e-12);
    EXPECT_NEAR(loss_joint(point, q, y), 0.5 * (point - y) * (point - y) + s, 1e-12);
  }
  EXPECT_EQ(pinball_loss(0.0, 0.3), 0.0);
  EXPECT_THROW(pinball_loss(1.0, 0.0), Error);
  EXPECT_THROW(pinball_loss(1.0, 1.0), Error);
}

TEST(Quantiles, RearrangementSorts) {
  QuantileForecast f;
  f.q = {0.3, 0.1, 0.2, 0.5, 0.4, 0.9, 0.6};
  EXPECT_FALSE(is_rearranged(f));
  const auto g = rearranged(f);
  EXPECT_TRUE(is_rearranged(g));
  EXPECT_EQ(g.q[0], 0.1);
  EXPECT_EQ(g.q[6], 0.9);
}

TEST(Quantiles, SamplerInterpolatesKnots) {
  QuantileForecast f;
  for (std::size_t k = 0; k < kNumLevels; ++k) f.q[k] = normal_quantile(kQuantileLevels[k]);
  for (std::size_t k = 0; k < kNumLevels; ++k) {
    EXPECT_NEAR(sample_from_quantiles(f, kQuantileLevels[k]), f.q[k], 1e-12);
  }
  // Halfway between the 0.25 and 0.5 knots.
  EXPECT_NEAR(sample_from_quantiles(f, 0.375), 0.5 * (f.q[2] + f.q[3]), 1e-12);
  // Tails are monotone and bounded.
  EXPECT_LT(sample_from_quantiles(f, 0.001), f.q[0]);
  EXPECT_GT(sample_from_quantiles(f, 0.999), f.q[6]);
  EXPECT_THROW(sample_from_quantiles(f, 0.0), Error);
  EXPECT_EQ(level_index(0.9), 5);
}
