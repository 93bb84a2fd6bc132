#include <gtest/gtest.h>

#include <atomic>

#include "test_util.hpp"

using namespace earnlab;

TEST(Rng, KeyedStreamsAreReproducibleAndDistinct) {
  Rng a(42, {1, 2, 3}), b(42, {1, 2, 3}), c(42, {1, 2, 4}), d(43, {1, 2, 3});
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
    EXPECT_NE(x, d.next_u64());
  }
}

TEST(Rng, UniformAndNormalMoments) {
  Rng r(9);
  const int n = 200000;
  std::vector<double> u, z;
  for (int i = 0; i < n; ++i) {
    const double v = r.uniform();
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
    u.push_back(v);
    z.push_back(r.normal());
  }
  // 4 standard errors of the sample mean / variance.
  EXPECT_NEAR(fixtures::mean_of(u), 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(fixtures::mean_of(z), 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(fixtures::var_of(z), 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(Rng, BelowIsUniform) {
  Rng r(5);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) ++counts[r.below(7)];
  for (int c : counts) EXPECT_NEAR(c, n / 7.0, 4.0 * std::sqrt(n * (1.0 / 7) * (6.0 / 7)));
  EXPECT_EQ(r.below(1), 0u);
}

TEST(ParallelFor, ResultIndependentOfThreadCount) {
  auto run = [](int threads) {
    std::vector<double> out(1000);
    parallel_for(out.size(), threads, [&](std::size_t i) {
      Rng r(11, {static_cast<std::int64_t>(i)});
      out[i] = r.normal();
    });
    return out;
  };
  EXPECT_EQ(run(1), run(8));
  EXPECT_EQ(run(1), run(3));
}

TEST(ParallelFor, PropagatesExceptions) {
  EXPECT_THROW(parallel_for(100, 4,
                            [](std::size_t i) {
                              if (i == 57) throw Error(ErrorKind::Numeric, "boom");
                            }),
               Error);
}

TEST(Numeric, NormalQuantileInvertsCdf) {
  for (double p : {1e-10, 1e-4, 0.01, 0.025, 0.3, 0.5, 0.77, 0.975, 0.999, 1 - 1e-9}) {
    EXPECT_NEAR(normal_cdf(normal_quantile(p)), p, 1e-12 * std::max(1.0, p / (1 - p)));
  }
  EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-12);
  EXPECT_THROW(normal_quantile(0.0), Error);
}

TEST(Numeric, SortedQuantileType7) {
  const std::vector<double> v{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(sorted_quantile(v, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(sorted_quantile(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(sorted_quantile(v, 1.0), 4.0);
  // h = 3 * 0.1 = 0.3 -> 1 + 0.3
  EXPECT_DOUBLE_EQ(sorted_quantile(v, 0.1), 1.3);
  EXPECT_THROW(sorted_quantile({}, 0.5), Error);
}

TEST(Numeric, Formatting) {
  EXPECT_EQ(fmt6(0.123456789), "0.123457");
  EXPECT_EQ(fmt6(1234567.0), "1.23457e+06");
  EXPECT_EQ(fmt6(-0.0), "0");
  EXPECT_EQ(fmt6(std::nan("")), "nan");
  EXPECT_EQ(std::stod(fmt17(0.1)), 0.1);
  EXPECT_EQ(hex64(fnv1a64("")), "cbf29ce484222325");
  EXPECT_EQ(hex64(fnv1a64("a")), "af63dc4c8601ec8c");
}
