#include <gtest/gtest.h>

#include <algorithm>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace earnlab;

namespace {

// Path m earns (m + 1) * base every forecast year.
class StubForecaster : public Forecaster {
 public:
  explicit StubForecaster(double base) : base_(base) {}
  std::string name() const override { return "stub"; }
  ForecastResult predict(const IndividualHistory&, const ForecastRequest& req) const override {
    ForecastResult r;
    r.quantiles.resize(static_cast<std::size_t>(req.horizon));
    for (int m = 0; m < req.n_paths; ++m) r.paths.emplace_back(static_cast<std::size_t>(req.horizon), (m + 1) * base_);
    return r;
  }

 private:
  double base_;
};

IndividualHistory young(int n_records) {
  IndividualHistory h;
  h.id = 2;
  h.birth_year = 1980;
  for (int a = 20; a < 20 + n_records; ++a) {
    AnnualRecord r;
    r.year = 1980 + a;
    r.age = a;
    r.earnings = 100.0;
    h.records.push_back(r);
  }
  return h;
}

// Independent statement of the stylized schedule.
double tax_oracle(double y, double pension = 0.0) {
  double t = 0.0;
  if (y > 20000) t += 0.324 * (y - 20000);
  if (y > 554900) t += 0.20 * (y - 554900);
  const double ss = std::min(0.07 * y, 0.07 * 8.07 * 71000);
  return t + ss - pension * ss;
}

}  // namespace

TEST(Lifetime, SplicesContextAndForecast) {
  const auto h = young(10);
  const std::vector<double> f(35, 7.0);
  const auto s = splice_path(h, 10, f);
  ASSERT_EQ(s.size(), 45u);
  EXPECT_EQ(s[9], 100.0);
  EXPECT_EQ(s[10], 7.0);
  EXPECT_EQ(s[44], 7.0);
  // A shorter context leaves realized records after it unused.
  EXPECT_EQ(splice_path(h, 5, f)[5], 7.0);
}

TEST(Lifetime, MonteCarloMatchesGeometricSums) {
  const auto h = young(10);
  StubForecaster stub(50.0);
  const double r = 0.03;
  const auto s = mc_lifetime(stub, h, 10, 4, r, 1, true);
  ASSERT_EQ(s.draws.size(), 4u);
  ASSERT_EQ(s.paths.size(), 4u);
  const double d = 1.0 / (1.0 + r);
  const double ctx = 100.0 * (1.0 - std::pow(d, 10)) / (1.0 - d);
  const double tail = std::pow(d, 10) * (1.0 - std::pow(d, 35)) / (1.0 - d);
  for (int m = 0; m < 4; ++m) EXPECT_NEAR(s.draws[static_cast<std::size_t>(m)], ctx + (m + 1) * 50.0 * tail, 1e-9);
  EXPECT_THROW(mc_lifetime(stub, h, 11, 4, r, 1), Error);
  EXPECT_THROW(mc_lifetime(stub, h, 10, 0, r, 1), Error);

  // Context reaching age 64 leaves nothing to forecast: every draw is the
  // realized value.
  const auto full = mc_lifetime(stub, young(45), 45, 3, r, 1);
  ASSERT_EQ(full.draws.size(), 3u);
  for (double v : full.draws) EXPECT_NEAR(v, lifetime_pdv(young(45), r), 1e-9);

  const auto batch = mc_lifetime_batch(stub, {h, h}, 10, 4, r, 1, 2);
  EXPECT_EQ(batch[1].draws, s.draws);
}

TEST(Lifetime, IntervalIsTypeSevenQuantiles) {
  LifetimeSample s;
  s.draws = {5, 1, 4, 2, 3};
  const auto [lo, hi] = lifetime_interval(s, 0.5);
  // (M - 1) p = 1 and 3.
  EXPECT_DOUBLE_EQ(lo, 2.0);
  EXPECT_DOUBLE_EQ(hi, 4.0);
  const auto [lo2, hi2] = lifetime_interval(s, 0.1);
  EXPECT_DOUBLE_EQ(lo2, 1.0 + 0.2 * 1.0);
  EXPECT_DOUBLE_EQ(hi2, 4.0 + 0.8 * 1.0);
  EXPECT_THROW(lifetime_interval(LifetimeSample{}, 0.1), Error);
}

TEST(Inequality, GiniMatchesPairwiseDefinition) {
  Rng r(6);
  std::vector<double> x(300);
  for (auto& v : x) v = std::exp(r.normal());
  EXPECT_NEAR(gini(x), oracle::gini_pairwise(x), 1e-12);
  EXPECT_EQ(gini({3, 3, 3}), 0.0);
  EXPECT_NEAR(gini({0, 0, 0, 8}), 0.75, 1e-15);
  EXPECT_EQ(gini({0, 0}), 0.0);
  EXPECT_THROW(gini({1, -1}), Error);
}

TEST(Inequality, TopShare) {
  const std::vector<double> x{1, 2, 3, 4, 10};
  EXPECT_DOUBLE_EQ(top_share(x, 0.2), 0.5);
  EXPECT_DOUBLE_EQ(top_share(x, 0.3), 14.0 / 20.0);  // ceil(1.5) = 2
  EXPECT_DOUBLE_EQ(top_share(x, 1.0), 1.0);
  EXPECT_EQ(top_share({0, 0}, 0.5), 0.0);
  EXPECT_THROW(top_share(x, 0.0), Error);
}

TEST(Tax, PiecewiseScheduleMatchesOracle) {
  const TaxSchedule s;
  for (double y : {0.0, 15000.0, 20000.0, 300000.0, 554900.0, 654900.0, 1e6, 5e6}) {
    EXPECT_NEAR(tax_liability(y, s), tax_oracle(y), 1e-6) << y;
  }
  // State tax adds exactly 20,000 at 100,000 above the breakpoint.
  TaxSchedule no_state = s;
  no_state.state_rate = 0.0;
  EXPECT_NEAR(tax_liability(654900.0, s) - tax_liability(654900.0, no_state), 20000.0, 1e-6);
  EXPECT_NEAR(tax_liability(554900.0, s), tax_liability(554900.0, no_state), 1e-9);
  TaxSchedule p = s;
  p.pension_deduction_rate = 0.5;
  EXPECT_NEAR(tax_liability(300000.0, p), tax_oracle(300000.0, 0.5), 1e-6);
  EXPECT_THROW(tax_liability(-1.0, s), Error);
  TaxSchedule bad = s;
  bad.state_rate = 1.5;
  EXPECT_THROW(tax_liability(1.0, bad), Error);
}

TEST(Tax, FlatScheduleGivesConstantRate) {
  Rng r(3);
  std::vector<std::vector<double>> paths(50, std::vector<double>(45));
  for (auto& p : paths) {
    for (auto& v : p) v = std::exp(12.0 + r.normal());
  }
  paths.push_back(std::vector<double>(45, 0.0));
  const auto st = lifetime_tax_statistics(paths, TaxSchedule::flat(0.1), 0.02);
  EXPECT_EQ(st.n, 51u);
  EXPECT_EQ(st.zero_earnings, 1u);
  EXPECT_NEAR(st.mean_aetr, 0.1 * 50.0 / 51.0, 1e-12);
  EXPECT_NEAR(st.p99_aetr, 0.1, 1e-12);
  std::vector<double> taxes;
  for (const auto& p : paths) taxes.push_back(0.1 * lifetime_pdv(p, 0.02));
  EXPECT_NEAR(st.tax_gini, gini(taxes), 1e-12);
}
