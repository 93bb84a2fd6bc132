#include <gtest/gtest.h>

#include <algorithm>
#include <functional>

#include "test_util.hpp"

using namespace earnlab;

namespace {

QuantileForecast gaussian_qf(double mean, double sd) {
  QuantileForecast f;
  f.point = mean;
  for (std::size_t k = 0; k < kNumLevels; ++k) f.q[k] = mean + sd * normal_quantile(kQuantileLevels[k]);
  return f;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Io;
}

}  // namespace

TEST(Conformal, RankAndOffsetAreTheOrderStatistic) {
  EXPECT_EQ(conformal_rank(99, 0.1), 90u);
  EXPECT_EQ(conformal_rank(999, 0.2), 800u);
  EXPECT_EQ(conformal_rank(9, 0.1), 9u);
  EXPECT_EQ(conformal_rank(8, 0.1), 9u);
  Rng r(2);
  std::vector<double> s(99);
  for (auto& v : s) v = r.normal();
  auto sorted = s;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(conformal_offset(s, 0.1), sorted[89]);
  EXPECT_EQ(kind_of([&] { conformal_offset({1, 2, 3, 4, 5, 6, 7, 8}, 0.1); }), ErrorKind::Calibration);
  EXPECT_EQ(kind_of([&] { conformal_offset({}, 0.1); }), ErrorKind::Calibration);
  EXPECT_EQ(kind_of([&] { conformal_offset(s, 1.0); }), ErrorKind::Parameter);
}

TEST(Conformal, IntervalPairLevels) {
  const auto f = gaussian_qf(0.0, 1.0);
  EXPECT_EQ(interval_pair(f, 0.1).lo, f.q[0]);
  EXPECT_EQ(interval_pair(f, 0.1).hi, f.q[6]);
  EXPECT_EQ(interval_pair(f, 0.2).lo, f.q[1]);
  EXPECT_EQ(interval_pair(f, 0.5).hi, f.q[4]);
  const auto approx = interval_pair(f, 0.05);
  EXPECT_TRUE(approx.approximate);
  EXPECT_LT(approx.lo, f.q[0]);
  EXPECT_GT(approx.hi, f.q[6]);
  EXPECT_EQ(kind_of([&] { interval_pair(f, 0.3); }), ErrorKind::Calibration);
  EXPECT_LT(nonconformity_score(-1.0, 1.0, 0.2), 0.0);
  EXPECT_DOUBLE_EQ(nonconformity_score(-1.0, 1.0, 1.5), 0.5);
  EXPECT_DOUBLE_EQ(nonconformity_score(-1.0, 1.0, -3.0), 2.0);
}

TEST(Conformal, SplitCoverageEqualsRankOverNPlusOne) {
  // For exchangeable continuous scores a fresh point is covered with
  // probability exactly k/(n+1).
  for (auto [n, alpha] : {std::pair<std::size_t, double>{19, 0.1}, {99, 0.2}}) {
    const int splits = 4000;
    int covered = 0;
    for (int s = 0; s < splits; ++s) {
      Rng r(31, {s, static_cast<std::int64_t>(n)});
      ScoreSet set;
      for (std::size_t i = 0; i < n; ++i) {
        set.add(static_cast<std::int64_t>(i), 1, nonconformity_score(gaussian_qf(0.0, 0.5), r.normal(), alpha));
      }
      const auto table = build_calibration(set, alpha, CalibrationMode::Stratified);
      const auto [lo, hi] = predict_interval(gaussian_qf(0.0, 0.5), table, 1);
      const double y = r.normal();
      covered += (y >= lo && y <= hi) ? 1 : 0;
    }
    const double p = static_cast<double>(conformal_rank(n, alpha)) / static_cast<double>(n + 1);
    EXPECT_NEAR(covered / static_cast<double>(splits), p, 3.5 * std::sqrt(p * (1 - p) / splits)) << n;
  }
}

TEST(Conformal, StratifiedFixesHorizonHeterogeneity) {
  // Horizon 2 is twice as noisy; a pooled offset under-covers it.
  Rng r(4);
  ScoreSet cal;
  for (int i = 0; i < 2000; ++i) {
    for (int h : {1, 2}) cal.add(i, h, nonconformity_score(gaussian_qf(0, 0.5), h * r.normal(), 0.2));
  }
  EXPECT_FALSE(cal.add(0, 1, 0.0));
  EXPECT_EQ(kind_of([&] { cal.add(5000, 1, std::nan("")); }), ErrorKind::Calibration);
  const auto pooled = build_calibration(cal, 0.2, CalibrationMode::Pooled);
  const auto strat = build_calibration(cal, 0.2, CalibrationMode::Stratified);
  ASSERT_EQ(strat.strata.size(), 2u);
  EXPECT_EQ(pooled.strata.front().n, 4000u);
  auto coverage = [&](const CalibrationTable& t, int h) {
    Rng rt(5, {h});
    std::vector<std::pair<double, double>> iv;
    std::vector<double> y;
    for (int i = 0; i < 5000; ++i) {
      iv.push_back(predict_interval(gaussian_qf(0, 0.5), t, h));
      y.push_back(h * rt.normal());
    }
    return empirical_coverage(iv, y, {}, 0.8).marginal();
  };
  EXPECT_NEAR(coverage(strat, 1), 0.8, 0.02);
  EXPECT_NEAR(coverage(strat, 2), 0.8, 0.02);
  EXPECT_LT(coverage(pooled, 2), 0.75);
  EXPECT_GT(coverage(pooled, 1), 0.85);
  EXPECT_EQ(kind_of([&] { strat.offset(3); }), ErrorKind::Calibration);
  EXPECT_NO_THROW(pooled.offset(3));
}

TEST(Conformal, EmpiricalCoverageIsClosedAndGrouped) {
  const std::vector<std::pair<double, double>> iv{{0, 1}, {0, 1}, {0, 1}, {0, 1}};
  const auto r = empirical_coverage(iv, {0.0, 1.0, 1.5, 0.5}, {"b", "a", "b", "a"}, 0.9);
  EXPECT_EQ(r.covered, 3u);
  ASSERT_EQ(r.groups.size(), 2u);
  EXPECT_EQ(r.groups[0].group, "a");
  EXPECT_DOUBLE_EQ(r.groups[0].coverage(), 1.0);
  EXPECT_DOUBLE_EQ(r.worst_group(), 0.5);
  EXPECT_THROW(empirical_coverage(iv, {0.0}, {}, 0.9), Error);
}

TEST(Conformal, BoundFormulaAndLipschitzEstimate) {
  EXPECT_DOUBLE_EQ(coverage_bound(999, 2.0, 0.05), 1.0 / 1000 + 2.0 * std::sqrt(std::log(40.0) / 1998.0));
  EXPECT_THROW(coverage_bound(0.5, 1.0, 0.05), Error);
  EXPECT_THROW(coverage_bound(10, -1.0, 0.05), Error);
  Rng r(8);
  std::vector<double> s(20000);
  for (auto& v : s) v = r.normal();
  // Density of N(0,1) at its 0.9 quantile.
  EXPECT_NEAR(estimate_lipschitz(s, 0.1), normal_pdf(1.2815515655446004), 0.01);
  const std::vector<double> dup(50, 3.0);
  EXPECT_GT(silverman_bandwidth(dup), 0.0);
}

TEST(Conformal, DkwBoundOnEmpiricalCdf) {
  // sup |F_n - F| <= sqrt(ln(2/delta)/(2n)) in at least 1 - delta of samples.
  const std::size_t n = 200;
  const double eps = std::sqrt(std::log(2.0 / 0.05) / (2.0 * n));
  int ok = 0;
  for (int s = 0; s < 400; ++s) {
    Rng r(9, {s});
    std::vector<double> u(n);
    for (auto& v : u) v = r.uniform();
    std::sort(u.begin(), u.end());
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d = std::max({d, std::abs((i + 1.0) / n - u[i]), std::abs(static_cast<double>(i) / n - u[i])});
    }
    ok += d <= eps ? 1 : 0;
  }
  EXPECT_GE(ok / 400.0, 0.95);
}

TEST(Conformal, JsonRoundTrip) {
  CalibrationTable t{0.2, CalibrationMode::Stratified, {{1, 10, 0.125}, {2, 11, -0.3}}};
  const auto back = calibration_from_json(nlohmann::json::parse(to_json(t).dump()));
  EXPECT_EQ(back.alpha, t.alpha);
  EXPECT_EQ(back.mode, t.mode);
  ASSERT_EQ(back.strata.size(), 2u);
  EXPECT_EQ(back.strata[1].offset, -0.3);
  EXPECT_EQ(back.strata[1].n, 11u);
  EXPECT_EQ(kind_of([] { calibration_mode_from_string("weird"); }), ErrorKind::Config);
}

namespace {

std::vector<CalibrationItem> items(int n, std::uint64_t seed) {
  Rng r(seed);
  std::vector<CalibrationItem> v;
  for (int i = 0; i < n; ++i) {
    const int cohort = 1960 + i % 4;
    const std::string g = i % 3 == 0 ? "x" : "y";
    v.push_back({cohort, g, -1.0, 1.0, (g == "x" ? 1.5 : 1.0) * r.normal()});
  }
  return v;
}

}  // namespace

TEST(Sensitivity, LocoSpreadShrinksWithCalibrationSize) {
  const auto it = items(4000, 3);
  const auto rows = loco_cv_study(it, 0.1, {100, 1000}, 100, 7);
  ASSERT_EQ(rows.size(), 8u);
  for (std::size_t i = 0; i < rows.size(); i += 2) {
    EXPECT_EQ(rows[i].n, 100u);
    EXPECT_GT(rows[i].marginal_sd, rows[i + 1].marginal_sd);
    EXPECT_NEAR(rows[i + 1].marginal_mean, 0.9, 0.03);
    EXPECT_LE(rows[i].worst_mean, rows[i].marginal_mean);
  }
  EXPECT_EQ(rows, loco_cv_study(it, 0.1, {100, 1000}, 100, 7, 4));
  EXPECT_TRUE(loco_cv_study(it, 0.1, {100000}, 10, 7).empty());
}

TEST(Sensitivity, BootstrapSingleReplicateIsTheOriginalSample) {
  const auto cal = items(999, 4), test = items(500, 5);
  std::vector<double> scores;
  for (const auto& c : cal) scores.push_back(c.score());
  const auto rows = bootstrap_study(scores, test, 0.1, {999}, 1, 1);
  ASSERT_EQ(rows.size(), 1u);
  const double off = conformal_offset(scores, 0.1);
  int cov = 0;
  for (const auto& t : test) cov += (t.log_y >= t.lo - off && t.log_y <= t.hi + off) ? 1 : 0;
  EXPECT_DOUBLE_EQ(rows[0].marginal_mean, cov / 500.0);
  EXPECT_EQ(rows[0].marginal_sd, 0.0);
  const auto many = bootstrap_study(scores, test, 0.1, {100, 999}, 200, 1);
  EXPECT_GT(many[0].marginal_sd, many[1].marginal_sd);
}
