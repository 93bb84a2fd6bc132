#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace earnlab;
using earnlab::fixtures::small_population;

TEST(Ar1Panel, CrossSectionMatchesStationaryVariance) {
  Ar1Params p;
  p.rho = 0.8;
  p.innovation_variance = 0.05;
  p.transitory_variance = 0.02;
  p.fixed_effect_sd = 0.3;
  p.log_level = 10.0;
  const auto panel = simulate_ar1_panel(p, small_population(20000), 3);
  std::vector<double> y;
  for (const auto& h : panel) {
    for (const auto& r : h.records) {
      if (r.year == 2000) y.push_back(std::log(r.earnings));
    }
  }
  ASSERT_GT(y.size(), 15000u);
  const double v = p.fixed_effect_sd * p.fixed_effect_sd + p.stationary_variance() + p.transitory_variance;
  const double n = static_cast<double>(y.size());
  EXPECT_NEAR(fixtures::mean_of(y), p.log_level, 4.0 * std::sqrt(v / n));
  // Sample variance SE for a Gaussian: v sqrt(2/n).
  EXPECT_NEAR(fixtures::var_of(y), v, 4.0 * v * std::sqrt(2.0 / n));
}

TEST(GkosPanel, StationaryMeanAndVariance) {
  GkosParams p = GkosParams::reference();
  p.log_level = 11.0;
  const auto panel = simulate_gkos_panel(p, small_population(20000), 4);
  std::vector<double> y;
  for (const auto& h : panel) {
    for (const auto& r : h.records) {
      if (r.year == 2005) y.push_back(std::log(r.earnings));
    }
  }
  const double v = p.fixed_effect_sd * p.fixed_effect_sd + p.stationary_variance() + mixture_variance(p.trans);
  const double m = p.log_level + p.stationary_mean() + mixture_mean(p.trans);
  const double n = static_cast<double>(y.size());
  EXPECT_NEAR(fixtures::mean_of(y), m, 4.0 * std::sqrt(v / n));
  // Heavy tails: allow 8% relative error on the variance.
  EXPECT_NEAR(fixtures::var_of(y), v, 0.08 * v);
}

TEST(GkosPanel, ZeroProbabilityAndGaps) {
  GkosParams p = GkosParams::reference();
  p.zero_prob = 0.2;
  auto pop = small_population(2000);
  pop.gap_prob = 0.1;
  const auto panel = simulate_gkos_panel(p, pop, 5);
  std::size_t zeros = 0, records = 0, possible = 0;
  for (const auto& h : panel) {
    h.validate();
    for (const auto& r : h.records) {
      zeros += r.earnings == 0.0 ? 1 : 0;
      ++records;
      EXPECT_GE(r.year, pop.window_first);
      EXPECT_LE(r.year, pop.window_last);
      EXPECT_GE(r.age, pop.entry_age);
    }
    const int first = std::max(pop.window_first, h.birth_year + pop.entry_age);
    const int last = std::min(pop.window_last, h.birth_year + pop.exit_age);
    possible += static_cast<std::size_t>(std::max(0, last - first + 1));
  }
  const double zr = static_cast<double>(zeros) / records;
  EXPECT_NEAR(zr, 0.2, 4.0 * std::sqrt(0.16 / records));
  const double kept = static_cast<double>(records) / possible;
  EXPECT_NEAR(kept, 0.9, 4.0 * std::sqrt(0.09 / possible));
}

TEST(Panel, SimulationIsThreadInvariant) {
  const auto pop = small_population(300);
  const auto p = GkosParams::reference();
  EXPECT_EQ(panel_to_csv(simulate_gkos_panel(p, pop, 8, 1)), panel_to_csv(simulate_gkos_panel(p, pop, 8, 8)));
}

TEST(Panel, InvalidSpecsThrow) {
  auto pop = small_population(10);
  pop.birth_first = 1970;
  pop.birth_last = 1960;
  EXPECT_THROW(simulate_ar1_panel({}, pop, 1), Error);
  GkosParams g = GkosParams::reference();
  g.perm[0].weight = 0.5;
  EXPECT_THROW(simulate_gkos_panel(g, small_population(10), 1), Error);
  Ar1Params a;
  a.rho = 1.0;
  EXPECT_THROW(simulate_ar1_panel(a, small_population(10), 1), Error);
}

TEST(Panel, MixtureLogDensityMatchesDirectSum) {
  const auto p = GkosParams::reference();
  for (double x : {-2.0, -0.3, 0.0, 0.4, 1.7}) {
    double s = 0.0;
    for (const auto& c : p.perm) s += c.weight * normal_pdf((x - c.mean) / std::sqrt(c.variance)) / std::sqrt(c.variance);
    EXPECT_NEAR(mixture_log_density(p.perm, x), std::log(s), 1e-12);
  }
}

TEST(Panel, CouplingRampMatchesOracle) {
  auto pop = small_population(200);
  pop.schema.categorical = {{"occupation", 3, 0.7}};
  auto coupled = pop;
  coupled.coupling = {{"occupation", -1, 2, 0.1, 3}};
  Ar1Params a;
  a.log_level = 10.0;
  const auto base = simulate_ar1_panel(a, pop, 9);
  const auto plain = attach_features(base, pop, 10);
  const auto shifted = attach_features(base, coupled, 10);
  int switches = 0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    const auto& h = plain[i].records;
    ASSERT_EQ(h.size(), shifted[i].records.size());
    for (std::size_t t = 0; t < h.size(); ++t) {
      // Oracle: every switch into category 2 observed at record s adds
      // 0.1 * min(t - s, 3) for records t > s (records are consecutive).
      double expect = 0.0;
      for (std::size_t s = 1; s <= t; ++s) {
        if (h[s].categoricals[0] != h[s - 1].categoricals[0] && h[s].categoricals[0] == 2) {
          expect += 0.1 * static_cast<double>(std::min<std::size_t>(t - s, 3));
          if (t == s) ++switches;
        }
      }
      EXPECT_NEAR(std::log(shifted[i].records[t].earnings) - std::log(h[t].earnings), expect, 1e-9);
    }
  }
  EXPECT_GT(switches, 100);
}

TEST(Panel, FeaturesAndMissingness) {
  const auto panel = fixtures::featured_panel(500, 21, 0.25);
  std::size_t missing = 0, slots = 0;
  for (const auto& h : panel) {
    h.validate();
    for (const auto& r : h.records) {
      ASSERT_EQ(r.categoricals.size(), 1u);
      EXPECT_GE(r.categoricals[0], 0);
      EXPECT_LT(r.categoricals[0], 4);
      for (auto m : r.missing) missing += m;
      slots += r.missing.size();
    }
  }
  EXPECT_NEAR(static_cast<double>(missing) / slots, 0.25, 4.0 * std::sqrt(0.25 * 0.75 / slots));
}

TEST(LifetimePdv, GeometricClosedForm) {
  for (double r : {0.0, 0.02, 0.05}) {
    const std::vector<double> y(kLifetimeYears, 1000.0);
    const double closed = r == 0.0 ? 45000.0 : 1000.0 * (1.0 - std::pow(1.0 + r, -45)) / (1.0 - 1.0 / (1.0 + r));
    EXPECT_NEAR(lifetime_pdv(y, r), closed, 1e-12 * closed);
  }
  // A single year at age 30 is discounted ten periods.
  std::vector<double> y(kLifetimeYears, 0.0);
  y[10] = 5.0;
  EXPECT_NEAR(lifetime_pdv(y, 0.03), 5.0 / std::pow(1.03, 10), 1e-12);
  EXPECT_THROW(lifetime_pdv(y, -1.0), Error);
}

TEST(LifetimePdv, HistoryUsesObservedAgesOnly) {
  IndividualHistory h;
  h.birth_year = 1950;
  for (int age : {18, 20, 21, 64, 65}) h.records.push_back({1950 + age, age, 100.0, {}, {}, {}});
  EXPECT_NEAR(lifetime_pdv(h, 0.0), 300.0, 1e-12);
}

TEST(PanelCsv, RoundTrip) {
  const auto panel = fixtures::featured_panel(50, 31, 0.2);
  const auto text = panel_to_csv(panel);
  std::istringstream in(text);
  const auto back = read_panel_csv(in);
  EXPECT_EQ(panel_to_csv(back), text);
}
