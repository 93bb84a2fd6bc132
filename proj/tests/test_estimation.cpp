#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace earnlab;
using earnlab::fixtures::small_population;

namespace {

// Welford streaming moments: an independent single-pass oracle.
struct Streaming {
  double n = 0, mean = 0, m2 = 0, m3 = 0, m4 = 0;
  void add(double x) {
    const double n1 = n;
    n += 1;
    const double delta = x - mean;
    const double dn = delta / n;
    const double dn2 = dn * dn;
    const double term1 = delta * dn * n1;
    mean += dn;
    m4 += term1 * dn2 * (n * n - 3 * n + 3) + 6 * dn2 * m2 - 4 * dn * m3;
    m3 += term1 * dn * (n - 2) - 3 * dn * m2;
    m2 += term1;
  }
  double variance() const { return m2 / n; }
  double skewness() const { return std::sqrt(n) * m3 / std::pow(m2, 1.5); }
  double kurtosis() const { return n * m4 / (m2 * m2); }
};

}  // namespace

TEST(ChangeMoments, MatchStreamingOracle) {
  auto pop = small_population(400);
  pop.gap_prob = 0.1;
  GkosParams g = GkosParams::reference();
  g.zero_prob = 0.05;
  const auto panel = simulate_gkos_panel(g, pop, 12);
  MomentConfig cfg;
  const auto m = compute_change_moments(panel, cfg);
  for (int lag : cfg.lags) {
    for (std::size_t b = 0; b < cfg.bins(); ++b) {
      Streaming s;
      for (const auto& h : panel) {
        for (const auto& r0 : h.records) {
          if (cfg.bin_of(r0.age) != static_cast<int>(b)) continue;
          for (const auto& r1 : h.records) {
            if (r1.year == r0.year + lag) s.add(log_earnings(r1.earnings) - log_earnings(r0.earnings));
          }
        }
      }
      if (s.n < 10) continue;
      const auto* mean = m.find(lag, static_cast<int>(b), MomentStat::Mean);
      ASSERT_NE(mean, nullptr);
      EXPECT_EQ(mean->n_obs, static_cast<std::int64_t>(s.n));
      EXPECT_NEAR(mean->value, s.mean, 1e-12);
      EXPECT_NEAR(m.find(lag, static_cast<int>(b), MomentStat::Variance)->value, s.variance(), 1e-10);
      EXPECT_NEAR(m.find(lag, static_cast<int>(b), MomentStat::Skewness)->value, s.skewness(), 1e-9);
      EXPECT_NEAR(m.find(lag, static_cast<int>(b), MomentStat::Kurtosis)->value, s.kurtosis(), 1e-8);
    }
  }
}

TEST(ChangeMoments, EmptyPanelThrows) { EXPECT_THROW(compute_change_moments({}), Error); }

TEST(Ar1Estimator, RecoversParameters) {
  Ar1Params p;
  p.rho = 0.9;
  p.innovation_variance = 0.04;
  p.transitory_variance = 0.03;
  p.fixed_effect_sd = 0.3;
  p.log_level = 11.0;
  const auto panel = simulate_ar1_panel(p, small_population(6000), 13);
  const auto e = estimate_ar1(panel);
  EXPECT_NEAR(e.rho, p.rho, 0.03);
  EXPECT_NEAR(e.innovation_variance, p.innovation_variance, 0.01);
  EXPECT_NEAR(e.transitory_variance, p.transitory_variance, 0.01);
  EXPECT_NEAR(e.log_level, p.log_level, 0.03);
}

TEST(GmmObjective, TruthBeatsRhoPerturbations) {
  const auto truth = GkosParams::reference();
  auto pop = small_population(3000, 1950, 1965);
  const auto panel = simulate_gkos_panel(truth, pop, 14);
  const auto target = compute_change_moments(panel);
  NestedSimulation sim{detail::population_like(panel, 3000), 99, {}, 1};
  const double at_truth = gmm_objective(truth, target, {}, sim);
  // rho + 0.1 leaves the stationary region; the nearest admissible value is used.
  for (double r : {truth.rho - 0.1, std::min(truth.rho + 0.1, 0.99)}) {
    auto q = truth;
    q.rho = r;
    EXPECT_LT(at_truth, gmm_objective(q, target, {}, sim)) << "rho " << r;
  }
}

TEST(GmmObjective, WeightsMustAlign) {
  const auto panel = simulate_gkos_panel(GkosParams::reference(), small_population(200), 1);
  const auto target = compute_change_moments(panel);
  NestedSimulation sim{detail::population_like(panel, 200), 1, {}, 1};
  EXPECT_THROW(gmm_objective(GkosParams::reference(), target, {1.0, 2.0}, sim), Error);
}

TEST(NelderMead, MinimizesRosenbrockInsideBox) {
  auto f = [](const std::vector<double>& x) {
    return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
  };
  NelderMeadOptions opt;
  opt.max_evaluations = 4000;
  const auto r = nelder_mead(f, {-1.2, 1.0}, {0.5, 0.5}, {-2, -2}, {2, 2}, opt);
  EXPECT_NEAR(r.x[0], 1.0, 1e-3);
  EXPECT_NEAR(r.x[1], 1.0, 2e-3);
  // Box-constrained: the optimum at x0 = 1 is cut off by hi = 0.5.
  const auto c = nelder_mead(f, {0.0, 0.0}, {0.2, 0.2}, {-2, -2}, {0.5, 2}, opt);
  EXPECT_LE(c.x[0], 0.5);
  EXPECT_NEAR(c.x[0], 0.5, 1e-3);
  EXPECT_THROW(nelder_mead(f, {0.0}, {0.1, 0.1}, {0, 0}, {1, 1}), Error);
}

TEST(GkosEstimator, SmallRunMovesTowardTruth) {
  const auto truth = GkosParams::reference();
  const auto panel = simulate_gkos_panel(truth, small_population(4000, 1950, 1965), 15);
  GmmConfig cfg;
  cfg.simulated_individuals = 4000;
  cfg.max_evaluations = 120;
  cfg.start.rho = 0.8;
  const auto [est, diag] = estimate_gkos(panel, cfg, 3);
  EXPECT_LE(diag.evaluations, cfg.max_evaluations + 10);
  EXPECT_NEAR(est.rho, truth.rho, 0.06);
  EXPECT_NO_THROW(est.validate());
}

TEST(ParamsJson, RoundTrip) {
  auto g = GkosParams::reference();
  g.log_level = 12.25;
  const auto g2 = gkos_from_json(to_json(g));
  EXPECT_EQ(to_json(g2).dump(), to_json(g).dump());
  Ar1Params a;
  a.rho = 0.7;
  a.log_level = 3.0;
  EXPECT_EQ(to_json(ar1_from_json(to_json(a))).dump(), to_json(a).dump());
}
