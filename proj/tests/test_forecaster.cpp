#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "test_util.hpp"

using namespace earnlab;

namespace {

AnnualRecord rec(int year, int birth, double earnings) {
  AnnualRecord r;
  r.year = year;
  r.age = year - birth;
  r.earnings = earnings;
  return r;
}

// History with a gap year and a zero-earnings year.
IndividualHistory gappy_history() {
  IndividualHistory h;
  h.id = 4;
  h.birth_year = 1970;
  const double y[] = {0.2, -0.1, 0.3, 0.0, 0.5, 0.4, 0.1, 0.6, 0.2};
  int year = 2000;
  for (int j = 0; j < 9; ++j, ++year) {
    if (year == 2003) ++year;  // not observed at all
    h.records.push_back(rec(year, h.birth_year, j == 5 ? 0.0 : std::exp(10.0 + y[j])));
  }
  return h;
}

// Solves S x = b for symmetric positive definite S by Cholesky.
std::vector<double> chol_solve(std::vector<std::vector<double>> s, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) s[j][j] -= s[j][k] * s[j][k];
    s[j][j] = std::sqrt(s[j][j]);
    for (std::size_t i = j + 1; i < n; ++i) {
      for (std::size_t k = 0; k < j; ++k) s[i][j] -= s[i][k] * s[j][k];
      s[i][j] /= s[j][j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) b[i] -= s[i][k] * b[k];
    b[i] /= s[i][i];
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) b[i] -= s[k][i] * b[k];
    b[i] /= s[i][i];
  }
  return b;
}

// Gaussian conditioning on all positive observations at once.
std::pair<double, double> joint_gaussian_predictive(const Ar1Params& p, const IndividualHistory& h, int target_year) {
  const double v = p.innovation_variance / (1.0 - p.rho * p.rho);
  const double fe2 = p.fixed_effect_sd * p.fixed_effect_sd;
  std::vector<int> years;
  std::vector<double> y;
  for (const auto& r : h.records) {
    if (r.earnings > 0.0) {
      years.push_back(r.year);
      y.push_back(std::log(r.earnings) - p.log_level);
    }
  }
  const std::size_t n = years.size();
  std::vector<std::vector<double>> s(n, std::vector<double>(n));
  std::vector<double> c(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      s[i][j] = fe2 + std::pow(p.rho, std::abs(years[i] - years[j])) * v + (i == j ? p.transitory_variance : 0.0);
    }
    c[i] = fe2 + std::pow(p.rho, target_year - years[i]) * v;
  }
  const auto w = chol_solve(s, c);
  double mean = p.log_level, red = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean += w[i] * y[i];
    red += w[i] * c[i];
  }
  return {mean, fe2 + v + p.transitory_variance - red};
}

Ar1Params ar1_params() {
  Ar1Params p;
  p.rho = 0.85;
  p.innovation_variance = 0.04;
  p.transitory_variance = 0.02;
  p.fixed_effect_sd = 0.3;
  p.log_level = 10.0;
  return p;
}

GkosParams gaussian_gkos(const Ar1Params& a) {
  GkosParams g;
  g.rho = a.rho;
  const double pv = a.innovation_variance, tv = a.transitory_variance;
  g.perm = {MixtureComponent{0.0, pv, 0.5}, MixtureComponent{0.0, pv, 0.25}, MixtureComponent{0.0, pv, 0.25}};
  g.trans = {MixtureComponent{0.0, tv, 0.5}, MixtureComponent{0.0, tv, 0.5}};
  g.fixed_effect_sd = a.fixed_effect_sd;
  g.log_level = a.log_level;
  return g;
}

}  // namespace

TEST(Ar1Forecaster, KalmanMatchesJointGaussianConditioning) {
  const auto p = ar1_params();
  const auto h = gappy_history();
  const auto s = kalman_filter(p, h, h.records.size());
  for (int k = 1; k <= 4; ++k) {
    const auto [m, v] = ar1_predictive(p, s, k);
    const auto [mo, vo] = joint_gaussian_predictive(p, h, h.records.back().year + k);
    EXPECT_NEAR(m, mo, 1e-10) << k;
    EXPECT_NEAR(v, vo, 1e-10) << k;
  }
}

TEST(Ar1Forecaster, QuantilesAreGaussianAndPathsMatchMoments) {
  const auto p = ar1_params();
  const auto h = gappy_history();
  Ar1Forecaster f(p);
  ForecastRequest req{h.records.size(), 3, 20000, 9};
  const auto r = f.predict(h, req);
  ASSERT_EQ(r.quantiles.size(), 3u);
  ASSERT_EQ(r.paths.size(), 20000u);
  for (int k = 0; k < 3; ++k) {
    const auto [m, v] = joint_gaussian_predictive(p, h, h.records.back().year + k + 1);
    const auto& q = r.quantiles[static_cast<std::size_t>(k)];
    EXPECT_NEAR(q.point, m, 1e-10);
    EXPECT_NEAR(q.q[0], m - 1.6448536269514722 * std::sqrt(v), 1e-8);
    std::vector<double> lp;
    for (const auto& path : r.paths) lp.push_back(std::log(path[static_cast<std::size_t>(k)]));
    EXPECT_NEAR(fixtures::mean_of(lp), m, 4.0 * std::sqrt(v / 20000.0));
    EXPECT_NEAR(fixtures::var_of(lp), v, 0.05 * v);
  }
}

TEST(GkosForecaster, GaussianMixtureReducesToKalman) {
  const auto a = ar1_params();
  const auto h = gappy_history();
  GkosForecaster g(gaussian_gkos(a), ParticleOptions{20000, 0.5, 0.01});
  const auto r = g.predict(h, ForecastRequest{h.records.size(), 3, 0, 5});
  const auto s = kalman_filter(a, h, h.records.size());
  for (int k = 1; k <= 3; ++k) {
    const auto [m, v] = ar1_predictive(a, s, k);
    const auto& q = r.quantiles[static_cast<std::size_t>(k - 1)];
    EXPECT_NEAR(q.point, m, 0.02) << k;
    for (std::size_t l = 0; l < kNumLevels; ++l) {
      EXPECT_NEAR(q.q[l], m + std::sqrt(v) * normal_quantile(kQuantileLevels[l]), 0.04) << k << " " << l;
    }
  }
  EXPECT_FALSE(r.flagged);
}

TEST(GkosForecaster, DeterministicPerSeedAndHistory) {
  const auto h = gappy_history();
  GkosParams g = GkosParams::reference();
  g.log_level = 10.0;
  GkosForecaster f(g, ParticleOptions{500, 0.5, 0.01});
  ForecastRequest req{5, 4, 10, 3};
  const auto a = f.predict(h, req), b = f.predict(h, req);
  EXPECT_EQ(a.paths, b.paths);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a.quantiles[k].q, b.quantiles[k].q);
    EXPECT_TRUE(is_rearranged(a.quantiles[k]));
  }
  req.seed = 4;
  EXPECT_NE(f.predict(h, req).paths, a.paths);
}

TEST(Forecaster, RequestErrors) {
  const auto h = gappy_history();
  Ar1Forecaster f(ar1_params());
  auto kind = [&](ForecastRequest r) {
    try {
      f.predict(h, r);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  EXPECT_EQ(kind({0, 1, 0, 0}), ErrorKind::Context);
  EXPECT_EQ(kind({h.records.size() + 1, 1, 0, 0}), ErrorKind::Context);
  EXPECT_EQ(kind({3, -1, 0, 0}), ErrorKind::Parameter);
  EXPECT_EQ(kind({3, 1, -2, 0}), ErrorKind::Parameter);
}

TEST(LinearQuantile, RecoversConditionalNormalQuantiles) {
  Rng r(12);
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (int i = 0; i < 4000; ++i) {
    const double v = r.normal();
    x.push_back({v});
    y.push_back(1.0 + 2.0 * v + r.normal());
  }
  const auto m = fit_quantile_linear(x, y);
  for (double v : {-1.0, 0.5}) {
    const auto q = m.predict({v});
    EXPECT_NEAR(q.point, 1.0 + 2.0 * v, 0.06);
    for (std::size_t k = 0; k < kNumLevels; ++k) {
      EXPECT_NEAR(q.q[k], 1.0 + 2.0 * v + normal_quantile(kQuantileLevels[k]), 0.12) << v << " " << k;
    }
  }
  EXPECT_THROW(m.predict({1.0, 2.0}), Error);
}

TEST(Marginal, IgnoresHistoryAndMatchesPooledQuantiles) {
  const auto panel = fixtures::featured_panel(200, 8);
  const auto m = MarginalForecaster::fit(panel, 2, 5);
  const auto a = m.predict(panel[0], {5, 2, 0, 1});
  const auto b = m.predict(panel[1], {5, 2, 0, 1});
  for (int k = 0; k < 2; ++k) {
    auto y = horizon_design(panel, 5, k + 1).second;
    std::sort(y.begin(), y.end());
    const auto& q = a.quantiles[static_cast<std::size_t>(k)];
    EXPECT_EQ(q.q, b.quantiles[static_cast<std::size_t>(k)].q);
    for (std::size_t l = 0; l < kNumLevels; ++l) EXPECT_DOUBLE_EQ(q.q[l], sorted_quantile(y, kQuantileLevels[l]));
  }
  EXPECT_THROW(m.predict(panel[0], {5, 3, 0, 1}), Error);
}

TEST(Imputer, SmoothedTransitionCounts) {
  IndividualHistory h;
  h.birth_year = 1970;
  const int cats[] = {0, 1, 1, 0};
  for (int j = 0; j < 4; ++j) {
    auto r = rec(2000 + j, 1970, 1000.0);
    r.continuous = {0.7};
    r.categoricals = {cats[j]};
    r.missing = {0, 0};
    h.records.push_back(r);
  }
  const auto imp = FeatureImputer::fit({h}, {2}, 1, 0.1, 0.5);
  const auto& t = imp.transitions[0][1];
  EXPECT_NEAR(t[0][1], 0.75, 1e-12);
  EXPECT_NEAR(t[1][0], 0.5, 1e-12);
  EXPECT_NEAR(imp.transitions[0][0][0][0], 0.5, 1e-12);  // smoothing only
  EXPECT_NEAR(imp.marginal[0][0], 0.5, 1e-12);

  int ones = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    Rng rng(3, {i});
    const auto nx = imp.next(h.records[0], 1000.0, rng);
    EXPECT_EQ(nx.year, 2001);
    EXPECT_EQ(nx.continuous, h.records[0].continuous);
    ones += nx.categoricals[0];
  }
  EXPECT_NEAR(ones / static_cast<double>(n), 0.75, 0.015);
  EXPECT_EQ(imp.bucket(-0.2), 0);
  EXPECT_EQ(imp.bucket(0.05), 1);
  EXPECT_EQ(imp.bucket(0.2), 2);
}

TEST(TransformerForecaster, HeadAtHorizonOneAndDeterministicPaths) {
  const auto panel = fixtures::featured_panel(40, 21);
  TokenizerConfig tc;
  ToyTransformerConfig cfg;
  auto p = std::make_shared<const ModelParams>(make_model(cfg, make_tokenizer(tc, fit_stats(panel), 1, {4}, 4)));
  auto imp = std::make_shared<const FeatureImputer>(FeatureImputer::fit(panel, {4}, 1));
  TransformerForecaster f(p, imp, 50);
  const auto& h = panel[3];
  const ForecastRequest req{10, 4, 0, 6};
  const auto a = f.predict(h, req), b = f.predict(h, req);
  ASSERT_EQ(a.quantiles.size(), 4u);
  EXPECT_TRUE(a.paths.empty());
  ForwardCache cache(p->config);
  const auto head = rearranged(encode_context(*p, h, 10, cache));
  EXPECT_EQ(a.quantiles[0].q, head.q);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a.quantiles[k].q, b.quantiles[k].q);
    EXPECT_TRUE(is_rearranged(a.quantiles[k]));
  }
  const auto d = decode_autoregressive(*p, *imp, h, 10, 4, 6, 2);
  const auto withp = f.predict(h, {10, 4, 3, 6});
  ASSERT_EQ(withp.paths.size(), 3u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(withp.paths[2][k], d[k].earnings);
  EXPECT_EQ(d[0].year, h.records[9].year + 1);

  const auto att = attention_average(*p, panel, 10, 2);
  double s = 0.0;
  for (double v : att) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_THROW(f.predict(h, {10, cfg.max_context, 0, 6}), Error);
}
