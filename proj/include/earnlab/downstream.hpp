#pragma once

// Monte Carlo lifetime aggregation, lifetime intervals, inequality
// statistics and a stylized annual tax schedule.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "earnlab/forecaster.hpp"
#include "earnlab/panel.hpp"

namespace earnlab {

struct LifetimeSample {
  std::int64_t id = 0;
  double r = 0.0;
  std::vector<double> draws;
  std::vector<std::vector<double>> paths;  // earnings by age 20..64, kept on request
};

/// Earnings by age 20..64 combining the first `context_len` realized
/// records with a forecast path that starts the year after the context.
inline std::vector<double> splice_path(const IndividualHistory& h, std::size_t context_len,
                                       const std::vector<double>& forecast) {
  std::vector<double> by_age(kLifetimeYears, 0.0);
  for (std::size_t j = 0; j < context_len; ++j) {
    const int a = h.records[j].age;
    if (a >= kLifetimeFirstAge && a <= kLifetimeLastAge) by_age[static_cast<std::size_t>(a - kLifetimeFirstAge)] = h.records[j].earnings;
  }
  const int start = h.records[context_len - 1].age + 1;
  for (std::size_t k = 0; k < forecast.size(); ++k) {
    const int a = start + static_cast<int>(k);
    if (a >= kLifetimeFirstAge && a <= kLifetimeLastAge) by_age[static_cast<std::size_t>(a - kLifetimeFirstAge)] = forecast[k];
  }
  return by_age;
}

/// M forecast paths from the year after the conditioning window through
/// age 64, each spliced with the realized context years and discounted.
inline LifetimeSample mc_lifetime(const Forecaster& f, const IndividualHistory& h, std::size_t context_len, int m,
                                  double r, std::uint64_t seed, bool keep_paths = false) {
  require(m >= 1, ErrorKind::Parameter, "M must be >= 1");
  require(context_len >= 1 && context_len <= h.records.size(), ErrorKind::Context,
          "history shorter than the conditioning window");
  const int horizon = std::max(0, kLifetimeLastAge - h.records[context_len - 1].age);
  LifetimeSample s;
  s.id = h.id;
  s.r = r;
  std::vector<std::vector<double>> paths(static_cast<std::size_t>(m));
  if (horizon > 0) {
    ForecastResult res;
    try {
      res = f.predict(h, {context_len, horizon, m, seed});
    } catch (const Error& e) {
      throw Error(e.kind(), "lifetime decoding failed for individual " + std::to_string(h.id) + ": " + e.what());
    }
    paths = std::move(res.paths);
  }
  for (std::size_t k = 0; k < paths.size(); ++k) {
    auto by_age = splice_path(h, context_len, paths[k]);
    s.draws.push_back(lifetime_pdv(by_age, r));
    if (keep_paths) s.paths.push_back(std::move(by_age));
  }
  return s;
}

inline std::vector<LifetimeSample> mc_lifetime_batch(const Forecaster& f, const Panel& panel, std::size_t context_len,
                                                     int m, double r, std::uint64_t seed, int threads = 1,
                                                     bool keep_paths = false) {
  std::vector<LifetimeSample> out(panel.size());
  parallel_for(panel.size(), threads,
               [&](std::size_t i) { out[i] = mc_lifetime(f, panel[i], context_len, m, r, seed, keep_paths); });
  return out;
}

/// Linear-interpolation (type 7) alpha/2 and 1 - alpha/2 quantiles: with
/// sorted draws x_1..x_M, Q(p) = x_k + g (x_{k+1} - x_k) where
/// (M - 1) p = (k - 1) + g.
inline std::pair<double, double> lifetime_interval(const LifetimeSample& s, double alpha) {
  require(!s.draws.empty(), ErrorKind::Parameter, "empty lifetime sample");
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::Parameter, "alpha must lie in (0,1)");
  auto v = s.draws;
  std::sort(v.begin(), v.end());
  return {sorted_quantile(v, alpha / 2.0), sorted_quantile(v, 1.0 - alpha / 2.0)};
}

/// Sum_ij |x_i - x_j| / (2 n^2 mean) via the sorted form
/// sum_i (2i - n - 1) x_(i) / (n^2 mean). Zero when the mean is not positive.
inline double gini(std::vector<double> x) {
  require(!x.empty(), ErrorKind::Parameter, "gini needs at least one value");
  for (double v : x) require(v >= 0.0, ErrorKind::Parameter, "gini needs non-negative values");
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  double total = 0.0;
  double weighted = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    total += x[i];
    weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * x[i];
  }
  if (!(total > 0.0)) return 0.0;
  return weighted / (n * total);
}

/// Share of the total held by the top ceil(p n) values (order: value
/// descending, then index ascending). Zero when the total is zero.
inline double top_share(const std::vector<double>& x, double p) {
  require(!x.empty(), ErrorKind::Parameter, "top_share needs values");
  require(p > 0.0 && p <= 1.0, ErrorKind::Parameter, "p must lie in (0,1]");
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] != x[b] ? x[a] > x[b] : a < b; });
  const auto k = std::min(x.size(), static_cast<std::size_t>(std::max(1.0, std::ceil(p * static_cast<double>(x.size()) - 1e-9))));
  double top = 0.0;
  for (std::size_t i = 0; i < k; ++i) top += x[idx[i]];
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  return total > 0.0 ? top / total : 0.0;
}

/// Stylized annual schedule: municipal tax above a basic allowance, state
/// tax above a breakpoint, a capped social-security contribution, and an
/// optional pension deduction (a share of the contribution).
struct TaxSchedule {
  double basic_allowance = 20000.0;
  double municipal_rate = 0.324;
  double state_rate = 0.20;
  double state_breakpoint = 554900.0;
  double ss_rate = 0.07;
  double ss_ceiling_base_amounts = 8.07;
  double income_base_amount = 71000.0;
  double pension_deduction_rate = 0.0;

  /// Contribution cap: ss_rate applied at the income ceiling.
  double ss_cap() const { return ss_rate * ss_ceiling_base_amounts * income_base_amount; }

  void validate() const {
    for (double rate : {municipal_rate, state_rate, ss_rate, pension_deduction_rate}) {
      require(rate >= 0.0 && rate <= 1.0, ErrorKind::Parameter, "tax rates must lie in [0,1]");
    }
    require(basic_allowance >= 0.0 && state_breakpoint > basic_allowance, ErrorKind::Parameter,
            "need breakpoint > allowance >= 0");
    require(ss_ceiling_base_amounts >= 0.0 && income_base_amount >= 0.0, ErrorKind::Parameter,
            "social-security ceiling must be >= 0");
  }

  static TaxSchedule flat(double rate) {
    TaxSchedule s;
    s.basic_allowance = 0.0;
    s.municipal_rate = rate;
    s.state_rate = 0.0;
    s.ss_rate = 0.0;
    s.pension_deduction_rate = 0.0;
    return s;
  }
};

inline double tax_liability(double y, const TaxSchedule& s) {
  require(y >= 0.0, ErrorKind::Parameter, "earnings must be non-negative");
  s.validate();
  const double municipal = s.municipal_rate * std::max(0.0, y - s.basic_allowance);
  const double state = s.state_rate * std::max(0.0, y - s.state_breakpoint);
  const double ss = std::min(s.ss_rate * y, s.ss_cap());
  const double deduction = s.pension_deduction_rate * ss;
  return std::max(0.0, municipal + state + ss - deduction);
}

struct TaxStatistics {
  std::size_t n = 0;
  double mean_lifetime_tax = 0.0;
  double mean_aetr = 0.0;
  double p99_aetr = 0.0;
  double tax_gini = 0.0;
  std::size_t zero_earnings = 0;  // paths with zero discounted earnings (AETR set to 0)
};

/// Each path is annual earnings by age 20..64; taxes are discounted like
/// earnings and AETR = discounted tax / discounted earnings per path.
inline TaxStatistics lifetime_tax_statistics(const std::vector<std::vector<double>>& paths, const TaxSchedule& s,
                                             double r) {
  require(!paths.empty(), ErrorKind::Parameter, "no paths");
  s.validate();
  TaxStatistics st;
  st.n = paths.size();
  std::vector<double> taxes, aetr;
  for (const auto& p : paths) {
    std::vector<double> tax(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) tax[k] = tax_liability(p[k], s);
    const double t = lifetime_pdv(tax, r);
    const double e = lifetime_pdv(p, r);
    taxes.push_back(t);
    if (e > 0.0) {
      aetr.push_back(t / e);
    } else {
      aetr.push_back(0.0);
      ++st.zero_earnings;
    }
  }
  st.mean_lifetime_tax = std::accumulate(taxes.begin(), taxes.end(), 0.0) / static_cast<double>(st.n);
  st.mean_aetr = std::accumulate(aetr.begin(), aetr.end(), 0.0) / static_cast<double>(st.n);
  auto sorted = aetr;
  std::sort(sorted.begin(), sorted.end());
  st.p99_aetr = sorted_quantile(sorted, 0.99);
  st.tax_gini = gini(taxes);
  return st;
}

}  // namespace earnlab
