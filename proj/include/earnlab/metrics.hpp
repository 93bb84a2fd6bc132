#pragma once

// Point, probabilistic and interval scores, and the Diebold–Mariano test
// with a Newey–West (Bartlett) long-run variance.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <vector>

#include "earnlab/quantile.hpp"

namespace earnlab {

namespace detail {

inline void check_pairs(std::size_t a, std::size_t b) {
  require(a == b && a > 0, ErrorKind::Parameter, "metric inputs must be nonempty and equal length");
}

}  // namespace detail

inline double mae(const std::vector<double>& pred, const std::vector<double>& truth) {
  detail::check_pairs(pred.size(), truth.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& truth) {
  detail::check_pairs(pred.size(), truth.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

/// mean|X - y| - 0.5 mean|X - X'| over the ensemble; the pair term uses
/// sum_ij |x_i - x_j| = 2 sum_i (2i - m - 1) x_(i).
inline double crps_ensemble(std::vector<double> samples, double y) {
  require(!samples.empty(), ErrorKind::Parameter, "crps_ensemble needs samples");
  std::sort(samples.begin(), samples.end());
  const auto m = static_cast<double>(samples.size());
  double abs_dev = 0.0;
  double pair = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    abs_dev += std::abs(samples[i] - y);
    pair += (2.0 * static_cast<double>(i + 1) - m - 1.0) * samples[i];
  }
  return std::max(0.0, abs_dev / m - pair / (m * m));
}

/// 2 x mean pinball loss over the given levels.
inline double crps_quantile(const std::vector<double>& levels, const std::vector<double>& values, double y) {
  require(!levels.empty() && levels.size() == values.size(), ErrorKind::Parameter, "level/value mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < levels.size(); ++k) s += pinball_loss(y - values[k], levels[k]);
  return 2.0 * s / static_cast<double>(levels.size());
}

inline double crps_quantile(const QuantileForecast& qf, double y) {
  return 2.0 * pinball_sum(qf.q, y) / static_cast<double>(kNumLevels);
}

inline double picp(const std::vector<std::pair<double, double>>& intervals, const std::vector<double>& truth) {
  detail::check_pairs(intervals.size(), truth.size());
  std::size_t c = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) c += (truth[i] >= intervals[i].first && truth[i] <= intervals[i].second) ? 1 : 0;
  return static_cast<double>(c) / static_cast<double>(truth.size());
}

/// Mean interval width divided by the range of the truths.
inline double pinaw(const std::vector<std::pair<double, double>>& intervals, const std::vector<double>& truth) {
  detail::check_pairs(intervals.size(), truth.size());
  const auto [lo, hi] = std::minmax_element(truth.begin(), truth.end());
  const double range = *hi - *lo;
  require(range > 0.0, ErrorKind::Parameter, "pinaw undefined: truths have zero range");
  double w = 0.0;
  for (const auto& iv : intervals) w += iv.second - iv.first;
  return w / static_cast<double>(intervals.size()) / range;
}

/// Per-period (calendar year) mean loss differentials A - B.
struct LossSeries {
  std::vector<int> periods;
  std::vector<double> d;
  std::vector<std::size_t> counts;
};

/// Collapses individual-level losses to per-year cross-sectional means.
inline LossSeries loss_series(const std::vector<int>& years, const std::vector<double>& loss_a,
                              const std::vector<double>& loss_b) {
  require(years.size() == loss_a.size() && years.size() == loss_b.size(), ErrorKind::Parameter,
          "loss_series inputs differ in length");
  std::map<int, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < years.size(); ++i) {
    auto& a = acc[years[i]];
    a.first += loss_a[i] - loss_b[i];
    ++a.second;
  }
  LossSeries s;
  for (const auto& [y, a] : acc) {
    s.periods.push_back(y);
    s.d.push_back(a.first / static_cast<double>(a.second));
    s.counts.push_back(a.second);
  }
  return s;
}

struct DmResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double mean = 0.0;
  double variance = 0.0;  // Newey–West long-run variance
  std::size_t periods = 0;
  bool degenerate = false;
};

/// Newey–West long-run variance with Bartlett weights 1 - k/(lag+1) and
/// 1/T autocovariances.
inline double newey_west_variance(const std::vector<double>& d, int lag) {
  const std::size_t t = d.size();
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(t);
  auto gamma = [&](std::size_t k) {
    double s = 0.0;
    for (std::size_t i = k; i < t; ++i) s += (d[i] - mean) * (d[i - k] - mean);
    return s / static_cast<double>(t);
  };
  double v = gamma(0);
  for (int k = 1; k <= lag; ++k) {
    const double w = 1.0 - static_cast<double>(k) / static_cast<double>(lag + 1);
    v += 2.0 * w * gamma(static_cast<std::size_t>(k));
  }
  return v;
}

/// statistic = mean(d) / sqrt(NW / T), two-sided normal p-value. A
/// non-positive variance gives a degenerate result (statistic 0, p = 1).
inline DmResult dm_test(const LossSeries& series, int lag = 5) {
  require(lag >= 0, ErrorKind::Parameter, "lag must be >= 0");
  const std::size_t t = series.d.size();
  require(t >= static_cast<std::size_t>(lag) + 2, ErrorKind::Parameter,
          "dm_test needs at least lag + 2 periods, got " + std::to_string(t));
  DmResult r;
  r.periods = t;
  for (double v : series.d) r.mean += v;
  r.mean /= static_cast<double>(t);
  r.variance = newey_west_variance(series.d, lag);
  if (!(r.variance > 0.0)) {
    r.degenerate = true;
    return r;
  }
  r.statistic = r.mean / std::sqrt(r.variance / static_cast<double>(t));
  r.p_value = std::erfc(std::abs(r.statistic) / std::numbers::sqrt2);
  return r;
}

}  // namespace earnlab
