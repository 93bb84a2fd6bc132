#pragma once

// Seven-level quantile forecasts: pinball loss, the joint point + pinball
// training loss, rearrangement and inverse-CDF sampling.

#include <algorithm>
#include <array>
#include <cmath>

#include "earnlab/core.hpp"

namespace earnlab {

inline constexpr std::size_t kNumLevels = 7;
inline constexpr std::array<double, kNumLevels> kQuantileLevels{0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95};

struct QuantileForecast {
  double point = 0.0;
  std::array<double, kNumLevels> q{};

  double median() const { return q[3]; }
};

/// rho_alpha(u) = u (alpha - 1[u < 0]).
inline double pinball_loss(double u, double alpha) {
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::Parameter, "pinball level must lie in (0,1)");
  return u * (alpha - (u < 0.0 ? 1.0 : 0.0));
}

/// Sum of the seven pinball losses of `q` against `target`.
inline double pinball_sum(const std::array<double, kNumLevels>& q, double target) {
  double s = 0.0;
  for (std::size_t k = 0; k < kNumLevels; ++k) s += pinball_loss(target - q[k], kQuantileLevels[k]);
  return s;
}

/// 0.5 (target - point)^2 + sum_k rho_{alpha_k}(target - q_k).
inline double loss_joint(double point, const std::array<double, kNumLevels>& q, double target) {
  const double e = target - point;
  return 0.5 * e * e + pinball_sum(q, target);
}

inline double loss_joint(const QuantileForecast& f, double target) { return loss_joint(f.point, f.q, target); }

inline std::array<double, kNumLevels> rearrange_quantiles(std::array<double, kNumLevels> q) {
  std::sort(q.begin(), q.end());
  return q;
}

inline QuantileForecast rearranged(QuantileForecast f) {
  f.q = rearrange_quantiles(f.q);
  return f;
}

inline bool is_rearranged(const QuantileForecast& f) { return std::is_sorted(f.q.begin(), f.q.end()); }

/// Piecewise-linear inverse CDF through the seven knots. Below 0.05 and
/// above 0.95 the adjacent segment is continued linearly; the distance from
/// the outer knot is capped at tail_cap times that segment's length.
inline double sample_from_quantiles(const QuantileForecast& f, double u, double tail_cap = 3.0) {
  require(u > 0.0 && u < 1.0, ErrorKind::Parameter, "sampling draw must lie in (0,1)");
  require(is_rearranged(f), ErrorKind::Parameter, "quantiles must be rearranged before sampling");
  const auto& a = kQuantileLevels;
  const auto& q = f.q;
  if (u < a.front()) {
    const double seg = q[1] - q[0];
    const double ext = seg / (a[1] - a[0]) * (a[0] - u);
    return q[0] - std::min(ext, tail_cap * seg);
  }
  if (u > a.back()) {
    const double seg = q[6] - q[5];
    const double ext = seg / (a[6] - a[5]) * (u - a[6]);
    return q[6] + std::min(ext, tail_cap * seg);
  }
  std::size_t k = 0;
  while (k + 2 < kNumLevels && u > a[k + 1]) ++k;
  if (u == a[k]) return q[k];
  if (u == a[k + 1]) return q[k + 1];
  const double w = (u - a[k]) / (a[k + 1] - a[k]);
  return q[k] + w * (q[k + 1] - q[k]);
}

/// Index of level `p` among the seven levels, or -1.
inline int level_index(double p) {
  for (std::size_t k = 0; k < kNumLevels; ++k) {
    if (std::abs(kQuantileLevels[k] - p) < 1e-12) return static_cast<int>(k);
  }
  return -1;
}

}  // namespace earnlab
