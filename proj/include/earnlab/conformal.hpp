#pragma once

// Split conformalized quantile regression: nonconformity scores,
// pooled and horizon-stratified calibration tables, coverage reports,
// the finite-sample stratified coverage bound, KDE Lipschitz estimates and
// the leave-one-cohort-out / bootstrap sensitivity studies.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "earnlab/quantile.hpp"

namespace earnlab {

/// Quantile pair used for a (1 - alpha) interval. alpha in {0.1, 0.2, 0.5}
/// reads two of the seven levels directly; alpha = 0.05 reads the
/// piecewise-linear inverse CDF at 0.025/0.975 (tail extrapolation) and is
/// reported as approximate.
struct IntervalPair {
  double lo = 0.0;
  double hi = 0.0;
  bool approximate = false;
};

inline bool alpha_is_native(double alpha) {
  return level_index(alpha / 2.0) >= 0 && level_index(1.0 - alpha / 2.0) >= 0;
}

inline bool alpha_supported(double alpha) { return alpha_is_native(alpha) || std::abs(alpha - 0.05) < 1e-12; }

inline IntervalPair interval_pair(const QuantileForecast& qf, double alpha) {
  require(alpha_supported(alpha), ErrorKind::Calibration,
          "alpha " + fmt6(alpha) + " has no matching quantile pair (supported: 0.05, 0.1, 0.2, 0.5)");
  if (alpha_is_native(alpha)) {
    return {qf.q[static_cast<std::size_t>(level_index(alpha / 2.0))],
            qf.q[static_cast<std::size_t>(level_index(1.0 - alpha / 2.0))], false};
  }
  return {sample_from_quantiles(qf, alpha / 2.0), sample_from_quantiles(qf, 1.0 - alpha / 2.0), true};
}

/// max(q_lo - y, y - q_hi); negative strictly inside the raw interval.
inline double nonconformity_score(double lo, double hi, double log_y) { return std::max(lo - log_y, log_y - hi); }

inline double nonconformity_score(const QuantileForecast& qf, double log_y, double alpha) {
  const auto p = interval_pair(qf, alpha);
  return nonconformity_score(p.lo, p.hi, log_y);
}

struct Score {
  std::int64_t id = 0;
  int h = 0;
  double s = 0.0;
};

/// At most one score per (individual, horizon); later duplicates are
/// rejected so the earliest forecast step is kept.
class ScoreSet {
 public:
  bool add(std::int64_t id, int h, double s) {
    require(std::isfinite(s), ErrorKind::Calibration, "non-finite nonconformity score");
    if (!seen_.insert({id, h}).second) return false;
    scores_.push_back({id, h, s});
    return true;
  }

  const std::vector<Score>& scores() const { return scores_; }
  std::size_t size() const { return scores_.size(); }

  std::map<int, std::size_t> counts() const {
    std::map<int, std::size_t> c;
    for (const auto& s : scores_) ++c[s.h];
    return c;
  }

  std::vector<double> stratum(int h) const {
    std::vector<double> v;
    for (const auto& s : scores_) {
      if (s.h == h) v.push_back(s.s);
    }
    return v;
  }

  std::vector<double> all() const {
    std::vector<double> v;
    v.reserve(scores_.size());
    for (const auto& s : scores_) v.push_back(s.s);
    return v;
  }

 private:
  std::vector<Score> scores_;
  std::set<std::pair<std::int64_t, int>> seen_;
};

enum class CalibrationMode { Pooled, Stratified };

inline std::string to_string(CalibrationMode m) { return m == CalibrationMode::Pooled ? "pooled" : "stratified"; }

inline CalibrationMode calibration_mode_from_string(const std::string& s) {
  if (s == "pooled") return CalibrationMode::Pooled;
  if (s == "stratified") return CalibrationMode::Stratified;
  throw Error(ErrorKind::Config, "unknown calibration mode: " + s);
}

struct Stratum {
  int h = 0;  // 0 in pooled mode
  std::size_t n = 0;
  double offset = 0.0;
};

struct CalibrationTable {
  double alpha = 0.1;
  CalibrationMode mode = CalibrationMode::Stratified;
  std::vector<Stratum> strata;

  double offset(int h) const {
    if (mode == CalibrationMode::Pooled) return strata.front().offset;
    for (const auto& s : strata) {
      if (s.h == h) return s.offset;
    }
    throw Error(ErrorKind::Calibration, "no calibrated stratum for horizon " + std::to_string(h));
  }
};

/// Rank of the conformal order statistic, ceil((n+1)(1-alpha)).
inline std::size_t conformal_rank(std::size_t n, double alpha) {
  const double r = std::ceil(static_cast<double>(n + 1) * (1.0 - alpha) - 1e-9);
  return static_cast<std::size_t>(std::max(1.0, r));
}

/// The ceil((n+1)(1-alpha))-th smallest score.
inline double conformal_offset(std::vector<double> scores, double alpha, const std::string& stratum = "pooled") {
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::Parameter, "alpha must lie in (0,1)");
  const std::size_t n = scores.size();
  const std::size_t k = conformal_rank(n, alpha);
  if (n == 0 || k > n) {
    throw Error(ErrorKind::Calibration, "stratum " + stratum + " has n=" + std::to_string(n) +
                                            ", too few scores for alpha " + fmt6(alpha));
  }
  std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k - 1), scores.end());
  return scores[k - 1];
}

inline CalibrationTable build_calibration(const ScoreSet& scores, double alpha, CalibrationMode mode) {
  CalibrationTable t;
  t.alpha = alpha;
  t.mode = mode;
  if (mode == CalibrationMode::Pooled) {
    const auto all = scores.all();
    t.strata.push_back({0, all.size(), conformal_offset(all, alpha)});
    return t;
  }
  for (const auto& [h, n] : scores.counts()) {
    t.strata.push_back({h, n, conformal_offset(scores.stratum(h), alpha, "h=" + std::to_string(h))});
  }
  return t;
}

/// [q_lo - Q, q_hi + Q] in log space.
inline std::pair<double, double> predict_interval(const QuantileForecast& qf, const CalibrationTable& table, int h) {
  const auto p = interval_pair(qf, table.alpha);
  const double q = table.offset(h);
  return {p.lo - q, p.hi + q};
}

struct GroupCoverage {
  std::string group;
  std::size_t n = 0;
  std::size_t covered = 0;
  double coverage() const { return n > 0 ? static_cast<double>(covered) / static_cast<double>(n) : 0.0; }
};

struct CoverageReport {
  double nominal = 0.9;
  std::size_t n = 0;
  std::size_t covered = 0;
  std::vector<GroupCoverage> groups;  // sorted by label

  double marginal() const { return n > 0 ? static_cast<double>(covered) / static_cast<double>(n) : 0.0; }

  double worst_group() const {
    double w = 1.0;
    for (const auto& g : groups) w = std::min(w, g.coverage());
    return groups.empty() ? marginal() : w;
  }
};

/// Closed-interval coverage overall and per group label (labels may be empty).
inline CoverageReport empirical_coverage(const std::vector<std::pair<double, double>>& intervals,
                                         const std::vector<double>& truths, const std::vector<std::string>& groups,
                                         double nominal) {
  require(intervals.size() == truths.size(), ErrorKind::Parameter, "intervals and truths differ in length");
  require(groups.empty() || groups.size() == truths.size(), ErrorKind::Parameter, "group labels differ in length");
  CoverageReport r;
  r.nominal = nominal;
  std::map<std::string, GroupCoverage> by;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const bool in = truths[i] >= intervals[i].first && truths[i] <= intervals[i].second;
    ++r.n;
    r.covered += in ? 1 : 0;
    if (!groups.empty()) {
      auto& g = by[groups[i]];
      g.group = groups[i];
      ++g.n;
      g.covered += in ? 1 : 0;
    }
  }
  for (auto& [label, g] : by) r.groups.push_back(g);
  return r;
}

/// 1/(n_h + 1) + L_h sqrt(ln(2/delta) / (2 n_h)).
inline double coverage_bound(double n_h, double lipschitz, double delta) {
  require(n_h >= 1.0, ErrorKind::Parameter, "n_h must be >= 1");
  require(delta > 0.0 && delta < 1.0, ErrorKind::Parameter, "delta must lie in (0,1)");
  require(lipschitz >= 0.0, ErrorKind::Parameter, "Lipschitz constant must be >= 0");
  return 1.0 / (n_h + 1.0) + lipschitz * std::sqrt(std::log(2.0 / delta) / (2.0 * n_h));
}

/// Silverman bandwidth 0.9 min(sd, IQR/1.34) n^(-1/5), floored at
/// 1e-6 (1 + |median|) for duplicate-heavy samples.
inline double silverman_bandwidth(const std::vector<double>& sorted) {
  const std::size_t n = sorted.size();
  double mean = 0.0;
  for (double v : sorted) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : sorted) ss += (v - mean) * (v - mean);
  const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  const double iqr = sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  const double floor = 1e-6 * (1.0 + std::abs(sorted_quantile(sorted, 0.5)));
  return std::isfinite(h) && h > floor ? h : floor;
}

/// Gaussian-KDE density of the scores at their empirical (1 - alpha) quantile.
inline double estimate_lipschitz(std::vector<double> scores, double alpha) {
  require(!scores.empty(), ErrorKind::Parameter, "estimate_lipschitz needs scores");
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::Parameter, "alpha must lie in (0,1)");
  std::sort(scores.begin(), scores.end());
  const double h = silverman_bandwidth(scores);
  const double x = sorted_quantile(scores, 1.0 - alpha);
  double s = 0.0;
  for (double v : scores) s += normal_pdf((x - v) / h);
  return s / (static_cast<double>(scores.size()) * h);
}

// ---------------------------------------------------------------------------
// Sensitivity studies
// ---------------------------------------------------------------------------

/// One scored forecast for a single horizon stratum: raw quantile pair at the
/// study's alpha, realized log earnings, cohort and subgroup label.
struct CalibrationItem {
  int cohort = 0;
  std::string group;
  double lo = 0.0;
  double hi = 0.0;
  double log_y = 0.0;

  double score() const { return nonconformity_score(lo, hi, log_y); }
};

struct SensitivityRow {
  std::string study;
  std::string fold;
  std::size_t n = 0;
  int replicates = 0;
  double nominal = 0.0;
  double marginal_mean = 0.0;
  double marginal_sd = 0.0;
  double worst_mean = 0.0;
  double worst_sd = 0.0;

  bool operator==(const SensitivityRow&) const = default;
};

namespace detail {

inline CoverageReport item_coverage(const std::vector<const CalibrationItem*>& test, double offset, double nominal) {
  std::vector<std::pair<double, double>> iv;
  std::vector<double> y;
  std::vector<std::string> g;
  for (const auto* it : test) {
    iv.emplace_back(it->lo - offset, it->hi + offset);
    y.push_back(it->log_y);
    g.push_back(it->group);
  }
  return empirical_coverage(iv, y, g, nominal);
}

inline void summarize(SensitivityRow& row, const std::vector<double>& marg, const std::vector<double>& worst) {
  auto ms = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair<double, double>{m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
  };
  std::tie(row.marginal_mean, row.marginal_sd) = ms(marg);
  std::tie(row.worst_mean, row.worst_sd) = ms(worst);
}

// Partial Fisher–Yates: the first k entries of v become a uniform sample.
template <class T>
void partial_shuffle(std::vector<T>& v, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k && i + 1 < v.size(); ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(v.size() - i));
    std::swap(v[i], v[j]);
  }
}

// Subsample of size n without replacement whose group counts follow the
// pool's group proportions (largest-remainder allocation).
inline std::vector<double> stratified_subsample(const std::vector<const CalibrationItem*>& pool, std::size_t n,
                                                Rng& rng) {
  std::map<std::string, std::vector<double>> by;
  for (const auto* it : pool) by[it->group].push_back(it->score());
  std::vector<std::pair<std::string, std::size_t>> alloc;
  std::vector<std::pair<double, std::string>> rema;
  std::size_t used = 0;
  for (const auto& [g, v] : by) {
    const double exact = static_cast<double>(n) * static_cast<double>(v.size()) / static_cast<double>(pool.size());
    const auto base = static_cast<std::size_t>(std::floor(exact));
    alloc.emplace_back(g, base);
    rema.emplace_back(exact - static_cast<double>(base), g);
    used += base;
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; used < n && i < rema.size(); ++i, ++used) {
    for (auto& a : alloc) {
      if (a.first == rema[i].second) ++a.second;
    }
  }
  std::vector<double> out;
  for (auto& [g, k] : alloc) {
    auto& v = by[g];
    k = std::min(k, v.size());
    partial_shuffle(v, k, rng);
    out.insert(out.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

}  // namespace detail

/// Leave-one-cohort-out: for each held-out cohort and calibration size n,
/// B stratified subsamples (without replacement, group proportions kept)
/// of the remaining cohorts' scores calibrate an offset that is evaluated
/// on the held-out cohort. Sizes larger than the pool are skipped.
inline std::vector<SensitivityRow> loco_cv_study(const std::vector<CalibrationItem>& items, double alpha,
                                                 const std::vector<std::size_t>& sizes, int replicates,
                                                 std::uint64_t seed, int threads = 1) {
  require(replicates >= 1, ErrorKind::Parameter, "replicates must be >= 1");
  std::set<int> cohorts;
  for (const auto& it : items) cohorts.insert(it.cohort);
  std::vector<SensitivityRow> rows;
  for (int c : cohorts) {
    std::vector<const CalibrationItem*> pool, test;
    for (const auto& it : items) (it.cohort == c ? test : pool).push_back(&it);
    if (pool.empty() || test.empty()) continue;
    for (std::size_t n : sizes) {
      if (n > pool.size() || conformal_rank(n, alpha) > n) continue;
      std::vector<double> marg(static_cast<std::size_t>(replicates)), worst(marg.size());
      parallel_for(marg.size(), threads, [&](std::size_t b) {
        Rng rng(seed, {c, static_cast<std::int64_t>(n), static_cast<std::int64_t>(b), stream::kReplicate});
        const auto sub = detail::stratified_subsample(pool, n, rng);
        const auto rep = detail::item_coverage(test, conformal_offset(sub, alpha), 1.0 - alpha);
        marg[b] = rep.marginal();
        worst[b] = rep.worst_group();
      });
      SensitivityRow row{"loco", "cohort " + std::to_string(c), n, replicates, 1.0 - alpha};
      detail::summarize(row, marg, worst);
      rows.push_back(row);
    }
  }
  return rows;
}

/// Nonparametric bootstrap: scores resampled with replacement at each size,
/// offsets rebuilt and evaluated on the fixed test items. With a single
/// replicate at the full sample size the original sample is used.
inline std::vector<SensitivityRow> bootstrap_study(const std::vector<double>& scores,
                                                   const std::vector<CalibrationItem>& test, double alpha,
                                                   const std::vector<std::size_t>& sizes, int replicates,
                                                   std::uint64_t seed, int threads = 1) {
  require(replicates >= 1 && !scores.empty() && !test.empty(), ErrorKind::Parameter,
          "bootstrap_study needs scores, test items and replicates >= 1");
  std::vector<const CalibrationItem*> tp;
  for (const auto& it : test) tp.push_back(&it);
  std::vector<SensitivityRow> rows;
  for (std::size_t n : sizes) {
    if (n == 0 || conformal_rank(n, alpha) > n) continue;
    std::vector<double> marg(static_cast<std::size_t>(replicates)), worst(marg.size());
    parallel_for(marg.size(), threads, [&](std::size_t b) {
      std::vector<double> sample;
      if (replicates == 1 && n == scores.size()) {
        sample = scores;
      } else {
        Rng rng(seed, {static_cast<std::int64_t>(n), static_cast<std::int64_t>(b), stream::kReplicate});
        sample.resize(n);
        for (auto& v : sample) v = scores[rng.below(scores.size())];
      }
      const auto rep = detail::item_coverage(tp, conformal_offset(std::move(sample), alpha), 1.0 - alpha);
      marg[b] = rep.marginal();
      worst[b] = rep.worst_group();
    });
    SensitivityRow row{"bootstrap", "all", n, replicates, 1.0 - alpha};
    detail::summarize(row, marg, worst);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const CalibrationTable& t) {
  nlohmann::json strata = nlohmann::json::array();
  for (const auto& s : t.strata) strata.push_back({{"h", s.h}, {"n", s.n}, {"offset", s.offset}});
  return {{"alpha", t.alpha}, {"mode", to_string(t.mode)}, {"strata", strata}};
}

inline CalibrationTable calibration_from_json(const nlohmann::json& j) {
  CalibrationTable t;
  t.alpha = j.at("alpha").get<double>();
  t.mode = calibration_mode_from_string(j.at("mode").get<std::string>());
  for (const auto& s : j.at("strata")) {
    t.strata.push_back({s.at("h").get<int>(), s.at("n").get<std::size_t>(), s.at("offset").get<double>()});
  }
  return t;
}

}  // namespace earnlab
