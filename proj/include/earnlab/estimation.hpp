#pragma once

// Moments of multi-year log-earnings changes and simulated-moments GMM for
// the GKOS process; closed-form difference-moment estimation for AR(1).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "earnlab/nelder_mead.hpp"
#include "earnlab/panel.hpp"

namespace earnlab {

enum class MomentStat { Mean = 0, Variance = 1, Skewness = 2, Kurtosis = 3 };

inline const char* to_string(MomentStat s) {
  switch (s) {
    case MomentStat::Mean: return "mean";
    case MomentStat::Variance: return "variance";
    case MomentStat::Skewness: return "skewness";
    case MomentStat::Kurtosis: return "kurtosis";
  }
  return "?";
}

struct MomentEntry {
  int lag = 1;
  int age_bin = 0;
  MomentStat stat = MomentStat::Mean;
  double value = 0.0;
  std::int64_t n_obs = 0;
};

struct MomentVector {
  std::vector<MomentEntry> entries;  // canonical (lag, bin, statistic) order
  std::vector<MomentEntry> dropped;  // too few observations or zero variance

  bool has_dropped() const { return !dropped.empty(); }

  const MomentEntry* find(int lag, int bin, MomentStat stat) const {
    for (const auto& e : entries) {
      if (e.lag == lag && e.age_bin == bin && e.stat == stat) return &e;
    }
    return nullptr;
  }
};

/// Age bins are [edges[b], edges[b+1]); the bin is decided by the age in
/// the earlier year of each change.
struct MomentConfig {
  std::vector<int> lags{1, 3, 5};
  std::vector<int> age_bin_edges{25, 35, 45, 61};

  int bin_of(int age) const {
    for (std::size_t b = 0; b + 1 < age_bin_edges.size(); ++b) {
      if (age >= age_bin_edges[b] && age < age_bin_edges[b + 1]) return static_cast<int>(b);
    }
    return -1;
  }
  std::size_t bins() const { return age_bin_edges.size() < 2 ? 0 : age_bin_edges.size() - 1; }
};

namespace detail {

// Visits every (lag index, bin, change) triple in the panel. Zero-earnings
// years enter as log 0.
template <class Fn>
void for_each_change(const Panel& panel, const MomentConfig& cfg, Fn&& fn) {
  std::vector<double> logs;
  std::vector<int> index_of_year;
  for (const auto& h : panel) {
    if (h.records.size() < 2) continue;
    const int y0 = h.records.front().year;
    const int y1 = h.records.back().year;
    index_of_year.assign(static_cast<std::size_t>(y1 - y0 + 1), -1);
    logs.resize(h.records.size());
    for (std::size_t i = 0; i < h.records.size(); ++i) {
      logs[i] = log_earnings(h.records[i].earnings);
      index_of_year[static_cast<std::size_t>(h.records[i].year - y0)] = static_cast<int>(i);
    }
    for (std::size_t i = 0; i < h.records.size(); ++i) {
      const int bin = cfg.bin_of(h.records[i].age);
      if (bin < 0) continue;
      for (std::size_t l = 0; l < cfg.lags.size(); ++l) {
        const int target = h.records[i].year + cfg.lags[l];
        if (target > y1) continue;
        const int j = index_of_year[static_cast<std::size_t>(target - y0)];
        if (j < 0) continue;
        fn(l, static_cast<std::size_t>(bin), logs[static_cast<std::size_t>(j)] - logs[i]);
      }
    }
  }
}

}  // namespace detail

/// Mean, variance, skewness and kurtosis of lag-k log changes per age bin.
/// Two passes: the mean first, then central sums. Variance and the
/// standardized moments use the 1/n (population) normalisation.
inline MomentVector compute_change_moments(const Panel& panel, const MomentConfig& cfg = {}) {
  require(!panel.empty(), ErrorKind::Parameter, "moments need a nonempty panel");
  const std::size_t nl = cfg.lags.size();
  const std::size_t nb = cfg.bins();
  std::vector<double> sum(nl * nb, 0.0);
  std::vector<std::int64_t> count(nl * nb, 0);
  detail::for_each_change(panel, cfg, [&](std::size_t l, std::size_t b, double d) {
    sum[l * nb + b] += d;
    ++count[l * nb + b];
  });
  std::vector<double> mean(nl * nb, 0.0);
  for (std::size_t c = 0; c < mean.size(); ++c) {
    if (count[c] > 0) mean[c] = sum[c] / static_cast<double>(count[c]);
  }
  std::vector<double> m2(nl * nb, 0.0), m3(nl * nb, 0.0), m4(nl * nb, 0.0);
  detail::for_each_change(panel, cfg, [&](std::size_t l, std::size_t b, double d) {
    const std::size_t c = l * nb + b;
    const double e = d - mean[c];
    const double e2 = e * e;
    m2[c] += e2;
    m3[c] += e2 * e;
    m4[c] += e2 * e2;
  });

  MomentVector out;
  for (std::size_t l = 0; l < nl; ++l) {
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t c = l * nb + b;
      const auto n = count[c];
      auto entry = [&](MomentStat s, double v) {
        return MomentEntry{cfg.lags[l], static_cast<int>(b), s, v, n};
      };
      const double nan = std::numeric_limits<double>::quiet_NaN();
      if (n < 2) {
        for (int s = 0; s < 4; ++s) out.dropped.push_back(entry(static_cast<MomentStat>(s), nan));
        continue;
      }
      const double dn = static_cast<double>(n);
      const double var = m2[c] / dn;
      out.entries.push_back(entry(MomentStat::Mean, mean[c]));
      out.entries.push_back(entry(MomentStat::Variance, var));
      if (var <= 1e-300) {
        out.dropped.push_back(entry(MomentStat::Skewness, nan));
        out.dropped.push_back(entry(MomentStat::Kurtosis, nan));
        continue;
      }
      out.entries.push_back(entry(MomentStat::Skewness, (m3[c] / dn) / std::pow(var, 1.5)));
      out.entries.push_back(entry(MomentStat::Kurtosis, (m4[c] / dn) / (var * var)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// GMM objective
// ---------------------------------------------------------------------------

/// The fixed-seed panel used to simulate moments at a candidate parameter
/// (common random numbers across objective evaluations).
struct NestedSimulation {
  PopulationSpec population;
  std::uint64_t seed = 7;
  MomentConfig moments;
  int threads = 1;
};

inline constexpr double kGmmPenalty = 1e10;

struct ObjectiveValue {
  double value = 0.0;
  bool penalized = false;
};

/// (m(θ) − m̂)ᵀ W (m(θ) − m̂) with diagonal W given by `weights` (aligned
/// with target.entries; empty means identity). A target moment the
/// simulation cannot reproduce, or any non-finite simulated moment, yields
/// the large finite penalty.
inline ObjectiveValue gmm_objective_detail(const GkosParams& params, const MomentVector& target,
                                           const std::vector<double>& weights, const NestedSimulation& sim) {
  require(weights.empty() || weights.size() == target.entries.size(), ErrorKind::Parameter,
          "weight vector must align with target moments");
  const Panel panel = simulate_gkos_panel(params, sim.population, sim.seed, sim.threads);
  const MomentVector simulated = compute_change_moments(panel, sim.moments);
  double total = 0.0;
  for (std::size_t k = 0; k < target.entries.size(); ++k) {
    const auto& t = target.entries[k];
    const MomentEntry* s = simulated.find(t.lag, t.age_bin, t.stat);
    if (s == nullptr || !std::isfinite(s->value)) return {kGmmPenalty, true};
    const double d = s->value - t.value;
    total += (weights.empty() ? 1.0 : weights[k]) * d * d;
  }
  if (!std::isfinite(total)) return {kGmmPenalty, true};
  return {total, false};
}

inline double gmm_objective(const GkosParams& params, const MomentVector& target, const std::vector<double>& weights,
                            const NestedSimulation& sim) {
  return gmm_objective_detail(params, target, weights, sim).value;
}

// ---------------------------------------------------------------------------
// GKOS estimation
// ---------------------------------------------------------------------------

enum class GmmWeighting { Identity, DiagonalBootstrap };

struct GmmConfig {
  MomentConfig moments;
  GmmWeighting weighting = GmmWeighting::Identity;
  int bootstrap_replicates = 50;
  int max_evaluations = 400;
  double tolerance = 1e-9;
  // Free parameters, by name: rho, fixed_effect_sd, perm{k}.{mean,variance,weight},
  // trans{k}.{mean,variance,weight} with k 1-based. Everything else stays at `start`.
  std::vector<std::string> free{"rho",          "perm1.mean",      "perm1.variance",
                                "perm1.weight", "trans1.variance", "trans1.weight"};
  std::map<std::string, std::pair<double, double>> bounds;
  GkosParams start = GkosParams::reference();
  int simulated_individuals = 20000;
  int threads = 1;

  void validate() const {
    require(max_evaluations > 0, ErrorKind::Parameter, "optimizer budget must be positive");
    require(tolerance > 0.0, ErrorKind::Parameter, "tolerance must be positive");
    require(!free.empty(), ErrorKind::Parameter, "no free parameters");
    for (const auto& [name, b] : bounds) {
      require(b.first <= b.second, ErrorKind::Parameter, "bounds must be well-ordered for " + name);
    }
    start.validate();
  }
};

struct GmmDiagnostics {
  double objective = 0.0;
  int evaluations = 0;
  bool converged = false;
  int penalized_evaluations = 0;
  double zero_share = 0.0;
  double mean_positive_log = 0.0;
  std::vector<std::string> free;
  std::vector<double> estimate;
};

namespace detail {

struct ParamSlot {
  enum class Kind { Rho, FixedEffect, PermMean, PermVar, PermWeight, TransMean, TransVar, TransWeight } kind;
  std::size_t component = 0;
};

inline ParamSlot parse_slot(const std::string& name) {
  using K = ParamSlot::Kind;
  if (name == "rho") return {K::Rho, 0};
  if (name == "fixed_effect_sd") return {K::FixedEffect, 0};
  const auto dot = name.find('.');
  require(dot != std::string::npos, ErrorKind::Parameter, "unknown GKOS parameter " + name);
  const std::string head = name.substr(0, dot);
  const std::string field = name.substr(dot + 1);
  const bool perm = head.rfind("perm", 0) == 0;
  const bool trans = head.rfind("trans", 0) == 0;
  require(perm || trans, ErrorKind::Parameter, "unknown GKOS parameter " + name);
  const std::size_t k = std::stoul(head.substr(perm ? 4 : 5));
  require(k >= 1 && k <= (perm ? 3u : 2u), ErrorKind::Parameter, "component index out of range in " + name);
  if (field == "mean") return {perm ? K::PermMean : K::TransMean, k - 1};
  if (field == "variance") return {perm ? K::PermVar : K::TransVar, k - 1};
  if (field == "weight") return {perm ? K::PermWeight : K::TransWeight, k - 1};
  throw Error(ErrorKind::Parameter, "unknown GKOS parameter " + name);
}

inline std::pair<double, double> default_bounds(const ParamSlot& s) {
  using K = ParamSlot::Kind;
  switch (s.kind) {
    case K::Rho: return {0.0, 0.995};
    case K::FixedEffect: return {0.0, 3.0};
    case K::PermMean:
    case K::TransMean: return {-2.0, 2.0};
    case K::PermVar:
    case K::TransVar: return {1e-6, 4.0};
    case K::PermWeight:
    case K::TransWeight: return {0.01, 0.99};
  }
  return {0.0, 1.0};
}

template <std::size_t K>
void set_weight(std::array<MixtureComponent, K>& mix, std::size_t k, double w) {
  double rest = 0.0;
  for (std::size_t j = 0; j < K; ++j) {
    if (j != k) rest += mix[j].weight;
  }
  mix[k].weight = w;
  for (std::size_t j = 0; j < K; ++j) {
    if (j == k) continue;
    mix[j].weight = rest > 0.0 ? mix[j].weight * (1.0 - w) / rest : (1.0 - w) / static_cast<double>(K - 1);
  }
}

template <std::size_t K>
void renormalize(std::array<MixtureComponent, K>& mix) {
  double s = 0.0;
  for (const auto& c : mix) s += c.weight;
  for (auto& c : mix) c.weight /= s;
  // Put the rounding residue on the largest component so the sum is exact.
  double rest = 0.0;
  std::size_t big = 0;
  for (std::size_t j = 0; j < K; ++j) {
    if (mix[j].weight > mix[big].weight) big = j;
  }
  for (std::size_t j = 0; j < K; ++j) {
    if (j != big) rest += mix[j].weight;
  }
  mix[big].weight = 1.0 - rest;
}

inline void apply_slot(GkosParams& p, const ParamSlot& s, double v) {
  using K = ParamSlot::Kind;
  switch (s.kind) {
    case K::Rho: p.rho = v; break;
    case K::FixedEffect: p.fixed_effect_sd = v; break;
    case K::PermMean: p.perm[s.component].mean = v; break;
    case K::PermVar: p.perm[s.component].variance = v; break;
    case K::PermWeight: set_weight(p.perm, s.component, v); break;
    case K::TransMean: p.trans[s.component].mean = v; break;
    case K::TransVar: p.trans[s.component].variance = v; break;
    case K::TransWeight: set_weight(p.trans, s.component, v); break;
  }
}

inline double read_slot(const GkosParams& p, const ParamSlot& s) {
  using K = ParamSlot::Kind;
  switch (s.kind) {
    case K::Rho: return p.rho;
    case K::FixedEffect: return p.fixed_effect_sd;
    case K::PermMean: return p.perm[s.component].mean;
    case K::PermVar: return p.perm[s.component].variance;
    case K::PermWeight: return p.perm[s.component].weight;
    case K::TransMean: return p.trans[s.component].mean;
    case K::TransVar: return p.trans[s.component].variance;
    case K::TransWeight: return p.trans[s.component].weight;
  }
  return 0.0;
}

inline PopulationSpec population_like(const Panel& panel, int n) {
  PopulationSpec pop;
  pop.n_individuals = n;
  int bmin = std::numeric_limits<int>::max(), bmax = std::numeric_limits<int>::min();
  int ymin = bmin, ymax = bmax, amin = bmin, amax = bmax;
  for (const auto& h : panel) {
    if (h.records.empty()) continue;
    bmin = std::min(bmin, h.birth_year);
    bmax = std::max(bmax, h.birth_year);
    for (const auto& r : h.records) {
      ymin = std::min(ymin, r.year);
      ymax = std::max(ymax, r.year);
      amin = std::min(amin, r.age);
      amax = std::max(amax, r.age);
    }
  }
  require(bmin <= bmax, ErrorKind::Estimation, "panel has no records");
  pop.birth_first = bmin;
  pop.birth_last = bmax;
  pop.window_first = ymin;
  pop.window_last = ymax;
  pop.entry_age = std::max(16, amin);
  pop.exit_age = std::max(pop.entry_age, amax);
  pop.conditioning_len = panel.front().conditioning_len;
  return pop;
}

}  // namespace detail

/// Diagonal weights 1/var from a bootstrap over individuals. Moments whose
/// bootstrap variance vanishes get weight 1.
inline std::vector<double> bootstrap_moment_weights(const Panel& panel, const MomentVector& target,
                                                    const MomentConfig& cfg, int replicates, std::uint64_t seed) {
  std::vector<double> s1(target.entries.size(), 0.0), s2(target.entries.size(), 0.0);
  std::vector<int> hits(target.entries.size(), 0);
  Panel resampled(panel.size());
  for (int b = 0; b < replicates; ++b) {
    Rng rng(seed, {b, stream::kReplicate});
    for (auto& h : resampled) h = panel[rng.below(panel.size())];
    const MomentVector m = compute_change_moments(resampled, cfg);
    for (std::size_t k = 0; k < target.entries.size(); ++k) {
      const auto& t = target.entries[k];
      if (const auto* e = m.find(t.lag, t.age_bin, t.stat)) {
        s1[k] += e->value;
        s2[k] += e->value * e->value;
        ++hits[k];
      }
    }
  }
  std::vector<double> w(target.entries.size(), 1.0);
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (hits[k] < 2) continue;
    const double n = hits[k];
    const double var = (s2[k] - s1[k] * s1[k] / n) / (n - 1.0);
    if (var > 1e-300) w[k] = 1.0 / var;
  }
  return w;
}

/// Simulated-moments GMM for the GKOS process by box-constrained
/// Nelder–Mead. zero_prob is set to the panel's zero share and log_level is
/// profiled so simulated mean positive log earnings match the panel.
inline std::pair<GkosParams, GmmDiagnostics> estimate_gkos(const Panel& panel, const GmmConfig& cfg,
                                                           std::uint64_t seed) {
  cfg.validate();
  const MomentVector target = compute_change_moments(panel, cfg.moments);
  require(!target.entries.empty(), ErrorKind::Estimation, "no usable moments in panel");

  GmmDiagnostics diag;
  std::int64_t zeros = 0, total = 0;
  double pos_sum = 0.0;
  std::int64_t pos_n = 0;
  for (const auto& h : panel) {
    for (const auto& r : h.records) {
      ++total;
      if (r.earnings > 0.0) {
        pos_sum += std::log(r.earnings);
        ++pos_n;
      } else {
        ++zeros;
      }
    }
  }
  diag.zero_share = total > 0 ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
  diag.mean_positive_log = pos_n > 0 ? pos_sum / static_cast<double>(pos_n) : 0.0;

  std::vector<detail::ParamSlot> slots;
  std::vector<double> x0, lo, hi, step;
  for (const auto& name : cfg.free) {
    const auto slot = detail::parse_slot(name);
    auto b = detail::default_bounds(slot);
    if (auto it = cfg.bounds.find(name); it != cfg.bounds.end()) b = it->second;
    slots.push_back(slot);
    lo.push_back(b.first);
    hi.push_back(b.second);
    x0.push_back(std::clamp(detail::read_slot(cfg.start, slot), b.first, b.second));
    step.push_back(0.1 * (b.second - b.first));
  }

  std::vector<double> weights;
  if (cfg.weighting == GmmWeighting::DiagonalBootstrap) {
    weights = bootstrap_moment_weights(panel, target, cfg.moments, cfg.bootstrap_replicates, seed);
  }

  NestedSimulation sim;
  sim.population = detail::population_like(panel, cfg.simulated_individuals);
  sim.seed = mix64(seed ^ 0x5eedULL);
  sim.moments = cfg.moments;
  sim.threads = cfg.threads;

  auto build = [&](const std::vector<double>& x) {
    GkosParams p = cfg.start;
    for (std::size_t j = 0; j < slots.size(); ++j) detail::apply_slot(p, slots[j], x[j]);
    detail::renormalize(p.perm);
    detail::renormalize(p.trans);
    p.zero_prob = diag.zero_share;
    p.log_level = diag.mean_positive_log - (p.stationary_mean() + mixture_mean(p.trans));
    return p;
  };
  auto objective = [&](const std::vector<double>& x) {
    const auto v = gmm_objective_detail(build(x), target, weights, sim);
    if (v.penalized) ++diag.penalized_evaluations;
    return v.value;
  };

  NelderMeadOptions opt;
  opt.max_evaluations = cfg.max_evaluations;
  opt.f_tolerance = cfg.tolerance;
  opt.x_tolerance = 1e-5;
  const auto res = nelder_mead(objective, x0, step, lo, hi, opt);
  diag.objective = res.f;
  diag.evaluations = res.evaluations;
  diag.converged = res.converged;
  diag.free = cfg.free;
  diag.estimate = res.x;
  return {build(res.x), diag};
}

// ---------------------------------------------------------------------------
// AR(1) estimation from first-difference autocovariances
// ---------------------------------------------------------------------------

/// Difference moments: with Δy = Δz + Δε, the autocovariances γ_k of Δy
/// satisfy γ0 + 2γ1 = 2σ²ρ/(1+ρ) and γ2 = −σ²ρ(1−ρ)/(1+ρ), independent of
/// the transitory variance; hence ρ = 1 + 2γ2/(γ0 + 2γ1). When γ0 + 2γ1 is
/// statistically indistinguishable from zero the permanent component has
/// no persistence to identify and ρ falls back to the lag-2/lag-1 ratio
/// γ2/γ1 (exact without a transitory component). Zero-earnings years are
/// treated as unobserved. Fixed-effect variance comes from long-lag level
/// autocovariances.
inline Ar1Params estimate_ar1(const Panel& panel) {
  constexpr int kMaxLag = 3;
  std::vector<std::vector<double>> diffs;  // per individual, NaN where undefined
  std::vector<std::vector<double>> levels;
  double dsum = 0.0, lsum = 0.0;
  std::int64_t dn = 0, ln = 0;
  for (const auto& h : panel) {
    if (h.records.empty()) continue;
    const int y0 = h.records.front().year;
    const int span = h.records.back().year - y0 + 1;
    std::vector<double> lv(static_cast<std::size_t>(span), std::numeric_limits<double>::quiet_NaN());
    for (const auto& r : h.records) {
      if (r.earnings > 0.0) lv[static_cast<std::size_t>(r.year - y0)] = std::log(r.earnings);
    }
    std::vector<double> dv(static_cast<std::size_t>(span), std::numeric_limits<double>::quiet_NaN());
    int count = 0;
    for (std::size_t t = 1; t < lv.size(); ++t) {
      if (std::isfinite(lv[t]) && std::isfinite(lv[t - 1])) {
        dv[t] = lv[t] - lv[t - 1];
        ++count;
      }
    }
    if (count < 3) continue;
    for (double d : dv) {
      if (std::isfinite(d)) {
        dsum += d;
        ++dn;
      }
    }
    for (double l : lv) {
      if (std::isfinite(l)) {
        lsum += l;
        ++ln;
      }
    }
    diffs.push_back(std::move(dv));
    levels.push_back(std::move(lv));
  }
  require(!diffs.empty(), ErrorKind::Estimation, "no individual has three consecutive-year pairs");
  const double dmean = dsum / static_cast<double>(dn);
  const double lmean = lsum / static_cast<double>(ln);

  std::array<double, kMaxLag + 1> gamma{};
  std::array<std::int64_t, kMaxLag + 1> gn{};
  double dsum1 = 0.0, dsum2 = 0.0;  // for the standard error of γ0 + 2γ1
  std::int64_t dcount = 0;
  for (const auto& dv : diffs) {
    for (std::size_t t = 0; t < dv.size(); ++t) {
      if (!std::isfinite(dv[t])) continue;
      const double a = dv[t] - dmean;
      for (int k = 0; k <= kMaxLag; ++k) {
        if (t < static_cast<std::size_t>(k)) break;
        const double b = dv[t - static_cast<std::size_t>(k)];
        if (!std::isfinite(b)) continue;
        gamma[static_cast<std::size_t>(k)] += a * (b - dmean);
        ++gn[static_cast<std::size_t>(k)];
      }
      if (t >= 1 && std::isfinite(dv[t - 1])) {
        const double v = a * a + 2.0 * a * (dv[t - 1] - dmean);
        dsum1 += v;
        dsum2 += v * v;
        ++dcount;
      }
    }
  }
  for (int k = 0; k <= kMaxLag; ++k) {
    require(gn[static_cast<std::size_t>(k)] > 1, ErrorKind::Estimation, "insufficient overlap for autocovariances");
    gamma[static_cast<std::size_t>(k)] /= static_cast<double>(gn[static_cast<std::size_t>(k)]);
  }
  const double scale = std::max(std::abs(gamma[0]), 1e-300);
  require(gamma[0] > 1e-14, ErrorKind::Estimation, "degenerate covariances: log earnings have no variation");

  const double d_hat = gamma[0] + 2.0 * gamma[1];
  double d_se = 0.0;
  if (dcount > 1) {
    const double m = dsum1 / static_cast<double>(dcount);
    d_se = std::sqrt(std::max(0.0, dsum2 / static_cast<double>(dcount) - m * m) / static_cast<double>(dcount));
  }
  double rho;
  if (std::abs(d_hat) > 4.0 * d_se && std::abs(d_hat) > 1e-12 * scale) {
    rho = 1.0 + 2.0 * gamma[2] / d_hat;
  } else {
    require(std::abs(gamma[1]) > 1e-14 * scale, ErrorKind::Estimation, "degenerate difference autocovariances");
    rho = gamma[2] / gamma[1];
  }
  rho = std::clamp(rho, -0.99, 0.99);

  // Non-negative least squares for (σ², τ) over γ0..γ3 given ρ.
  const double a[4] = {2.0 / (1.0 + rho), -(1.0 - rho) / (1.0 + rho), -rho * (1.0 - rho) / (1.0 + rho),
                       -rho * rho * (1.0 - rho) / (1.0 + rho)};
  const double b[4] = {2.0, -1.0, 0.0, 0.0};
  double aa = 0, ab = 0, bb = 0, ag = 0, bg = 0;
  for (int k = 0; k < 4; ++k) {
    aa += a[k] * a[k];
    ab += a[k] * b[k];
    bb += b[k] * b[k];
    ag += a[k] * gamma[static_cast<std::size_t>(k)];
    bg += b[k] * gamma[static_cast<std::size_t>(k)];
  }
  double sigma2 = 0.0, tau = 0.0;
  const double det = aa * bb - ab * ab;
  if (det > 1e-10 * aa * bb) {
    sigma2 = (ag * bb - bg * ab) / det;
    tau = (aa * bg - ab * ag) / det;
  }
  if (det <= 1e-10 * aa * bb || sigma2 < 0.0 || tau < 0.0) {
    const double s_only = std::max(0.0, ag / aa);
    const double t_only = std::max(0.0, bg / bb);
    auto sse = [&](double s, double t) {
      double e = 0.0;
      for (int k = 0; k < 4; ++k) {
        const double r = gamma[static_cast<std::size_t>(k)] - a[k] * s - b[k] * t;
        e += r * r;
      }
      return e;
    };
    if (sse(s_only, 0.0) <= sse(0.0, t_only)) {
      sigma2 = s_only;
      tau = 0.0;
    } else {
      sigma2 = 0.0;
      tau = t_only;
    }
  }

  // Level autocovariances at lags 4..8 identify the fixed-effect variance.
  const double v_stat = sigma2 / (1.0 - rho * rho);
  double fe_acc = 0.0;
  int fe_lags = 0;
  for (int k = 4; k <= 8; ++k) {
    double c = 0.0;
    std::int64_t n = 0;
    for (const auto& lv : levels) {
      for (std::size_t t = static_cast<std::size_t>(k); t < lv.size(); ++t) {
        const double x = lv[t], y = lv[t - static_cast<std::size_t>(k)];
        if (std::isfinite(x) && std::isfinite(y)) {
          c += (x - lmean) * (y - lmean);
          ++n;
        }
      }
    }
    if (n < 2) continue;
    fe_acc += c / static_cast<double>(n) - v_stat * std::pow(rho, k);
    ++fe_lags;
  }
  Ar1Params out;
  out.rho = rho;
  out.innovation_variance = sigma2;
  out.transitory_variance = tau;
  out.fixed_effect_sd = fe_lags > 0 ? std::sqrt(std::max(0.0, fe_acc / fe_lags)) : 0.0;
  out.log_level = lmean;
  return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const MomentVector& m) {
  auto encode = [](const std::vector<MomentEntry>& es) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : es) {
      arr.push_back({{"lag", e.lag},
                     {"age_bin", e.age_bin},
                     {"statistic", to_string(e.stat)},
                     {"value", std::isfinite(e.value) ? nlohmann::json(e.value) : nlohmann::json(nullptr)},
                     {"n_obs", e.n_obs}});
    }
    return arr;
  };
  return {{"moments", encode(m.entries)}, {"dropped", encode(m.dropped)}};
}

inline nlohmann::json to_json(const GkosParams& p) {
  auto mix = [](const auto& comps) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : comps) arr.push_back({{"mean", c.mean}, {"variance", c.variance}, {"weight", c.weight}});
    return arr;
  };
  return {{"process", "gkos"},
          {"rho", p.rho},
          {"permanent", mix(p.perm)},
          {"transitory", mix(p.trans)},
          {"fixed_effect_sd", p.fixed_effect_sd},
          {"zero_prob", p.zero_prob},
          {"log_level", p.log_level}};
}

inline nlohmann::json to_json(const Ar1Params& p) {
  return {{"process", "ar1"},
          {"rho", p.rho},
          {"innovation_variance", p.innovation_variance},
          {"transitory_variance", p.transitory_variance},
          {"fixed_effect_sd", p.fixed_effect_sd},
          {"log_level", p.log_level}};
}

inline GkosParams gkos_from_json(const nlohmann::json& j) {
  GkosParams p;
  p.rho = j.at("rho").get<double>();
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& c = j.at("permanent").at(k);
    p.perm[k] = {c.at("mean").get<double>(), c.at("variance").get<double>(), c.at("weight").get<double>()};
  }
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& c = j.at("transitory").at(k);
    p.trans[k] = {c.at("mean").get<double>(), c.at("variance").get<double>(), c.at("weight").get<double>()};
  }
  p.fixed_effect_sd = j.at("fixed_effect_sd").get<double>();
  p.zero_prob = j.at("zero_prob").get<double>();
  p.log_level = j.value("log_level", 0.0);
  return p;
}

inline Ar1Params ar1_from_json(const nlohmann::json& j) {
  Ar1Params p;
  p.rho = j.at("rho").get<double>();
  p.innovation_variance = j.at("innovation_variance").get<double>();
  p.transitory_variance = j.at("transitory_variance").get<double>();
  p.fixed_effect_sd = j.at("fixed_effect_sd").get<double>();
  p.log_level = j.value("log_level", 0.0);
  return p;
}

}  // namespace earnlab
