#pragma once

// Irregular annual panels: record types, the GKOS and AR(1) earnings
// processes, categorical/continuous feature attachment with optional
// earnings coupling, and lifetime present-discounted value.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "earnlab/core.hpp"

namespace earnlab {

struct AnnualRecord {
  int year = 0;
  int age = 0;
  double earnings = 0.0;
  std::vector<double> continuous;
  std::vector<int> categoricals;
  // One flag per continuous slot followed by one per categorical slot;
  // 1 means missing.
  std::vector<std::uint8_t> missing;
};

struct IndividualHistory {
  std::int64_t id = 0;
  int birth_year = 0;
  std::vector<AnnualRecord> records;
  int conditioning_len = 10;

  /// Validates strict year ordering, age consistency and non-negative earnings.
  void validate() const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      require(r.earnings >= 0.0, ErrorKind::Parameter, "negative earnings");
      require(r.age == r.year - birth_year, ErrorKind::Parameter, "age inconsistent with birth year");
      require(r.missing.size() == r.continuous.size() + r.categoricals.size(), ErrorKind::Schema,
              "missing mask length mismatch");
      if (i > 0) {
        require(records[i - 1].year < r.year, ErrorKind::Parameter, "records not strictly increasing in year");
      }
    }
  }
};

using Panel = std::vector<IndividualHistory>;

/// log earnings with the zero convention: a zero-earnings year maps to log(1) = 0.
inline double log_earnings(double earnings) { return earnings > 0.0 ? std::log(earnings) : 0.0; }

// ---------------------------------------------------------------------------
// Process parameters
// ---------------------------------------------------------------------------

struct MixtureComponent {
  double mean = 0.0;
  double variance = 1.0;
  double weight = 1.0;
};

template <std::size_t K>
double mixture_mean(const std::array<MixtureComponent, K>& mix) {
  double m = 0.0;
  for (const auto& c : mix) m += c.weight * c.mean;
  return m;
}

template <std::size_t K>
double mixture_variance(const std::array<MixtureComponent, K>& mix) {
  const double m = mixture_mean(mix);
  double v = 0.0;
  for (const auto& c : mix) v += c.weight * (c.variance + (c.mean - m) * (c.mean - m));
  return v;
}

template <std::size_t K>
double sample_mixture(const std::array<MixtureComponent, K>& mix, Rng& rng) {
  const double u = rng.uniform();
  const double z = rng.normal();
  double cum = 0.0;
  std::size_t k = 0;
  for (; k + 1 < K; ++k) {
    cum += mix[k].weight;
    if (u < cum) break;
  }
  return mix[k].mean + std::sqrt(mix[k].variance) * z;
}

template <std::size_t K>
double mixture_log_density(const std::array<MixtureComponent, K>& mix, double x,
                           double variance_floor = 1e-12) {
  double best = -std::numeric_limits<double>::infinity();
  std::array<double, K> terms{};
  for (std::size_t k = 0; k < K; ++k) {
    if (mix[k].weight <= 0.0) {
      terms[k] = -std::numeric_limits<double>::infinity();
      continue;
    }
    const double v = std::max(mix[k].variance, variance_floor);
    const double d = x - mix[k].mean;
    terms[k] = std::log(mix[k].weight) - 0.5 * std::log(2.0 * std::numbers::pi * v) - 0.5 * d * d / v;
    best = std::max(best, terms[k]);
  }
  if (!std::isfinite(best)) return best;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - best);
  return best + std::log(s);
}

/// Fixed effect + AR(1) permanent component with a three-normal innovation
/// mixture + two-normal transitory mixture, plus an i.i.d. zero-earnings
/// override. log_level shifts every log-earnings value.
struct GkosParams {
  double rho = 0.924;
  std::array<MixtureComponent, 3> perm{};
  std::array<MixtureComponent, 2> trans{};
  double fixed_effect_sd = 0.0;
  double zero_prob = 0.0;
  double log_level = 0.0;

  /// Estimated values reported for the Swedish training cohorts. Only the
  /// first permanent and first transitory component are reported; the
  /// remaining components are filled with zero-mean tail components.
  static GkosParams reference() {
    GkosParams p;
    p.rho = 0.924;
    p.perm = {MixtureComponent{-0.287, 0.0418, 0.784}, MixtureComponent{0.0, 0.15, 0.166},
              MixtureComponent{0.0, 1.0, 0.050}};
    p.trans = {MixtureComponent{0.0, 0.0712, 0.681}, MixtureComponent{0.0, 0.5, 0.319}};
    p.fixed_effect_sd = 0.3;
    p.zero_prob = 0.0;
    return p;
  }

  void validate() const {
    require(std::isfinite(rho) && std::abs(rho) < 1.0, ErrorKind::Parameter, "rho must lie in (-1,1)");
    auto check = [](const auto& mix, const char* name) {
      double w = 0.0;
      for (const auto& c : mix) {
        require(c.variance >= 0.0 && std::isfinite(c.variance), ErrorKind::Parameter,
                std::string(name) + " variance must be non-negative");
        require(c.weight >= 0.0, ErrorKind::Parameter, std::string(name) + " weight must be non-negative");
        require(std::isfinite(c.mean), ErrorKind::Parameter, std::string(name) + " mean must be finite");
        w += c.weight;
      }
      require(std::abs(w - 1.0) <= 1e-12, ErrorKind::Parameter, std::string(name) + " weights must sum to 1");
    };
    check(perm, "permanent mixture");
    check(trans, "transitory mixture");
    require(fixed_effect_sd >= 0.0, ErrorKind::Parameter, "fixed_effect_sd must be >= 0");
    require(zero_prob >= 0.0 && zero_prob <= 1.0, ErrorKind::Parameter, "zero_prob must be in [0,1]");
  }

  double stationary_mean() const { return mixture_mean(perm) / (1.0 - rho); }
  double stationary_variance() const { return mixture_variance(perm) / (1.0 - rho * rho); }
};

struct Ar1Params {
  double rho = 0.9;
  double innovation_variance = 0.19;
  double transitory_variance = 0.0;
  double fixed_effect_sd = 0.0;
  double log_level = 0.0;

  void validate() const {
    require(std::isfinite(rho) && std::abs(rho) < 1.0, ErrorKind::Parameter, "rho must lie in (-1,1)");
    require(innovation_variance >= 0.0 && transitory_variance >= 0.0 && fixed_effect_sd >= 0.0,
            ErrorKind::Parameter, "variances must be non-negative");
  }

  double stationary_variance() const { return innovation_variance / (1.0 - rho * rho); }
};

// ---------------------------------------------------------------------------
// Population and feature schema
// ---------------------------------------------------------------------------

struct ContinuousFeatureSpec {
  std::string name;
  double mean = 0.0;
  double sd = 1.0;
  double rho = 0.8;
};

struct CategoricalFeatureSpec {
  std::string name;
  int cardinality = 2;
  double stay_prob = 0.9;
};

struct FeatureSchema {
  std::vector<ContinuousFeatureSpec> continuous;
  std::vector<CategoricalFeatureSpec> categorical;
  double missing_rate = 0.0;

  std::size_t slot_count() const { return continuous.size() + categorical.size(); }

  int categorical_index(const std::string& name) const {
    for (std::size_t k = 0; k < categorical.size(); ++k) {
      if (categorical[k].name == name) return static_cast<int>(k);
    }
    return -1;
  }
};

/// A switch of `feature` (optionally restricted to from -> to) adds `drift`
/// log points per year to the following `duration` years of earnings.
struct CouplingRule {
  std::string feature;
  int from = -1;
  int to = -1;
  double drift = 0.0;
  int duration = 5;
};

struct PopulationSpec {
  int n_individuals = 1000;
  int birth_first = 1960;
  int birth_last = 1960;
  int window_first = 1985;
  int window_last = 2014;
  int entry_age = 25;
  int exit_age = 64;
  double gap_prob = 0.0;
  std::int64_t id_offset = 0;
  int conditioning_len = 10;
  FeatureSchema schema;
  std::vector<CouplingRule> coupling;

  void validate() const {
    require(n_individuals >= 1, ErrorKind::Parameter, "n_individuals must be >= 1");
    require(birth_first <= birth_last, ErrorKind::Parameter, "birth cohort range must be ordered");
    require(window_first <= window_last, ErrorKind::Parameter, "observation window must be ordered");
    require(entry_age >= 16, ErrorKind::Parameter, "entry_age must be >= 16");
    require(exit_age >= entry_age, ErrorKind::Parameter, "exit_age must be >= entry_age");
    require(gap_prob >= 0.0 && gap_prob < 1.0, ErrorKind::Parameter, "gap_prob must be in [0,1)");
    for (const auto& c : schema.categorical) {
      require(c.cardinality >= 2, ErrorKind::Schema, "categorical cardinality must be >= 2: " + c.name);
      require(c.stay_prob >= 0.0 && c.stay_prob <= 1.0, ErrorKind::Schema, "stay_prob out of range: " + c.name);
    }
    require(schema.missing_rate >= 0.0 && schema.missing_rate <= 1.0, ErrorKind::Schema,
            "missing_rate must be in [0,1]");
    for (const auto& rule : coupling) {
      const int k = schema.categorical_index(rule.feature);
      require(k >= 0, ErrorKind::Schema, "coupling references unknown feature: " + rule.feature);
      const int card = schema.categorical[static_cast<std::size_t>(k)].cardinality;
      require(rule.from < card && rule.to < card, ErrorKind::Schema,
              "coupling category out of range: " + rule.feature);
      require(rule.duration >= 1, ErrorKind::Schema, "coupling duration must be >= 1");
    }
  }

  int birth_year_of(std::size_t index) const {
    const int cohorts = birth_last - birth_first + 1;
    return birth_first + static_cast<int>(index % static_cast<std::size_t>(cohorts));
  }
};

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

namespace detail {

inline IndividualHistory empty_history(const PopulationSpec& pop, std::size_t index) {
  IndividualHistory h;
  h.id = pop.id_offset + static_cast<std::int64_t>(index);
  h.birth_year = pop.birth_year_of(index);
  h.conditioning_len = pop.conditioning_len;
  return h;
}

inline AnnualRecord blank_record(const PopulationSpec& pop, int year, int age, double earnings) {
  AnnualRecord r;
  r.year = year;
  r.age = age;
  r.earnings = earnings;
  r.continuous.assign(pop.schema.continuous.size(), 0.0);
  r.categoricals.assign(pop.schema.categorical.size(), 0);
  r.missing.assign(pop.schema.slot_count(), 0);
  return r;
}

// Shared life-cycle loop: `draw(year, is_entry)` returns the log earnings of
// that year (excluding the zero override) and advances latent state.
template <class Draw>
IndividualHistory simulate_individual(const PopulationSpec& pop, std::size_t index, std::uint64_t seed,
                                      double zero_prob, Draw&& draw) {
  IndividualHistory h = empty_history(pop, index);
  for (int age = pop.entry_age; age <= pop.exit_age; ++age) {
    const int year = h.birth_year + age;
    if (year > pop.window_last) break;
    const double log_y = draw(year, age == pop.entry_age);
    if (year < pop.window_first) continue;
    double y = std::exp(log_y);
    if (zero_prob > 0.0) {
      Rng zr(seed, {h.id, year, stream::kZero});
      if (zr.uniform() < zero_prob) y = 0.0;
    }
    if (pop.gap_prob > 0.0) {
      Rng gr(seed, {h.id, year, stream::kGap});
      if (gr.uniform() < pop.gap_prob) continue;
    }
    h.records.push_back(blank_record(pop, year, age, y));
  }
  return h;
}

inline int burn_in_length(double rho) {
  if (std::abs(rho) < 1e-12) return 0;
  const double b = std::ceil(std::log(0.01) / std::log(std::abs(rho)));
  return static_cast<int>(std::clamp(b, 0.0, 200.0));
}

}  // namespace detail

/// Log earnings = log_level + fixed effect + permanent AR path + transitory
/// draw; each person-year is then zeroed with probability zero_prob. The
/// permanent state starts from its stationary law at entry age (a Gaussian
/// with the stationary mean/variance followed by a burn-in that removes the
/// higher-moment mismatch to below 1% of its initial size).
inline Panel simulate_gkos_panel(const GkosParams& params, const PopulationSpec& pop, std::uint64_t seed,
                                 int threads = 1) {
  params.validate();
  pop.validate();
  const double st_mean = params.stationary_mean();
  const double st_sd = std::sqrt(params.stationary_variance());
  const int burn = detail::burn_in_length(params.rho);
  Panel panel(static_cast<std::size_t>(pop.n_individuals));
  parallel_for(panel.size(), threads, [&](std::size_t i) {
    const std::int64_t id = pop.id_offset + static_cast<std::int64_t>(i);
    const int entry_year = pop.birth_year_of(i) + pop.entry_age;
    Rng fe(seed, {id, 0, stream::kFixedEffect});
    const double alpha = params.fixed_effect_sd * fe.normal();
    double z = 0.0;
    auto draw = [&](int year, bool entry) {
      if (entry) {
        Rng init(seed, {id, 0, stream::kInit});
        z = st_mean + st_sd * init.normal();
        for (int k = burn; k >= 1; --k) {
          Rng b(seed, {id, entry_year - k, stream::kBurnIn});
          z = params.rho * z + sample_mixture(params.perm, b);
        }
      } else {
        Rng pr(seed, {id, year, stream::kPermanent});
        z = params.rho * z + sample_mixture(params.perm, pr);
      }
      Rng tr(seed, {id, year, stream::kTransitory});
      return params.log_level + alpha + z + sample_mixture(params.trans, tr);
    };
    panel[i] = detail::simulate_individual(pop, i, seed, params.zero_prob, draw);
  });
  return panel;
}

/// Gaussian special case: exact stationary initialisation, no zero override.
inline Panel simulate_ar1_panel(const Ar1Params& params, const PopulationSpec& pop, std::uint64_t seed,
                                int threads = 1) {
  params.validate();
  pop.validate();
  const double sig = std::sqrt(params.innovation_variance);
  const double tau = std::sqrt(params.transitory_variance);
  const double st_sd = std::sqrt(params.stationary_variance());
  Panel panel(static_cast<std::size_t>(pop.n_individuals));
  parallel_for(panel.size(), threads, [&](std::size_t i) {
    const std::int64_t id = pop.id_offset + static_cast<std::int64_t>(i);
    Rng fe(seed, {id, 0, stream::kFixedEffect});
    const double alpha = params.fixed_effect_sd * fe.normal();
    double z = 0.0;
    auto draw = [&](int year, bool entry) {
      if (entry) {
        Rng init(seed, {id, 0, stream::kInit});
        z = st_sd * init.normal();
      } else {
        Rng pr(seed, {id, year, stream::kPermanent});
        z = params.rho * z + sig * pr.normal();
      }
      Rng tr(seed, {id, year, stream::kTransitory});
      return params.log_level + alpha + z + tau * tr.normal();
    };
    panel[i] = detail::simulate_individual(pop, i, seed, 0.0, draw);
  });
  return panel;
}

/// Populates continuous, categorical and missing slots. Categoricals follow
/// a per-feature Markov chain (stay with stay_prob, else move uniformly to
/// another category); continuous features are stationary Gaussian AR(1)
/// paths. Coupling rules shift subsequent log earnings after a switch.
inline Panel attach_features(Panel panel, const PopulationSpec& pop, std::uint64_t seed, int threads = 1) {
  pop.validate();
  const auto& schema = pop.schema;
  const std::size_t n_cont = schema.continuous.size();
  const std::size_t n_cat = schema.categorical.size();
  std::vector<int> rule_feature;
  for (const auto& rule : pop.coupling) rule_feature.push_back(schema.categorical_index(rule.feature));

  parallel_for(panel.size(), threads, [&](std::size_t i) {
    auto& h = panel[i];
    if (h.records.empty()) return;
    const int start = std::min(h.records.front().year, h.birth_year + pop.entry_age);
    const int stop = h.records.back().year;
    const std::size_t span = static_cast<std::size_t>(stop - start + 1);

    std::vector<std::vector<int>> cat(n_cat, std::vector<int>(span));
    std::vector<std::vector<double>> cont(n_cont, std::vector<double>(span));
    for (std::size_t k = 0; k < n_cat; ++k) {
      const auto& spec = schema.categorical[k];
      for (std::size_t t = 0; t < span; ++t) {
        Rng r(seed, {h.id, start + static_cast<int>(t), stream::kCategorical, static_cast<std::int64_t>(k)});
        if (t == 0) {
          cat[k][t] = static_cast<int>(r.below(static_cast<std::uint64_t>(spec.cardinality)));
        } else if (r.uniform() < spec.stay_prob) {
          cat[k][t] = cat[k][t - 1];
        } else {
          int next = static_cast<int>(r.below(static_cast<std::uint64_t>(spec.cardinality - 1)));
          if (next >= cat[k][t - 1]) ++next;
          cat[k][t] = next;
        }
      }
    }
    for (std::size_t k = 0; k < n_cont; ++k) {
      const auto& spec = schema.continuous[k];
      const double innov = spec.sd * std::sqrt(std::max(0.0, 1.0 - spec.rho * spec.rho));
      double x = 0.0;
      for (std::size_t t = 0; t < span; ++t) {
        Rng r(seed, {h.id, start + static_cast<int>(t), stream::kContinuous, static_cast<std::int64_t>(k)});
        x = t == 0 ? spec.sd * r.normal() : spec.rho * x + innov * r.normal();
        cont[k][t] = spec.mean + x;
      }
    }

    // Accumulated log shift per calendar year from coupled switches.
    std::vector<double> shift(span, 0.0);
    for (std::size_t q = 0; q < pop.coupling.size(); ++q) {
      const auto& rule = pop.coupling[q];
      const auto k = static_cast<std::size_t>(rule_feature[q]);
      for (std::size_t t = 1; t < span; ++t) {
        const int a = cat[k][t - 1];
        const int b = cat[k][t];
        if (a == b) continue;
        if (rule.from >= 0 && a != rule.from) continue;
        if (rule.to >= 0 && b != rule.to) continue;
        for (std::size_t s = t + 1; s < span; ++s) {
          shift[s] += rule.drift * static_cast<double>(std::min<std::size_t>(s - t, static_cast<std::size_t>(rule.duration)));
        }
      }
    }

    for (auto& rec : h.records) {
      const auto t = static_cast<std::size_t>(rec.year - start);
      rec.continuous.resize(n_cont);
      rec.categoricals.resize(n_cat);
      rec.missing.assign(n_cont + n_cat, 0);
      for (std::size_t k = 0; k < n_cont; ++k) rec.continuous[k] = cont[k][t];
      for (std::size_t k = 0; k < n_cat; ++k) rec.categoricals[k] = cat[k][t];
      if (schema.missing_rate > 0.0) {
        Rng r(seed, {h.id, rec.year, stream::kMissing});
        for (auto& m : rec.missing) m = r.uniform() < schema.missing_rate ? 1 : 0;
      }
      if (shift[t] != 0.0 && rec.earnings > 0.0) rec.earnings *= std::exp(shift[t]);
    }
  });
  return panel;
}

// ---------------------------------------------------------------------------
// Lifetime present-discounted value
// ---------------------------------------------------------------------------

inline constexpr int kLifetimeFirstAge = 20;
inline constexpr int kLifetimeLastAge = 64;
inline constexpr int kLifetimeYears = kLifetimeLastAge - kLifetimeFirstAge + 1;

/// Sum over ages 20..64 of (1+r)^-(a-20) y_a, where `by_age[k]` is the
/// earnings at age base_age + k; ages past the end of the span count as 0.
inline double lifetime_pdv(std::span<const double> by_age, double r, int base_age = kLifetimeFirstAge) {
  require(r > -1.0, ErrorKind::Parameter, "discount rate must exceed -1");
  double total = 0.0;
  for (std::size_t k = 0; k < by_age.size(); ++k) {
    const int age = base_age + static_cast<int>(k);
    if (age < kLifetimeFirstAge || age > kLifetimeLastAge) continue;
    total += std::pow(1.0 + r, -(age - kLifetimeFirstAge)) * by_age[k];
  }
  return total;
}

/// Same sum over a history's observed records; unobserved ages contribute 0.
inline double lifetime_pdv(const IndividualHistory& history, double r) {
  std::vector<double> by_age(kLifetimeYears, 0.0);
  for (const auto& rec : history.records) {
    if (rec.age >= kLifetimeFirstAge && rec.age <= kLifetimeLastAge) {
      by_age[static_cast<std::size_t>(rec.age - kLifetimeFirstAge)] = rec.earnings;
    }
  }
  return lifetime_pdv(by_age, r);
}

}  // namespace earnlab
