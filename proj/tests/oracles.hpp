#pragma once

// Independent checks shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "earnlab/earnlab.hpp"

namespace earnlab::oracle {

struct TinyModel {
  Panel panel;
  ModelParams params;
};

/// 1-layer, d = 8, 2-head model on a three-record featured panel, with
/// weights jittered away from their initial values.
inline TinyModel tiny_model(int context = 3, std::uint64_t seed = 3) {
  PopulationSpec pop;
  pop.n_individuals = 6;
  pop.birth_first = 1960;
  pop.birth_last = 1960;
  pop.window_first = 1985;
  pop.window_last = 1984 + context;
  pop.schema.continuous = {{"hours", 0.0, 1.0, 0.8}};
  pop.schema.categorical = {{"occupation", 4, 0.9}};
  pop.schema.missing_rate = 0.3;
  Ar1Params ap;
  ap.log_level = 10.0;
  auto panel = attach_features(simulate_ar1_panel(ap, pop, seed), pop, seed + 1);
  for (auto& h : panel) h.conditioning_len = 1;
  TokenizerConfig tc;
  tc.continuous_dim = 3;
  tc.missing_dim = 2;
  tc.age_dim = 3;
  tc.year_dim = 2;
  tc.model_dim = 8;
  auto tok = make_tokenizer(tc, fit_stats(panel), 1, {4}, seed + 2);
  ToyTransformerConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.model_dim = 8;
  cfg.max_context = context;
  auto p = make_model(cfg, std::move(tok));
  Rng r(seed, {99});
  for (auto* set : {&p.weights, &p.tokenizer.weights}) {
    for (auto& t : set->tensors()) {
      for (auto& v : t.data) v += 0.1 * r.normal();
    }
  }
  return {std::move(panel), std::move(p)};
}

/// Largest per-tensor relative error ||fd - g|| / ||fd|| + ||g|| between the
/// analytic gradient and central differences (step 1e-6) over all weights.
inline double gradient_max_rel_error(TinyModel& m) {
  auto seqs = prepare_sequences(m.panel, m.params.tokenizer, m.params.config.max_context);
  require(!seqs.empty(), ErrorKind::Parameter, "no sequence");
  const auto& s = seqs.front();
  auto& p = m.params;
  ParamSet gm = p.weights.zeros_like(), gt = p.tokenizer.weights.zeros_like();
  sequence_loss_and_grad(p, s, &gm, &gt);
  double worst = 0.0;
  auto check = [&](ParamSet& w, const ParamSet& g) {
    for (std::size_t i = 0; i < w.count(); ++i) {
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < w[i].size(); ++k) {
        const double orig = w[i].data[k];
        const double h = 1e-6;
        w[i].data[k] = orig + h;
        const double lp = sequence_loss_and_grad(p, s, nullptr, nullptr);
        w[i].data[k] = orig - h;
        const double lm = sequence_loss_and_grad(p, s, nullptr, nullptr);
        w[i].data[k] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        num += (fd - g[i].data[k]) * (fd - g[i].data[k]);
        den += fd * fd + g[i].data[k] * g[i].data[k];
      }
      if (den > 0.0) worst = std::max(worst, std::sqrt(num) / std::sqrt(den));
    }
  };
  check(p.weights, gm);
  check(p.tokenizer.weights, gt);
  return worst;
}

/// Perturbs token k and reports whether outputs at positions < k are
/// bit-identical and at least one position >= k changed.
inline bool causality_exact(const ModelParams& p, std::size_t length, std::uint64_t seed = 5) {
  Rng r(seed);
  std::vector<std::vector<double>> tokens(length, std::vector<double>(static_cast<std::size_t>(p.config.model_dim)));
  for (auto& t : tokens) {
    for (auto& v : t) v = r.normal();
  }
  const auto base = forward(p, tokens);
  for (std::size_t k = 0; k < length; ++k) {
    auto pert = tokens;
    // Non-constant shift: layer norm is invariant to adding a constant.
    for (auto& v : pert[k]) v += r.normal();
    const auto out = forward(p, pert);
    for (std::size_t j = 0; j < k; ++j) {
      if (out[j].point != base[j].point || out[j].q != base[j].q) return false;
    }
    if (out[k].point == base[k].point) return false;
  }
  return true;
}

/// Mean sequence loss over the first n training sequences.
inline double mean_sequence_loss(const ModelParams& p, const std::vector<Sequence>& seqs, std::size_t n) {
  double s = 0.0;
  n = std::min(n, seqs.size());
  for (std::size_t i = 0; i < n; ++i) s += sequence_loss_and_grad(p, seqs[i], nullptr, nullptr);
  return s / static_cast<double>(n);
}

/// Feature-coupled GKOS panel (mean-zero five-year ramps after
/// occupation switches).
inline PopulationSpec coupled_population(int n, int birth_first, int birth_last, double drift = 0.2) {
  PopulationSpec pop;
  pop.n_individuals = n;
  pop.birth_first = birth_first;
  pop.birth_last = birth_last;
  pop.window_first = 1965;
  pop.window_last = 2020;
  pop.schema.categorical = {{"occupation", 8, 0.9}};
  for (int k = 0; k < 8; ++k) pop.coupling.push_back({"occupation", -1, k, k < 4 ? drift : -drift, 5});
  return pop;
}

/// Loss of the model before and after `steps` optimizer steps on the
/// coupled panel, evaluated on the same fixed training sequences.
inline std::pair<double, double> training_loss_change(int steps, std::uint64_t seed = 11) {
  const auto pop = coupled_population(400, 1940, 1959);
  GkosParams g = GkosParams::reference();
  g.log_level = 12.6;
  const auto panel = attach_features(simulate_gkos_panel(g, pop, seed), pop, seed + 1);
  TokenizerConfig tc;
  auto make = [&] { return make_tokenizer(tc, fit_stats(panel), 0, {8}, seed); };
  ToyTransformerConfig cfg;
  TrainOptions opt;
  opt.validation_fraction = 0.0;
  opt.warmup_steps = 10;
  opt.max_steps = 0;
  const auto before = train_toy(panel, make(), cfg, opt, seed).first;
  opt.max_steps = steps;
  const auto after = train_toy(panel, make(), cfg, opt, seed).first;
  const auto seqs = prepare_sequences(panel, before.tokenizer, cfg.max_context);
  return {mean_sequence_loss(before, seqs, 200), mean_sequence_loss(after, seqs, 200)};
}

/// O(m^2) ensemble CRPS.
inline double crps_double_sum(const std::vector<double>& x, double y) {
  double a = 0.0, b = 0.0;
  for (double u : x) {
    a += std::abs(u - y);
    for (double v : x) b += std::abs(u - v);
  }
  const double m = static_cast<double>(x.size());
  return a / m - 0.5 * b / (m * m);
}

/// CRPS of N(mu, sd^2) at y.
inline double crps_gaussian(double mu, double sd, double y) {
  const double z = (y - mu) / sd;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  return sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

inline double gini_pairwise(const std::vector<double>& x) {
  double s = 0.0, m = 0.0;
  for (double a : x) {
    m += a;
    for (double b : x) s += std::abs(a - b);
  }
  const double n = static_cast<double>(x.size());
  m /= n;
  return s / (2.0 * n * n * m);
}

/// Textbook DM statistic: mean / sqrt(S/T) with
/// S = g0 + 2 sum_{k<=L} (1 - k/(L+1)) g_k, g_k = (1/T) sum_t (d_t - m)(d_{t-k} - m).
inline double dm_statistic_scalar(const std::vector<double>& d, int lag) {
  const double t = static_cast<double>(d.size());
  double m = 0.0;
  for (double v : d) m += v;
  m /= t;
  double s = 0.0;
  for (int k = 0; k <= lag; ++k) {
    double g = 0.0;
    for (std::size_t i = static_cast<std::size_t>(k); i < d.size(); ++i) g += (d[i] - m) * (d[i - static_cast<std::size_t>(k)] - m);
    g /= t;
    s += (k == 0 ? 1.0 : 2.0 * (1.0 - k / (lag + 1.0))) * g;
  }
  return m / std::sqrt(s / t);
}

/// Fraction of `reps` i.i.d. N(0,1) differential series of length t for
/// which |DM| > 1.96.
inline double dm_empirical_size(int reps, int t, int lag, std::uint64_t seed) {
  int rej = 0;
  for (int b = 0; b < reps; ++b) {
    Rng r(seed, {b});
    LossSeries s;
    for (int i = 0; i < t; ++i) {
      s.periods.push_back(i);
      s.d.push_back(r.normal());
      s.counts.push_back(1);
    }
    rej += std::abs(dm_test(s, lag).statistic) > 1.96 ? 1 : 0;
  }
  return rej / static_cast<double>(reps);
}

}  // namespace earnlab::oracle
