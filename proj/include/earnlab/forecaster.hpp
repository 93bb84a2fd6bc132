#pragma once

// Forecaster contract and implementations: the toy transformer (head
// quantiles at h = 1, decoded-path quantiles beyond), an AR(1) Kalman
// forecaster, a GKOS particle filter, per-horizon linear quantile
// regression, and an unconditional (marginal) benchmark.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "earnlab/panel.hpp"
#include "earnlab/quantile.hpp"
#include "earnlab/training.hpp"

namespace earnlab {

struct ForecastRequest {
  std::size_t context_len = 10;  // leading records used as conditioning
  int horizon = 1;
  int n_paths = 0;  // sample paths to return (0: none)
  std::uint64_t seed = 0;
};

struct ForecastResult {
  std::vector<QuantileForecast> quantiles;      // horizon 1..H, rearranged
  std::vector<std::vector<double>> paths;       // [path][h-1] earnings levels
  bool flagged = false;                         // forecaster-specific degeneracy flag
};

class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual std::string name() const = 0;
  virtual ForecastResult predict(const IndividualHistory& history, const ForecastRequest& req) const = 0;
};

namespace detail {

inline void check_request(const IndividualHistory& h, const ForecastRequest& req) {
  require(req.horizon >= 0, ErrorKind::Parameter, "horizon must be >= 0");
  require(req.n_paths >= 0, ErrorKind::Parameter, "n_paths must be >= 0");
  require(req.context_len >= 1 && req.context_len <= h.records.size(), ErrorKind::Context,
          "history shorter than the conditioning window");
}

// Equal-weight empirical quantile forecast from draws of log earnings.
inline QuantileForecast quantiles_from_draws(std::vector<double> draws) {
  require(!draws.empty(), ErrorKind::Parameter, "no draws");
  std::sort(draws.begin(), draws.end());
  QuantileForecast f;
  double s = 0.0;
  for (double v : draws) s += v;
  f.point = s / static_cast<double>(draws.size());
  for (std::size_t k = 0; k < kNumLevels; ++k) f.q[k] = sorted_quantile(draws, kQuantileLevels[k]);
  return f;
}

inline ForecastResult quantiles_from_paths(std::vector<std::vector<double>> paths, int horizon) {
  ForecastResult r;
  for (int k = 0; k < horizon; ++k) {
    std::vector<double> draws;
    draws.reserve(paths.size());
    for (const auto& p : paths) draws.push_back(log_earnings(p[static_cast<std::size_t>(k)]));
    r.quantiles.push_back(quantiles_from_draws(std::move(draws)));
  }
  r.paths = std::move(paths);
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Auxiliary feature imputer
// ---------------------------------------------------------------------------

/// Next-year categorical features from Laplace-smoothed first-order
/// transition counts, conditioned on the bucket of the year's log-earnings
/// change (below -t, within ±t, above t). Continuous features and their
/// missingness flags are carried forward.
struct FeatureImputer {
  std::vector<int> cardinalities;
  std::size_t n_continuous = 0;
  double bucket_threshold = 0.1;
  // transitions[k][bucket] is a cardinality x cardinality row-stochastic matrix.
  std::vector<std::array<std::vector<std::vector<double>>, 3>> transitions;
  std::vector<std::vector<double>> marginal;

  int bucket(double log_change) const {
    if (log_change < -bucket_threshold) return 0;
    if (log_change > bucket_threshold) return 2;
    return 1;
  }

  static FeatureImputer fit(const Panel& panel, std::vector<int> cardinalities, std::size_t n_continuous,
                            double threshold = 0.1, double smoothing = 1.0) {
    FeatureImputer imp;
    imp.cardinalities = std::move(cardinalities);
    imp.n_continuous = n_continuous;
    imp.bucket_threshold = threshold;
    const std::size_t nk = imp.cardinalities.size();
    imp.transitions.resize(nk);
    imp.marginal.resize(nk);
    for (std::size_t k = 0; k < nk; ++k) {
      const auto c = static_cast<std::size_t>(imp.cardinalities[k]);
      for (auto& m : imp.transitions[k]) m.assign(c, std::vector<double>(c, smoothing));
      imp.marginal[k].assign(c, smoothing);
    }
    for (const auto& h : panel) {
      for (std::size_t j = 0; j < h.records.size(); ++j) {
        const auto& b = h.records[j];
        for (std::size_t k = 0; k < nk; ++k) {
          if (b.missing[n_continuous + k] != 0 || b.categoricals[k] < 0 || b.categoricals[k] >= imp.cardinalities[k]) continue;
          imp.marginal[k][static_cast<std::size_t>(b.categoricals[k])] += 1.0;
        }
        if (j == 0 || h.records[j - 1].year + 1 != b.year) continue;
        const auto& a = h.records[j - 1];
        const int bk = imp.bucket(log_earnings(b.earnings) - log_earnings(a.earnings));
        for (std::size_t k = 0; k < nk; ++k) {
          if (a.missing[n_continuous + k] != 0 || b.missing[n_continuous + k] != 0) continue;
          const int from = a.categoricals[k];
          const int to = b.categoricals[k];
          if (from < 0 || to < 0 || from >= imp.cardinalities[k] || to >= imp.cardinalities[k]) continue;
          imp.transitions[k][static_cast<std::size_t>(bk)][static_cast<std::size_t>(from)][static_cast<std::size_t>(to)] += 1.0;
        }
      }
    }
    auto normalize = [](std::vector<double>& row) {
      const double s = std::accumulate(row.begin(), row.end(), 0.0);
      for (auto& v : row) v /= s;
    };
    for (std::size_t k = 0; k < nk; ++k) {
      for (auto& m : imp.transitions[k]) {
        for (auto& row : m) normalize(row);
      }
      normalize(imp.marginal[k]);
    }
    return imp;
  }

  /// Record for the year after `prev` with the given earnings.
  AnnualRecord next(const AnnualRecord& prev, double earnings, Rng& rng) const {
    AnnualRecord r;
    r.year = prev.year + 1;
    r.age = prev.age + 1;
    r.earnings = earnings;
    r.continuous = prev.continuous;
    r.categoricals = prev.categoricals;
    r.missing = prev.missing;
    const int bk = bucket(log_earnings(earnings) - log_earnings(prev.earnings));
    for (std::size_t k = 0; k < cardinalities.size(); ++k) {
      const int from = prev.categoricals[k];
      const bool known = prev.missing[n_continuous + k] == 0 && from >= 0 && from < cardinalities[k];
      const auto& row = known ? transitions[k][static_cast<std::size_t>(bk)][static_cast<std::size_t>(from)] : marginal[k];
      const double u = rng.uniform();
      double cum = 0.0;
      std::size_t pick = row.size() - 1;
      for (std::size_t c = 0; c < row.size(); ++c) {
        cum += row[c];
        if (u < cum) {
          pick = c;
          break;
        }
      }
      r.categoricals[k] = static_cast<int>(pick);
      r.missing[n_continuous + k] = 0;
    }
    return r;
  }
};

// ---------------------------------------------------------------------------
// Transformer decoding
// ---------------------------------------------------------------------------

/// Runs the first `context_len` records through the model; the cache then
/// holds their keys/values and the returned forecast is for the next year.
inline QuantileForecast encode_context(const ModelParams& p, const IndividualHistory& h, std::size_t context_len,
                                       ForwardCache& cache) {
  require(context_len >= 1 && context_len <= h.records.size(), ErrorKind::Context,
          "history shorter than the conditioning window");
  QuantileForecast last;
  for (std::size_t j = 0; j < context_len; ++j) last = forward_step(p, tokenize(h.records[j], p.tokenizer), cache);
  return last;
}

/// Continues a cache produced by encode_context for `horizon` years: at
/// each step the forecast is rearranged and sampled, exponentiated and
/// appended, and next-year features are imputed. Streams are keyed by
/// (seed, id, path, step).
inline std::vector<AnnualRecord> decode_from(const ModelParams& p, const FeatureImputer& imp, const AnnualRecord& last,
                                             std::int64_t id, QuantileForecast next, ForwardCache cache, int horizon,
                                             std::uint64_t seed, int path) {
  std::vector<AnnualRecord> out;
  if (horizon <= 0) return out;
  if (cache.length + static_cast<std::size_t>(horizon) - 1 > static_cast<std::size_t>(p.config.max_context)) {
    throw Error(ErrorKind::Context, "decoding horizon exceeds max_context");
  }
  out.reserve(static_cast<std::size_t>(horizon));
  const AnnualRecord* prev = &last;
  for (int step = 0; step < horizon; ++step) {
    Rng draw(seed, {id, path, step, stream::kDecode});
    const double log_v = sample_from_quantiles(rearranged(next), draw.uniform());
    Rng imp_rng(seed, {id, path, step, stream::kImpute});
    out.push_back(imp.next(*prev, std::exp(log_v), imp_rng));
    prev = &out.back();
    if (step + 1 < horizon) next = forward_step(p, tokenize(out.back(), p.tokenizer), cache);
  }
  return out;
}

inline std::vector<AnnualRecord> decode_autoregressive(const ModelParams& p, const FeatureImputer& imp,
                                                       const IndividualHistory& h, std::size_t context_len,
                                                       int horizon, std::uint64_t seed, int path = 0) {
  require(horizon >= 0, ErrorKind::Parameter, "horizon must be >= 0");
  if (horizon == 0) return {};
  ForwardCache cache(p.config);
  const auto next = encode_context(p, h, context_len, cache);
  return decode_from(p, imp, h.records[context_len - 1], h.id, next, std::move(cache), horizon, seed, path);
}

class TransformerForecaster : public Forecaster {
 public:
  TransformerForecaster(std::shared_ptr<const ModelParams> params, std::shared_ptr<const FeatureImputer> imputer,
                        int quantile_paths = 100)
      : params_(std::move(params)), imputer_(std::move(imputer)), quantile_paths_(quantile_paths) {}

  std::string name() const override { return "transformer"; }

  ForecastResult predict(const IndividualHistory& h, const ForecastRequest& req) const override {
    detail::check_request(h, req);
    ForecastResult r;
    if (req.horizon == 0) return r;
    ForwardCache cache(params_->config);
    const auto next = encode_context(*params_, h, req.context_len, cache);
    const int m = req.n_paths > 0 ? req.n_paths : (req.horizon > 1 ? quantile_paths_ : 0);
    std::vector<std::vector<double>> paths;
    for (int path = 0; path < m; ++path) {
      std::vector<AnnualRecord> recs;
      try {
        recs = decode_from(*params_, *imputer_, h.records[req.context_len - 1], h.id, next, cache, req.horizon,
                           req.seed, path);
      } catch (const Error& e) {
        throw Error(e.kind(), "path " + std::to_string(path) + ": " + e.what());
      }
      std::vector<double> y;
      for (const auto& rec : recs) y.push_back(rec.earnings);
      paths.push_back(std::move(y));
    }
    if (m > 0) r = detail::quantiles_from_paths(std::move(paths), req.horizon);
    else r.quantiles.resize(1);
    r.quantiles[0] = rearranged(next);
    if (req.n_paths == 0) r.paths.clear();
    return r;
  }

  const ModelParams& params() const { return *params_; }

 private:
  std::shared_ptr<const ModelParams> params_;
  std::shared_ptr<const FeatureImputer> imputer_;
  int quantile_paths_;
};

/// Mean attention (over individuals, layers and heads) from the position
/// that forecasts year t+h to each of the context positions, each row
/// restricted to the context and renormalized. Positions between the
/// context and the forecasting position use observed records.
inline std::vector<double> attention_average(const ModelParams& p, const Panel& panel, std::size_t context_len, int h) {
  require(h >= 1 && context_len >= 1, ErrorKind::Parameter, "attention_average needs h >= 1 and a context");
  const std::size_t pos = context_len + static_cast<std::size_t>(h) - 2;
  std::vector<double> avg(context_len, 0.0);
  std::size_t rows = 0;
  for (const auto& ind : panel) {
    if (ind.records.size() < pos + 1) continue;
    ForwardCache cache(p.config, false, true);
    for (std::size_t j = 0; j <= pos; ++j) forward_step(p, tokenize(ind.records[j], p.tokenizer), cache);
    const auto nh = static_cast<std::size_t>(p.config.heads);
    for (const auto& lc : cache.layers) {
      const auto& pr = lc.probs[pos];
      for (std::size_t hd = 0; hd < nh; ++hd) {
        const double* row = pr.data() + hd * (pos + 1);
        double z = 0.0;
        for (std::size_t j = 0; j < context_len; ++j) z += row[j];
        if (!(z > 0.0)) continue;
        for (std::size_t j = 0; j < context_len; ++j) avg[j] += row[j] / z;
        ++rows;
      }
    }
  }
  require(rows > 0, ErrorKind::Parameter, "no individual reaches the forecasting position");
  for (auto& v : avg) v /= static_cast<double>(rows);
  return avg;
}

// ---------------------------------------------------------------------------
// AR(1) Kalman forecaster
// ---------------------------------------------------------------------------

struct KalmanState {
  double alpha = 0.0, z = 0.0;
  double p_aa = 0.0, p_az = 0.0, p_zz = 0.0;
  int year = 0;
};

/// Filters (fixed effect, permanent state) through the observed log
/// earnings of the first `context_len` records. Zero-earnings years are
/// treated as unobserved. The state is dated at the last context year.
inline KalmanState kalman_filter(const Ar1Params& prm, const IndividualHistory& h, std::size_t context_len) {
  prm.validate();
  KalmanState s;
  s.p_aa = prm.fixed_effect_sd * prm.fixed_effect_sd;
  s.p_zz = prm.stationary_variance();
  s.year = h.records.front().year;
  for (std::size_t j = 0; j < context_len; ++j) {
    const auto& r = h.records[j];
    for (; s.year < r.year; ++s.year) {
      s.z *= prm.rho;
      s.p_az *= prm.rho;
      s.p_zz = prm.rho * prm.rho * s.p_zz + prm.innovation_variance;
    }
    if (r.earnings <= 0.0) continue;
    const double y = std::log(r.earnings) - prm.log_level;
    const double innov = y - s.alpha - s.z;
    const double sv = s.p_aa + 2.0 * s.p_az + s.p_zz + prm.transitory_variance;
    if (!(sv > 0.0)) continue;
    const double ka = (s.p_aa + s.p_az) / sv;
    const double kz = (s.p_az + s.p_zz) / sv;
    s.alpha += ka * innov;
    s.z += kz * innov;
    const double paa = s.p_aa - ka * (s.p_aa + s.p_az);
    const double paz = s.p_az - ka * (s.p_az + s.p_zz);
    const double pzz = s.p_zz - kz * (s.p_az + s.p_zz);
    s.p_aa = std::max(0.0, paa);
    s.p_az = paz;
    s.p_zz = std::max(0.0, pzz);
  }
  return s;
}

/// Gaussian h-step predictive mean and variance of log earnings.
inline std::pair<double, double> ar1_predictive(const Ar1Params& prm, const KalmanState& s, int h) {
  const double rh = std::pow(prm.rho, h);
  const double mean = prm.log_level + s.alpha + rh * s.z;
  const double innov = prm.rho * prm.rho < 1.0 ? prm.innovation_variance * (1.0 - rh * rh) / (1.0 - prm.rho * prm.rho)
                                               : prm.innovation_variance * h;
  const double var = s.p_aa + 2.0 * rh * s.p_az + rh * rh * s.p_zz + innov + prm.transitory_variance;
  return {mean, std::max(0.0, var)};
}

class Ar1Forecaster : public Forecaster {
 public:
  explicit Ar1Forecaster(Ar1Params params) : params_(params) { params_.validate(); }
  std::string name() const override { return "ar1"; }

  ForecastResult predict(const IndividualHistory& h, const ForecastRequest& req) const override {
    detail::check_request(h, req);
    ForecastResult r;
    const auto s = kalman_filter(params_, h, req.context_len);
    for (int k = 1; k <= req.horizon; ++k) {
      const auto [mean, var] = ar1_predictive(params_, s, k);
      QuantileForecast f;
      f.point = mean;
      const double sd = std::sqrt(var);
      for (std::size_t q = 0; q < kNumLevels; ++q) {
        f.q[q] = kQuantileLevels[q] == 0.5 ? mean : mean + sd * normal_quantile(kQuantileLevels[q]);
      }
      r.quantiles.push_back(f);
    }
    // Paths: joint posterior state draw, then forward simulation.
    const double l11 = std::sqrt(std::max(0.0, s.p_aa));
    const double l21 = l11 > 0.0 ? s.p_az / l11 : 0.0;
    const double l22 = std::sqrt(std::max(0.0, s.p_zz - l21 * l21));
    const double sig = std::sqrt(params_.innovation_variance);
    const double tau = std::sqrt(params_.transitory_variance);
    for (int m = 0; m < req.n_paths; ++m) {
      Rng rng(req.seed, {h.id, m, 0, stream::kDecode});
      const double e1 = rng.normal();
      const double e2 = rng.normal();
      const double alpha = s.alpha + l11 * e1;
      double z = s.z + l21 * e1 + l22 * e2;
      std::vector<double> path;
      for (int k = 1; k <= req.horizon; ++k) {
        z = params_.rho * z + sig * rng.normal();
        path.push_back(std::exp(params_.log_level + alpha + z + tau * rng.normal()));
      }
      r.paths.push_back(std::move(path));
    }
    return r;
  }

 private:
  Ar1Params params_;
};

// ---------------------------------------------------------------------------
// GKOS particle filter
// ---------------------------------------------------------------------------

struct ParticleOptions {
  int n_particles = 1000;
  double resample_threshold = 0.5;  // resample when ESS < threshold * N
  double collapse_threshold = 0.01; // flag when ESS < threshold * N
};

struct ParticleCloud {
  std::vector<double> alpha, z;  // equally weighted after filtering
  int year = 0;
  bool collapsed = false;
  int resamples = 0;
};

namespace detail {

// Systematic resampling of (alpha, z) by normalized weights.
inline void systematic_resample(std::vector<double>& alpha, std::vector<double>& z, const std::vector<double>& w,
                                double u0) {
  const std::size_t n = w.size();
  std::vector<double> a2(n), z2(n);
  double cum = w[0];
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (u0 + static_cast<double>(i)) / static_cast<double>(n);
    while (u > cum && j + 1 < n) cum += w[++j];
    a2[i] = alpha[j];
    z2[i] = z[j];
  }
  alpha.swap(a2);
  z.swap(z2);
}

}  // namespace detail

/// Bootstrap particle filter over (fixed effect, permanent state). Particles
/// start from the fixed-effect prior and a Gaussian with the stationary
/// permanent mean/variance; observed positive earnings reweight by the
/// transitory mixture density. Zero-earnings years carry no information
/// about the state and are skipped.
inline ParticleCloud particle_filter(const GkosParams& prm, const IndividualHistory& h, std::size_t context_len,
                                     const ParticleOptions& opt, std::uint64_t seed) {
  prm.validate();
  require(opt.n_particles >= 1, ErrorKind::Parameter, "n_particles must be >= 1");
  const auto n = static_cast<std::size_t>(opt.n_particles);
  ParticleCloud c;
  c.alpha.resize(n);
  c.z.resize(n);
  {
    Rng rng(seed, {h.id, 0, stream::kParticle, 0});
    const double m = prm.stationary_mean();
    const double sd = std::sqrt(prm.stationary_variance());
    for (std::size_t i = 0; i < n; ++i) {
      c.alpha[i] = prm.fixed_effect_sd * rng.normal();
      c.z[i] = m + sd * rng.normal();
    }
  }
  std::vector<double> logw(n, 0.0), w(n);
  c.year = h.records.front().year;
  for (std::size_t j = 0; j < context_len; ++j) {
    const auto& r = h.records[j];
    for (; c.year < r.year; ++c.year) {
      Rng rng(seed, {h.id, c.year + 1, stream::kParticle, 1});
      for (std::size_t i = 0; i < n; ++i) c.z[i] = prm.rho * c.z[i] + sample_mixture(prm.perm, rng);
    }
    if (r.earnings <= 0.0) continue;
    const double y = std::log(r.earnings) - prm.log_level;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      logw[i] += mixture_log_density(prm.trans, y - c.alpha[i] - c.z[i]);
      mx = std::max(mx, logw[i]);
    }
    if (!std::isfinite(mx)) {
      std::fill(logw.begin(), logw.end(), 0.0);
      c.collapsed = true;
      continue;
    }
    double sw = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = std::exp(logw[i] - mx);
      sw += w[i];
    }
    double s2 = 0.0;
    for (auto& v : w) {
      v /= sw;
      s2 += v * v;
    }
    const double ess = 1.0 / s2;
    if (ess < opt.collapse_threshold * static_cast<double>(n)) c.collapsed = true;
    if (ess < opt.resample_threshold * static_cast<double>(n)) {
      Rng rng(seed, {h.id, r.year, stream::kParticle, 2});
      detail::systematic_resample(c.alpha, c.z, w, rng.uniform());
      std::fill(logw.begin(), logw.end(), 0.0);
      ++c.resamples;
    }
  }
  // Final equal-weight cloud.
  double mx = *std::max_element(logw.begin(), logw.end());
  if (mx != 0.0 || std::any_of(logw.begin(), logw.end(), [](double v) { return v != 0.0; })) {
    double sw = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = std::exp(logw[i] - mx);
      sw += w[i];
    }
    for (auto& v : w) v /= sw;
    Rng rng(seed, {h.id, c.year, stream::kParticle, 3});
    detail::systematic_resample(c.alpha, c.z, w, rng.uniform());
  }
  return c;
}

class GkosForecaster : public Forecaster {
 public:
  GkosForecaster(GkosParams params, ParticleOptions opt = {}) : params_(params), opt_(opt) { params_.validate(); }
  std::string name() const override { return "gkos"; }

  ForecastResult predict(const IndividualHistory& h, const ForecastRequest& req) const override {
    detail::check_request(h, req);
    const auto cloud = particle_filter(params_, h, req.context_len, opt_, req.seed);
    const auto n = cloud.alpha.size();
    // Forward-simulate each particle once for the predictive quantiles.
    std::vector<std::vector<double>> sims(n);
    for (std::size_t i = 0; i < n; ++i) {
      sims[i] = simulate(cloud.alpha[i], cloud.z[i], req.horizon,
                         Rng(req.seed, {h.id, static_cast<std::int64_t>(i), 0, stream::kParticle, 4}));
    }
    ForecastResult r = detail::quantiles_from_paths(std::move(sims), req.horizon);
    r.paths.clear();
    for (int m = 0; m < req.n_paths; ++m) {
      Rng rng(req.seed, {h.id, m, 0, stream::kDecode});
      const auto i = static_cast<std::size_t>(rng.below(n));
      r.paths.push_back(simulate(cloud.alpha[i], cloud.z[i], req.horizon, rng));
    }
    r.flagged = cloud.collapsed;
    return r;
  }

  const GkosParams& params() const { return params_; }

 private:
  std::vector<double> simulate(double alpha, double z, int horizon, Rng rng) const {
    std::vector<double> out;
    for (int k = 1; k <= horizon; ++k) {
      z = params_.rho * z + sample_mixture(params_.perm, rng);
      const double logy = params_.log_level + alpha + z + sample_mixture(params_.trans, rng);
      const bool zero = params_.zero_prob > 0.0 && rng.uniform() < params_.zero_prob;
      out.push_back(zero ? 0.0 : std::exp(logy));
    }
    return out;
  }

  GkosParams params_;
  ParticleOptions opt_;
};

// ---------------------------------------------------------------------------
// Linear quantile regression per horizon
// ---------------------------------------------------------------------------

struct LinearQuantileOptions {
  int iterations = 1500;
  double step = 0.5;
};

/// Coefficients act on standardized features; the last coefficient is the
/// intercept.
struct LinearQuantileModel {
  std::vector<double> mean, sd;
  std::array<std::vector<double>, kNumLevels> coef;
  std::vector<double> point;

  QuantileForecast predict(const std::vector<double>& x) const {
    const std::size_t p = mean.size();
    require(x.size() == p, ErrorKind::Parameter, "feature count mismatch");
    std::vector<double> z(p);
    for (std::size_t j = 0; j < p; ++j) z[j] = (x[j] - mean[j]) / sd[j];
    auto dot = [&](const std::vector<double>& c) {
      double s = c[p];
      for (std::size_t j = 0; j < p; ++j) s += c[j] * z[j];
      return s;
    };
    QuantileForecast f;
    f.point = dot(point);
    for (std::size_t k = 0; k < kNumLevels; ++k) f.q[k] = dot(coef[k]);
    return rearranged(f);
  }
};

namespace detail {

// Solves A x = b (A symmetric positive semi-definite, small) with partial
// pivoting; a tiny ridge keeps it non-singular.
inline std::vector<double> solve_small(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t i = 0; i < n; ++i) a[i][i] += 1e-10;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    }
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    if (a[c][c] == 0.0) continue;
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = a[i][i] != 0.0 ? s / a[i][i] : 0.0;
  }
  return x;
}

}  // namespace detail

inline double mean_pinball(const std::vector<std::vector<double>>& z, const std::vector<double>& y,
                           const std::vector<double>& c, double alpha) {
  const std::size_t p = c.size() - 1;
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double f = c[p];
    for (std::size_t j = 0; j < p; ++j) f += c[j] * z[i][j];
    s += pinball_loss(y[i] - f, alpha);
  }
  return s / static_cast<double>(y.size());
}

/// Per-level coefficients minimizing mean pinball loss by full-batch
/// subgradient descent (step size step/sqrt(k+1), best iterate kept);
/// the point forecast is ordinary least squares.
inline LinearQuantileModel fit_quantile_linear(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                                               const LinearQuantileOptions& opt = {}) {
  require(!x.empty() && x.size() == y.size(), ErrorKind::Parameter, "fit_quantile_linear needs matching samples");
  const std::size_t n = x.size();
  const std::size_t p = x.front().size();
  LinearQuantileModel m;
  m.mean.assign(p, 0.0);
  m.sd.assign(p, 1.0);
  for (const auto& row : x) {
    require(row.size() == p, ErrorKind::Parameter, "ragged feature matrix");
    for (std::size_t j = 0; j < p; ++j) m.mean[j] += row[j] / static_cast<double>(n);
  }
  for (std::size_t j = 0; j < p; ++j) {
    double ss = 0.0;
    for (const auto& row : x) ss += (row[j] - m.mean[j]) * (row[j] - m.mean[j]);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    m.sd[j] = sd > 1e-12 ? sd : 1.0;
  }
  std::vector<std::vector<double>> z(n, std::vector<double>(p));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) z[i][j] = (x[i][j] - m.mean[j]) / m.sd[j];
  }
  // OLS point forecast.
  {
    std::vector<std::vector<double>> a(p + 1, std::vector<double>(p + 1, 0.0));
    std::vector<double> b(p + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r <= p; ++r) {
        const double zr = r < p ? z[i][r] : 1.0;
        b[r] += zr * y[i];
        for (std::size_t c = 0; c <= p; ++c) a[r][c] += zr * (c < p ? z[i][c] : 1.0);
      }
    }
    m.point = detail::solve_small(a, b);
  }
  // Start each level from OLS shifted by the residual quantile.
  std::vector<double> resid(n);
  for (std::size_t i = 0; i < n; ++i) {
    double f = m.point[p];
    for (std::size_t j = 0; j < p; ++j) f += m.point[j] * z[i][j];
    resid[i] = y[i] - f;
  }
  std::sort(resid.begin(), resid.end());
  for (std::size_t k = 0; k < kNumLevels; ++k) {
    const double alpha = kQuantileLevels[k];
    std::vector<double> c = m.point;
    c[p] += sorted_quantile(resid, alpha);
    std::vector<double> best = c;
    double best_loss = mean_pinball(z, y, c, alpha);
    std::vector<double> g(p + 1);
    for (int it = 0; it < opt.iterations; ++it) {
      std::fill(g.begin(), g.end(), 0.0);
      double loss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double f = c[p];
        for (std::size_t j = 0; j < p; ++j) f += c[j] * z[i][j];
        const double u = y[i] - f;
        loss += pinball_loss(u, alpha);
        const double d = (u < 0.0 ? 1.0 : 0.0) - alpha;
        for (std::size_t j = 0; j < p; ++j) g[j] += d * z[i][j];
        g[p] += d;
      }
      loss /= static_cast<double>(n);
      if (loss < best_loss) {
        best_loss = loss;
        best = c;
      }
      const double eta = opt.step / std::sqrt(static_cast<double>(it) + 1.0);
      for (std::size_t j = 0; j <= p; ++j) c[j] -= eta * g[j] / static_cast<double>(n);
    }
    if (mean_pinball(z, y, c, alpha) < best_loss) best = c;
    m.coef[k] = std::move(best);
  }
  return m;
}

/// Features: log earnings of the first `context_len` records. Target: log
/// earnings in year (last context year + h) when observed.
inline std::pair<std::vector<std::vector<double>>, std::vector<double>> horizon_design(const Panel& panel,
                                                                                      std::size_t context_len, int h) {
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (const auto& ind : panel) {
    if (ind.records.size() < context_len) continue;
    const int target_year = ind.records[context_len - 1].year + h;
    const AnnualRecord* target = nullptr;
    for (std::size_t j = context_len; j < ind.records.size(); ++j) {
      if (ind.records[j].year == target_year) {
        target = &ind.records[j];
        break;
      }
    }
    if (target == nullptr) continue;
    std::vector<double> row;
    for (std::size_t j = 0; j < context_len; ++j) row.push_back(log_earnings(ind.records[j].earnings));
    x.push_back(std::move(row));
    y.push_back(log_earnings(target->earnings));
  }
  return {std::move(x), std::move(y)};
}

inline LinearQuantileModel fit_quantile_linear(const Panel& panel, int h, std::size_t context_len = 10,
                                               const LinearQuantileOptions& opt = {}) {
  auto [x, y] = horizon_design(panel, context_len, h);
  require(!y.empty(), ErrorKind::Estimation, "no training pairs at horizon " + std::to_string(h));
  return fit_quantile_linear(x, y, opt);
}

/// One linear model per horizon. Paths are independent per-horizon draws
/// from the fitted quantiles (no cross-horizon dependence).
class LinearQuantileForecaster : public Forecaster {
 public:
  LinearQuantileForecaster(std::vector<LinearQuantileModel> models, std::size_t context_len)
      : models_(std::move(models)), context_len_(context_len) {}

  static LinearQuantileForecaster fit(const Panel& panel, int max_horizon, std::size_t context_len,
                                      const LinearQuantileOptions& opt = {}, int threads = 1) {
    std::vector<LinearQuantileModel> models(static_cast<std::size_t>(max_horizon));
    parallel_for(models.size(), threads, [&](std::size_t k) {
      models[k] = fit_quantile_linear(panel, static_cast<int>(k) + 1, context_len, opt);
    });
    return LinearQuantileForecaster(std::move(models), context_len);
  }

  std::string name() const override { return "linear_quantile"; }

  ForecastResult predict(const IndividualHistory& h, const ForecastRequest& req) const override {
    detail::check_request(h, req);
    require(req.context_len == context_len_, ErrorKind::Context, "linear model fitted for a different window");
    require(req.horizon <= static_cast<int>(models_.size()), ErrorKind::Parameter, "horizon beyond fitted models");
    std::vector<double> x;
    for (std::size_t j = 0; j < context_len_; ++j) x.push_back(log_earnings(h.records[j].earnings));
    ForecastResult r;
    for (int k = 0; k < req.horizon; ++k) r.quantiles.push_back(models_[static_cast<std::size_t>(k)].predict(x));
    for (int m = 0; m < req.n_paths; ++m) {
      std::vector<double> path;
      for (int k = 0; k < req.horizon; ++k) {
        Rng rng(req.seed, {h.id, m, k, stream::kDecode});
        path.push_back(std::exp(sample_from_quantiles(r.quantiles[static_cast<std::size_t>(k)], rng.uniform())));
      }
      r.paths.push_back(std::move(path));
    }
    return r;
  }

 private:
  std::vector<LinearQuantileModel> models_;
  std::size_t context_len_;
};

/// Pooled unconditional quantiles of training targets per horizon; ignores
/// the individual's history entirely.
class MarginalForecaster : public Forecaster {
 public:
  explicit MarginalForecaster(std::vector<QuantileForecast> by_horizon) : by_horizon_(std::move(by_horizon)) {}

  static MarginalForecaster fit(const Panel& panel, int max_horizon, std::size_t context_len) {
    std::vector<QuantileForecast> q;
    for (int h = 1; h <= max_horizon; ++h) {
      auto y = horizon_design(panel, context_len, h).second;
      require(!y.empty(), ErrorKind::Estimation, "no training targets at horizon " + std::to_string(h));
      q.push_back(detail::quantiles_from_draws(std::move(y)));
    }
    return MarginalForecaster(std::move(q));
  }

  std::string name() const override { return "marginal"; }

  ForecastResult predict(const IndividualHistory& h, const ForecastRequest& req) const override {
    detail::check_request(h, req);
    require(req.horizon <= static_cast<int>(by_horizon_.size()), ErrorKind::Parameter, "horizon beyond fitted range");
    ForecastResult r;
    r.quantiles.assign(by_horizon_.begin(), by_horizon_.begin() + req.horizon);
    for (int m = 0; m < req.n_paths; ++m) {
      std::vector<double> path;
      for (int k = 0; k < req.horizon; ++k) {
        Rng rng(req.seed, {h.id, m, k, stream::kDecode});
        path.push_back(std::exp(sample_from_quantiles(r.quantiles[static_cast<std::size_t>(k)], rng.uniform())));
      }
      r.paths.push_back(std::move(path));
    }
    return r;
  }

 private:
  std::vector<QuantileForecast> by_horizon_;
};

}  // namespace earnlab
