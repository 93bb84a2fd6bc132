#pragma once

// Config-driven experiment pipeline: simulate -> split -> fit -> calibrate
// -> forecast -> aggregate -> score -> report, plus the placebo and
// calibration-sensitivity studies.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "earnlab/conformal.hpp"
#include "earnlab/downstream.hpp"
#include "earnlab/estimation.hpp"
#include "earnlab/forecaster.hpp"
#include "earnlab/metrics.hpp"
#include "earnlab/panel_io.hpp"
#include "earnlab/version.hpp"

namespace earnlab {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CohortRange {
  int first = 0;
  int last = 0;
  bool contains(int y) const { return y >= first && y <= last; }
};

struct SplitSpec {
  CohortRange train{1940, 1959};
  CohortRange calibration{1960, 1969};
  CohortRange test{1970, 1979};
};

struct GkosFitSpec {
  bool estimate = true;
  int particles = 1000;
  int simulated_individuals = 5000;
  int max_evaluations = 200;
  std::string weighting = "identity";
};

struct TransformerSpec {
  ToyTransformerConfig model;
  TokenizerConfig tokenizer;
  TrainOptions train;
  int quantile_paths = 100;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  int threads = 1;
  std::string study = "headline";
  std::string out_dir = "out";
  std::string source_text;  // TOML source, hashed into the manifest

  std::string process = "ar1";
  Ar1Params ar1;
  GkosParams gkos = GkosParams::reference();
  PopulationSpec population;
  SplitSpec split;

  std::vector<std::string> roster{"ar1"};
  std::string benchmark = "ar1";
  GkosFitSpec gkos_fit;
  TransformerSpec transformer;
  LinearQuantileOptions linear;

  std::vector<double> alphas{0.1, 0.2};
  std::vector<std::string> modes{"pooled", "stratified"};
  std::string group_by;  // "", "cohort" or a categorical feature name

  std::vector<std::string> lifetime_roster;
  int lifetime_paths = 100;
  int lifetime_individuals = 0;  // 0: every eligible test individual
  double discount_rate = 0.02;
  double lifetime_alpha = 0.1;
  TaxSchedule tax;

  std::vector<int> horizons{1, 2, 3, 4, 5};
  int crps_paths = 100;
  int dm_lag = 5;

  int short_conditioning_len = 5;
  std::vector<std::size_t> loco_sizes{1000, 5000};
  std::vector<std::size_t> bootstrap_sizes{1000, 5000};
  int replicates = 200;

  int max_horizon() const { return horizons.empty() ? 0 : *std::max_element(horizons.begin(), horizons.end()); }
  std::size_t conditioning_len() const { return static_cast<std::size_t>(population.conditioning_len); }
  bool uses(const std::string& f) const {
    return std::find(roster.begin(), roster.end(), f) != roster.end() ||
           std::find(lifetime_roster.begin(), lifetime_roster.end(), f) != lifetime_roster.end();
  }

  void validate() const;
};

inline const std::vector<std::string>& known_forecasters() {
  static const std::vector<std::string> names{"ar1", "gkos", "linear", "marginal", "transformer"};
  return names;
}

inline const std::vector<std::string>& known_studies() {
  static const std::vector<std::string> names{"headline", "placebo-perm", "placebo-short", "loco", "bootstrap"};
  return names;
}

inline void ExperimentConfig::validate() const {
  auto cfg_require = [](bool c, const std::string& msg) { require(c, ErrorKind::Config, msg); };
  auto known = [](const std::vector<std::string>& names, const std::string& s) {
    return std::find(names.begin(), names.end(), s) != names.end();
  };
  cfg_require(known(known_studies(), study), "unknown study: " + study);
  cfg_require(process == "ar1" || process == "gkos", "dgp.process must be ar1 or gkos");
  cfg_require(threads >= 1, "threads must be >= 1");
  const CohortRange* r[3] = {&split.train, &split.calibration, &split.test};
  const char* names[3] = {"train", "calibration", "test"};
  for (int i = 0; i < 3; ++i) cfg_require(r[i]->first <= r[i]->last, std::string("split.") + names[i] + " is not ordered");
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      cfg_require(r[i]->last < r[j]->first || r[j]->last < r[i]->first,
                  std::string("cohort ranges overlap: ") + names[i] + " and " + names[j]);
    }
  }
  cfg_require(!horizons.empty(), "metrics.horizons must be nonempty");
  for (int h : horizons) cfg_require(h >= 1, "horizons must be >= 1");
  cfg_require(population.conditioning_len >= 1, "conditioning_len must be >= 1");
  cfg_require(!roster.empty(), "forecasters.roster must be nonempty");
  for (const auto& f : roster) cfg_require(known(known_forecasters(), f), "unknown forecaster: " + f);
  for (const auto& f : lifetime_roster) {
    cfg_require(known(known_forecasters(), f), "unknown lifetime forecaster: " + f);
    cfg_require(known(roster, f), "lifetime forecaster not in roster: " + f);
  }
  cfg_require(known(roster, benchmark), "benchmark must be in the roster: " + benchmark);
  for (double a : alphas) cfg_require(alpha_supported(a), "unsupported alpha " + fmt6(a));
  cfg_require(!alphas.empty(), "conformal.alphas must be nonempty");
  for (const auto& m : modes) cfg_require(m == "pooled" || m == "stratified", "unknown conformal mode " + m);
  cfg_require(!modes.empty(), "conformal.modes must be nonempty");
  cfg_require(group_by.empty() || group_by == "cohort" || population.schema.categorical_index(group_by) >= 0,
              "conformal.group_by must be empty, cohort, or a categorical feature");
  cfg_require(lifetime_paths >= 1 && lifetime_individuals >= 0, "invalid lifetime settings");
  cfg_require(discount_rate > -1.0, "discount rate must exceed -1");
  cfg_require(lifetime_alpha > 0.0 && lifetime_alpha < 1.0, "lifetime alpha must lie in (0,1)");
  cfg_require(crps_paths >= 0 && dm_lag >= 0, "invalid metric settings");
  cfg_require(short_conditioning_len >= 1, "short conditioning length must be >= 1");
  cfg_require(replicates >= 1, "replicates must be >= 1");
  cfg_require(!(known(roster, "gkos") && !gkos_fit.estimate && process != "gkos"),
              "gkos with estimate = false needs a gkos DGP");
  cfg_require(gkos_fit.weighting == "identity" || gkos_fit.weighting == "diagonal-bootstrap",
              "gkos weighting must be identity or diagonal-bootstrap");
  cfg_require(gkos_fit.particles >= 1 && gkos_fit.simulated_individuals >= 1 && gkos_fit.max_evaluations >= 1,
              "invalid gkos fit settings");
  try {
    population.validate();
    if (process == "ar1") ar1.validate();
    else gkos.validate();
    if (uses("transformer")) {
      transformer.model.validate();
      transformer.tokenizer.validate();
      transformer.train.validate();
    }
    tax.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  if (uses("transformer")) {
    const auto& t = transformer.tokenizer;
    cfg_require(t.model_dim == transformer.model.model_dim, "tokenizer model_dim must equal transformer model_dim");
    cfg_require(population.window_first >= t.year_min && population.window_last <= t.year_max,
                "observation window outside tokenizer year range");
    cfg_require(population.entry_age >= t.age_min && population.exit_age <= t.age_max,
                "population ages outside tokenizer age range");
    cfg_require(transformer.model.max_context > population.conditioning_len + max_horizon() - 1,
                "max_context must cover conditioning_len + max horizon");
    cfg_require(transformer.quantile_paths >= 1, "quantile_paths must be >= 1");
  }
}

namespace detail {

class TomlReader {
 public:
  TomlReader(const toml::table& t, std::string path) : t_(t), path_(std::move(path)) {}

  template <class T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    const auto node = t_[key];
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = node.template value<bool>();
      require(v.has_value(), ErrorKind::Config, where(key) + " must be a boolean");
      dst = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
      auto v = node.template value<std::string>();
      require(v.has_value(), ErrorKind::Config, where(key) + " must be a string");
      dst = *v;
    } else if constexpr (std::is_floating_point_v<T>) {
      auto v = node.template value<double>();
      require(v.has_value(), ErrorKind::Config, where(key) + " must be a number");
      dst = *v;
    } else {
      auto v = node.template value<std::int64_t>();
      require(v.has_value(), ErrorKind::Config, where(key) + " must be an integer");
      if constexpr (std::is_unsigned_v<T>) require(*v >= 0, ErrorKind::Config, where(key) + " must be >= 0");
      dst = static_cast<T>(*v);
    }
  }

  template <class T>
  void get_list(const char* key, std::vector<T>& dst) {
    seen_.insert(key);
    const auto node = t_[key];
    if (!node) return;
    const auto* arr = node.as_array();
    require(arr != nullptr, ErrorKind::Config, where(key) + " must be an array");
    dst.clear();
    for (const auto& el : *arr) {
      if constexpr (std::is_same_v<T, std::string>) {
        auto v = el.template value<std::string>();
        require(v.has_value(), ErrorKind::Config, where(key) + " entries must be strings");
        dst.push_back(*v);
      } else if constexpr (std::is_floating_point_v<T>) {
        auto v = el.template value<double>();
        require(v.has_value(), ErrorKind::Config, where(key) + " entries must be numbers");
        dst.push_back(*v);
      } else {
        auto v = el.template value<std::int64_t>();
        require(v.has_value() && *v >= 0, ErrorKind::Config, where(key) + " entries must be non-negative integers");
        dst.push_back(static_cast<T>(*v));
      }
    }
  }

  void range(const char* key, CohortRange& r) {
    std::vector<int> v;
    get_list(key, v);
    if (!t_[key]) return;
    require(v.size() == 2, ErrorKind::Config, where(key) + " must be [first, last]");
    r = {v[0], v[1]};
  }

  const toml::table* sub(const char* key) {
    seen_.insert(key);
    const auto node = t_[key];
    if (!node) return nullptr;
    const auto* tbl = node.as_table();
    require(tbl != nullptr, ErrorKind::Config, where(key) + " must be a table");
    return tbl;
  }

  const toml::array* tables(const char* key) {
    seen_.insert(key);
    const auto node = t_[key];
    if (!node) return nullptr;
    const auto* arr = node.as_array();
    require(arr != nullptr, ErrorKind::Config, where(key) + " must be an array of tables");
    return arr;
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  /// Rejects keys that were never requested.
  void finish() const {
    for (const auto& [k, v] : t_) {
      const std::string key(k.str());
      require(seen_.count(key) != 0, ErrorKind::Config, "unknown config key " + child(key.c_str()));
    }
  }

 private:
  std::string where(const char* key) const { return "config key " + child(key); }
  const toml::table& t_;
  std::string path_;
  std::set<std::string> seen_;
};

template <std::size_t K>
void read_mixture(TomlReader& r, const char* prefix, std::array<MixtureComponent, K>& mix) {
  std::vector<double> means, vars, weights;
  const std::string p(prefix);
  r.get_list((p + "_means").c_str(), means);
  r.get_list((p + "_variances").c_str(), vars);
  r.get_list((p + "_weights").c_str(), weights);
  auto put = [&](const std::vector<double>& v, double MixtureComponent::*field, const std::string& name) {
    if (v.empty()) return;
    require(v.size() == K, ErrorKind::Config, p + "_" + name + " must have " + std::to_string(K) + " entries");
    for (std::size_t k = 0; k < K; ++k) mix[k].*field = v[k];
  };
  put(means, &MixtureComponent::mean, "means");
  put(vars, &MixtureComponent::variance, "variances");
  put(weights, &MixtureComponent::weight, "weights");
}

}  // namespace detail

/// Parses a TOML experiment description (every section optional; unknown
/// keys are rejected).
inline ExperimentConfig parse_config(const std::string& text) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "TOML parse error: " << e.description() << " at line " << e.source().begin.line;
    throw Error(ErrorKind::Config, os.str());
  }
  ExperimentConfig c;
  c.source_text = text;
  detail::TomlReader top(root, "");
  if (const auto* t = top.sub("experiment")) {
    detail::TomlReader r(*t, "experiment");
    r.get("name", c.name);
    r.get("seed", c.seed);
    r.get("threads", c.threads);
    r.get("study", c.study);
    r.get("out", c.out_dir);
    r.finish();
  }
  if (const auto* t = top.sub("dgp")) {
    detail::TomlReader r(*t, "dgp");
    r.get("process", c.process);
    if (const auto* a = r.sub("ar1")) {
      detail::TomlReader ra(*a, "dgp.ar1");
      ra.get("rho", c.ar1.rho);
      ra.get("innovation_variance", c.ar1.innovation_variance);
      ra.get("transitory_variance", c.ar1.transitory_variance);
      ra.get("fixed_effect_sd", c.ar1.fixed_effect_sd);
      ra.get("log_level", c.ar1.log_level);
      ra.finish();
    }
    if (const auto* g = r.sub("gkos")) {
      detail::TomlReader rg(*g, "dgp.gkos");
      rg.get("rho", c.gkos.rho);
      detail::read_mixture(rg, "perm", c.gkos.perm);
      detail::read_mixture(rg, "trans", c.gkos.trans);
      rg.get("fixed_effect_sd", c.gkos.fixed_effect_sd);
      rg.get("zero_prob", c.gkos.zero_prob);
      rg.get("log_level", c.gkos.log_level);
      rg.finish();
    }
    r.finish();
  }
  if (const auto* t = top.sub("population")) {
    detail::TomlReader r(*t, "population");
    auto& p = c.population;
    r.get("individuals_per_cohort", p.n_individuals);
    r.get("window_first", p.window_first);
    r.get("window_last", p.window_last);
    r.get("entry_age", p.entry_age);
    r.get("exit_age", p.exit_age);
    r.get("gap_prob", p.gap_prob);
    r.get("conditioning_len", p.conditioning_len);
    r.get("missing_rate", p.schema.missing_rate);
    if (const auto* arr = r.tables("continuous")) {
      for (const auto& el : *arr) {
        const auto* tb = el.as_table();
        require(tb != nullptr, ErrorKind::Config, "population.continuous entries must be tables");
        detail::TomlReader rc(*tb, "population.continuous");
        ContinuousFeatureSpec f;
        rc.get("name", f.name);
        rc.get("mean", f.mean);
        rc.get("sd", f.sd);
        rc.get("rho", f.rho);
        rc.finish();
        p.schema.continuous.push_back(f);
      }
    }
    if (const auto* arr = r.tables("categorical")) {
      for (const auto& el : *arr) {
        const auto* tb = el.as_table();
        require(tb != nullptr, ErrorKind::Config, "population.categorical entries must be tables");
        detail::TomlReader rc(*tb, "population.categorical");
        CategoricalFeatureSpec f;
        rc.get("name", f.name);
        rc.get("cardinality", f.cardinality);
        rc.get("stay_prob", f.stay_prob);
        rc.finish();
        p.schema.categorical.push_back(f);
      }
    }
    if (const auto* arr = r.tables("coupling")) {
      for (const auto& el : *arr) {
        const auto* tb = el.as_table();
        require(tb != nullptr, ErrorKind::Config, "population.coupling entries must be tables");
        detail::TomlReader rc(*tb, "population.coupling");
        CouplingRule rule;
        rc.get("feature", rule.feature);
        rc.get("from", rule.from);
        rc.get("to", rule.to);
        rc.get("drift", rule.drift);
        rc.get("duration", rule.duration);
        rc.finish();
        p.coupling.push_back(rule);
      }
    }
    r.finish();
  }
  if (const auto* t = top.sub("split")) {
    detail::TomlReader r(*t, "split");
    r.range("train", c.split.train);
    r.range("calibration", c.split.calibration);
    r.range("test", c.split.test);
    r.finish();
  }
  if (const auto* t = top.sub("forecasters")) {
    detail::TomlReader r(*t, "forecasters");
    r.get_list("roster", c.roster);
    r.get("benchmark", c.benchmark);
    if (const auto* g = r.sub("gkos")) {
      detail::TomlReader rg(*g, "forecasters.gkos");
      rg.get("estimate", c.gkos_fit.estimate);
      rg.get("particles", c.gkos_fit.particles);
      rg.get("simulated_individuals", c.gkos_fit.simulated_individuals);
      rg.get("max_evaluations", c.gkos_fit.max_evaluations);
      rg.get("weighting", c.gkos_fit.weighting);
      rg.finish();
    }
    if (const auto* l = r.sub("linear")) {
      detail::TomlReader rl(*l, "forecasters.linear");
      rl.get("iterations", c.linear.iterations);
      rl.get("step", c.linear.step);
      rl.finish();
    }
    if (const auto* tr = r.sub("transformer")) {
      detail::TomlReader rt(*tr, "forecasters.transformer");
      auto& m = c.transformer.model;
      auto& tk = c.transformer.tokenizer;
      auto& o = c.transformer.train;
      rt.get("layers", m.layers);
      rt.get("heads", m.heads);
      rt.get("model_dim", m.model_dim);
      rt.get("ff_dim", m.ff_dim);
      rt.get("max_context", m.max_context);
      rt.get("dropout", m.dropout);
      rt.get("stochastic_depth", m.stochastic_depth);
      rt.get("continuous_dim", tk.continuous_dim);
      rt.get_list("categorical_dims", tk.categorical_dims);
      rt.get("missing_dim", tk.missing_dim);
      rt.get("age_dim", tk.age_dim);
      rt.get("year_dim", tk.year_dim);
      rt.get("year_min", tk.year_min);
      rt.get("year_max", tk.year_max);
      rt.get("max_steps", o.max_steps);
      rt.get("batch_size", o.batch_size);
      rt.get("learning_rate", o.learning_rate);
      rt.get("min_lr_ratio", o.min_lr_ratio);
      rt.get("warmup_steps", o.warmup_steps);
      rt.get("weight_decay", o.weight_decay);
      rt.get("grad_clip", o.grad_clip);
      rt.get("eval_every", o.eval_every);
      rt.get("patience", o.patience);
      rt.get("validation_fraction", o.validation_fraction);
      rt.get("quantile_paths", c.transformer.quantile_paths);
      rt.finish();
      tk.model_dim = m.model_dim;
    }
    r.finish();
  }
  if (const auto* t = top.sub("conformal")) {
    detail::TomlReader r(*t, "conformal");
    r.get_list("alphas", c.alphas);
    r.get_list("modes", c.modes);
    r.get("group_by", c.group_by);
    r.finish();
  }
  if (const auto* t = top.sub("lifetime")) {
    detail::TomlReader r(*t, "lifetime");
    r.get_list("roster", c.lifetime_roster);
    r.get("paths", c.lifetime_paths);
    r.get("individuals", c.lifetime_individuals);
    r.get("discount_rate", c.discount_rate);
    r.get("alpha", c.lifetime_alpha);
    r.finish();
  }
  if (const auto* t = top.sub("tax")) {
    detail::TomlReader r(*t, "tax");
    r.get("basic_allowance", c.tax.basic_allowance);
    r.get("municipal_rate", c.tax.municipal_rate);
    r.get("state_rate", c.tax.state_rate);
    r.get("state_breakpoint", c.tax.state_breakpoint);
    r.get("ss_rate", c.tax.ss_rate);
    r.get("ss_ceiling_base_amounts", c.tax.ss_ceiling_base_amounts);
    r.get("income_base_amount", c.tax.income_base_amount);
    r.get("pension_deduction_rate", c.tax.pension_deduction_rate);
    r.finish();
  }
  if (const auto* t = top.sub("metrics")) {
    detail::TomlReader r(*t, "metrics");
    r.get_list("horizons", c.horizons);
    r.get("crps_paths", c.crps_paths);
    r.get("dm_lag", c.dm_lag);
    r.finish();
  }
  if (const auto* t = top.sub("studies")) {
    detail::TomlReader r(*t, "studies");
    r.get("short_conditioning_len", c.short_conditioning_len);
    r.get_list("loco_sizes", c.loco_sizes);
    r.get_list("bootstrap_sizes", c.bootstrap_sizes);
    r.get("replicates", c.replicates);
    r.finish();
  }
  top.finish();
  c.transformer.model.seed = c.seed;
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Config, "cannot read config file " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str());
}

// ---------------------------------------------------------------------------
// Split-tagged data handles
// ---------------------------------------------------------------------------

struct TrainTag {};
struct CalibrationTag {};
struct TestTag {};

/// A panel tagged with the split it came from. Handles of different splits
/// are distinct types with no conversions between them.
template <class Tag>
class SplitPanel {
 public:
  explicit SplitPanel(Panel p) : panel_(std::move(p)) {}
  const Panel& panel() const { return panel_; }
  std::size_t size() const { return panel_.size(); }

 private:
  Panel panel_;
};

using TrainSet = SplitPanel<TrainTag>;
using CalibrationSet = SplitPanel<CalibrationTag>;
using TestSet = SplitPanel<TestTag>;

struct SplitPanels {
  TrainSet train;
  CalibrationSet calibration;
  TestSet test;
};

inline SplitPanels split_by_cohort(const Panel& panel, const SplitSpec& s) {
  Panel tr, ca, te;
  for (const auto& h : panel) {
    if (s.train.contains(h.birth_year)) tr.push_back(h);
    else if (s.calibration.contains(h.birth_year)) ca.push_back(h);
    else if (s.test.contains(h.birth_year)) te.push_back(h);
  }
  return {TrainSet(std::move(tr)), CalibrationSet(std::move(ca)), TestSet(std::move(te))};
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

/// Forecasts for one individual from the end of its conditioning window.
struct Prediction {
  std::int64_t id = 0;
  int birth_year = 0;
  int origin_year = 0;
  std::string group;
  ForecastResult result;
  std::vector<double> target;          // log earnings per horizon 1..H
  std::vector<std::uint8_t> observed;  // 1 when the target year is in the panel
};

inline std::string group_label(const IndividualHistory& h, std::size_t context_len, const std::string& group_by,
                               const FeatureSchema& schema) {
  if (group_by.empty()) return "";
  if (group_by == "cohort") return std::to_string(h.birth_year);
  const int k = schema.categorical_index(group_by);
  const auto& r = h.records[context_len - 1];
  const bool missing = r.missing[schema.continuous.size() + static_cast<std::size_t>(k)] != 0;
  return group_by + "=" + (missing ? std::string("unknown") : std::to_string(r.categoricals[static_cast<std::size_t>(k)]));
}

/// Forecasts every individual with at least context_len records. When
/// `windows` is given, individual i is conditioned on windows[i]'s history
/// (placebo permutation) while targets stay its own.
inline std::vector<Prediction> predict_panel(const Forecaster& f, const Panel& panel, std::size_t context_len,
                                             int horizon, int n_paths, std::uint64_t seed, int threads,
                                             const std::string& group_by, const FeatureSchema& schema,
                                             const std::vector<std::size_t>* windows = nullptr) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < panel.size(); ++i) {
    if (panel[i].records.size() >= context_len) eligible.push_back(i);
  }
  std::vector<Prediction> out(eligible.size());
  parallel_for(eligible.size(), threads, [&](std::size_t k) {
    const auto& h = panel[eligible[k]];
    const auto& src = windows != nullptr ? panel[eligible[(*windows)[k]]] : h;
    Prediction p;
    p.id = h.id;
    p.birth_year = h.birth_year;
    p.origin_year = h.records[context_len - 1].year;
    p.group = group_label(h, context_len, group_by, schema);
    p.result = f.predict(src, {context_len, horizon, n_paths, seed});
    p.target.assign(static_cast<std::size_t>(horizon), 0.0);
    p.observed.assign(static_cast<std::size_t>(horizon), 0);
    for (std::size_t j = context_len; j < h.records.size(); ++j) {
      const int dh = h.records[j].year - p.origin_year;
      if (dh >= 1 && dh <= horizon) {
        p.target[static_cast<std::size_t>(dh - 1)] = log_earnings(h.records[j].earnings);
        p.observed[static_cast<std::size_t>(dh - 1)] = 1;
      }
    }
    out[k] = std::move(p);
  });
  return out;
}

inline std::vector<Prediction> predict_calibration(const Forecaster& f, const CalibrationSet& cal,
                                                   std::size_t context_len, int horizon, std::uint64_t seed,
                                                   int threads, const std::string& group_by,
                                                   const FeatureSchema& schema) {
  return predict_panel(f, cal.panel(), context_len, horizon, 0, seed, threads, group_by, schema);
}

inline std::vector<Prediction> predict_test(const Forecaster& f, const TestSet& test, std::size_t context_len,
                                            int horizon, int n_paths, std::uint64_t seed, int threads,
                                            const std::string& group_by, const FeatureSchema& schema,
                                            const std::vector<std::size_t>* windows = nullptr) {
  return predict_panel(f, test.panel(), context_len, horizon, n_paths, seed, threads, group_by, schema, windows);
}

/// Scores of calibration-set forecasts (one per individual and horizon).
inline ScoreSet calibration_scores(const std::vector<Prediction>& preds, double alpha) {
  ScoreSet s;
  for (const auto& p : preds) {
    for (std::size_t k = 0; k < p.target.size(); ++k) {
      if (p.observed[k] == 0) continue;
      s.add(p.id, static_cast<int>(k) + 1, nonconformity_score(p.result.quantiles[k], p.target[k], alpha));
    }
  }
  return s;
}

/// Calibration tables fitted from calibration-cohort rows only.
inline CalibrationTable calibrate(const Forecaster& f, const CalibrationSet& cal, std::size_t context_len, int horizon,
                                  double alpha, CalibrationMode mode, std::uint64_t seed, int threads = 1) {
  const auto preds = predict_calibration(f, cal, context_len, horizon, seed, threads, "", {});
  return build_calibration(calibration_scores(preds, alpha), alpha, mode);
}

inline std::vector<CalibrationItem> calibration_items(const std::vector<Prediction>& preds, int h, double alpha) {
  std::vector<CalibrationItem> items;
  const auto k = static_cast<std::size_t>(h - 1);
  for (const auto& p : preds) {
    if (k >= p.target.size() || p.observed[k] == 0) continue;
    const auto pair = interval_pair(p.result.quantiles[k], alpha);
    items.push_back({p.birth_year, p.group, pair.lo, pair.hi, p.target[k]});
  }
  return items;
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_csv() const {
    std::string s;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i > 0) s += ',';
        s += cells[i];
      }
      s += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return s;
  }
};

inline std::string na_or(double v) { return std::isfinite(v) ? fmt6(v) : "NA"; }

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct Seeds {
  std::uint64_t simulate = 0, features = 0, fit = 0, forecast = 0, lifetime = 0, study = 0;

  static Seeds from(std::uint64_t master) {
    Seeds s;
    s.simulate = mix64(master ^ 0x01);
    s.features = mix64(master ^ 0x02);
    s.fit = mix64(master ^ 0x03);
    s.forecast = mix64(master ^ 0x04);
    s.lifetime = mix64(master ^ 0x05);
    s.study = mix64(master ^ 0x06);
    return s;
  }
};

struct FittedForecasters {
  std::vector<std::string> names;
  std::map<std::string, std::shared_ptr<const Forecaster>> by_name;
  nlohmann::json diagnostics = nlohmann::json::object();
  std::map<std::string, std::string> files;  // relative path -> contents
};

struct ForecasterScores {
  // Per horizon (index h-1): mean metrics over test individuals with targets.
  std::vector<double> mae, rmse, crps_ensemble, crps_quantile, pinball, picp, pinaw;
  std::vector<std::size_t> n;
};

struct CoverageRow {
  std::string forecaster;
  std::string mode;
  double alpha = 0.1;
  int h = 0;  // 0: all horizons
  CoverageReport report;
};

struct LifetimeRow {
  std::string forecaster;
  std::size_t individuals = 0;
  int paths = 0;
  double mean_pdv = 0, median_pdv = 0, gini_pdv = 0, top1 = 0, top10 = 0, lower = 0, upper = 0, rel_width = 0;
  TaxStatistics tax;
};

struct DmRow {
  std::string forecaster;
  std::string benchmark;
  int h = 0;
  DmResult dm;
  bool computed = false;
};

struct PlaceboRow {
  std::string study;
  std::string forecaster;
  int h = 0;
  std::size_t conditioning_len = 0;
  double reference = 0.0;
  double value = 0.0;
  double ratio = 0.0;
  double ratio_se = 0.0;
};

struct SensitivityEntry {
  std::string forecaster;
  int h = 0;
  SensitivityRow row;
};

struct RunResult {
  std::string panel_hash;
  std::vector<std::string> roster;
  std::map<std::string, ForecasterScores> scores;
  std::map<std::string, std::vector<Prediction>> test_predictions;
  std::vector<CoverageRow> coverage;
  std::map<std::string, CalibrationTable> tables;  // "<forecaster>_a<alpha>_<mode>"
  std::vector<DmRow> dm;
  std::vector<LifetimeRow> lifetime;
  std::vector<PlaceboRow> placebo;
  std::vector<SensitivityEntry> sensitivity;
  std::vector<std::string> group_labels;
  nlohmann::json diagnostics = nlohmann::json::object();
  std::map<std::string, std::string> files;  // relative path -> contents
};

namespace detail {

template <class Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Stage || e.kind() == ErrorKind::Config) throw;
    throw Error(ErrorKind::Stage, "stage " + name + " failed (" + to_string(e.kind()) + "): " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Stage, "stage " + name + " failed: " + e.what());
  }
}

inline Panel simulate_population(const ExperimentConfig& c, const Seeds& seeds) {
  PopulationSpec pop = c.population;
  pop.birth_first = std::min({c.split.train.first, c.split.calibration.first, c.split.test.first});
  pop.birth_last = std::max({c.split.train.last, c.split.calibration.last, c.split.test.last});
  pop.n_individuals = c.population.n_individuals * (pop.birth_last - pop.birth_first + 1);
  Panel panel = c.process == "ar1" ? simulate_ar1_panel(c.ar1, pop, seeds.simulate, c.threads)
                                   : simulate_gkos_panel(c.gkos, pop, seeds.simulate, c.threads);
  panel = attach_features(std::move(panel), pop, seeds.features, c.threads);
  Panel kept;
  for (auto& h : panel) {
    if (!h.records.empty()) kept.push_back(std::move(h));
  }
  return kept;
}

inline std::vector<int> cardinalities(const FeatureSchema& s) {
  std::vector<int> v;
  for (const auto& c : s.categorical) v.push_back(c.cardinality);
  return v;
}

inline nlohmann::json linear_json(const LinearQuantileModel& m) {
  nlohmann::json q = nlohmann::json::array();
  for (const auto& c : m.coef) q.push_back(c);
  return {{"mean", m.mean}, {"sd", m.sd}, {"point", m.point}, {"quantiles", q}};
}

inline FittedForecasters fit_forecasters(const ExperimentConfig& c, const TrainSet& train, const Seeds& seeds) {
  FittedForecasters out;
  const auto& panel = train.panel();
  const std::size_t ctx = c.conditioning_len();
  const int hmax = c.max_horizon();
  for (const auto& name : c.roster) {
    stage("fit:" + name, [&] {
      std::shared_ptr<const Forecaster> f;
      if (name == "ar1") {
        const auto p = estimate_ar1(panel);
        f = std::make_shared<Ar1Forecaster>(p);
        out.files["models/ar1.json"] = to_json(p).dump(2) + "\n";
      } else if (name == "gkos") {
        GkosParams p = c.gkos;
        nlohmann::json diag = {{"estimated", c.gkos_fit.estimate}};
        if (c.gkos_fit.estimate) {
          GmmConfig g;
          g.max_evaluations = c.gkos_fit.max_evaluations;
          g.simulated_individuals = c.gkos_fit.simulated_individuals;
          g.threads = c.threads;
          g.weighting = c.gkos_fit.weighting == "identity" ? GmmWeighting::Identity : GmmWeighting::DiagonalBootstrap;
          auto [est, d] = estimate_gkos(panel, g, seeds.fit);
          p = est;
          diag["objective"] = d.objective;
          diag["evaluations"] = d.evaluations;
          diag["converged"] = d.converged;
          diag["penalized_evaluations"] = d.penalized_evaluations;
        }
        ParticleOptions po;
        po.n_particles = c.gkos_fit.particles;
        f = std::make_shared<GkosForecaster>(p, po);
        out.diagnostics["gkos"] = diag;
        out.files["models/gkos.json"] = nlohmann::json{{"params", to_json(p)}, {"diagnostics", diag}}.dump(2) + "\n";
      } else if (name == "linear") {
        auto lf = LinearQuantileForecaster::fit(panel, hmax, ctx, c.linear, c.threads);
        nlohmann::json models = nlohmann::json::array();
        for (int h = 1; h <= hmax; ++h) models.push_back(linear_json(fit_quantile_linear(panel, h, ctx, c.linear)));
        f = std::make_shared<LinearQuantileForecaster>(std::move(lf));
        out.files["models/linear.json"] = nlohmann::json{{"horizons", models}}.dump(2) + "\n";
      } else if (name == "marginal") {
        auto mf = MarginalForecaster::fit(panel, hmax, ctx);
        nlohmann::json q = nlohmann::json::array();
        for (int h = 1; h <= hmax; ++h) {
          IndividualHistory probe;
          probe.records.resize(ctx);
          q.push_back(mf.predict(probe, {ctx, h, 0, 0}).quantiles.back().q);
        }
        f = std::make_shared<MarginalForecaster>(std::move(mf));
        out.files["models/marginal.json"] = nlohmann::json{{"quantiles", q}}.dump(2) + "\n";
      } else if (name == "transformer") {
        const auto& schema = c.population.schema;
        auto stats = fit_stats(panel);
        auto tok = make_tokenizer(c.transformer.tokenizer, std::move(stats), schema.continuous.size(),
                                  cardinalities(schema), seeds.fit);
        ToyTransformerConfig mc = c.transformer.model;
        mc.seed = seeds.fit;
        auto [params, rep] = train_toy(panel, std::move(tok), mc, c.transformer.train, seeds.fit);
        auto imp = std::make_shared<FeatureImputer>(
            FeatureImputer::fit(panel, cardinalities(schema), schema.continuous.size()));
        auto shared = std::make_shared<ModelParams>(std::move(params));
        std::ostringstream bin(std::ios::binary);
        write_model_binary(bin, *shared);
        out.files["models/transformer.saga"] = bin.str();
        out.files["models/transformer.json"] = model_manifest(*shared).dump(2) + "\n";
        out.diagnostics["transformer"] = {{"steps", rep.steps},
                                          {"best_step", rep.best_step},
                                          {"best_validation", rep.best_validation},
                                          {"early_stopped", rep.early_stopped},
                                          {"final_train_loss", rep.step_loss.empty() ? 0.0 : rep.step_loss.back()},
                                          {"train_sequences", rep.train_sequences},
                                          {"validation_sequences", rep.validation_sequences}};
        f = std::make_shared<TransformerForecaster>(shared, imp, c.transformer.quantile_paths);
      }
      out.names.push_back(name);
      out.by_name[name] = f;
      return 0;
    });
  }
  return out;
}

inline ForecasterScores score_predictions(const std::vector<Prediction>& preds, int hmax,
                                          const std::map<std::string, CalibrationTable>& tables,
                                          const std::string& table_key) {
  ForecasterScores s;
  const auto* table = tables.count(table_key) != 0 ? &tables.at(table_key) : nullptr;
  for (int h = 1; h <= hmax; ++h) {
    const auto k = static_cast<std::size_t>(h - 1);
    std::vector<double> point, truth;
    double crps_e = 0.0, crps_q = 0.0, pin = 0.0;
    bool have_paths = true;
    std::vector<std::pair<double, double>> iv;
    for (const auto& p : preds) {
      if (p.observed[k] == 0) continue;
      const auto& qf = p.result.quantiles[k];
      point.push_back(qf.point);
      truth.push_back(p.target[k]);
      crps_q += crps_quantile(qf, p.target[k]);
      pin += pinball_sum(qf.q, p.target[k]) / static_cast<double>(kNumLevels);
      if (p.result.paths.empty()) {
        have_paths = false;
      } else {
        std::vector<double> draws;
        for (const auto& path : p.result.paths) draws.push_back(log_earnings(path[k]));
        crps_e += crps_ensemble(std::move(draws), p.target[k]);
      }
      if (table != nullptr) iv.push_back(predict_interval(qf, *table, h));
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto n = static_cast<double>(truth.size());
    s.n.push_back(truth.size());
    if (truth.empty()) {
      for (auto* v : {&s.mae, &s.rmse, &s.crps_ensemble, &s.crps_quantile, &s.pinball, &s.picp, &s.pinaw}) v->push_back(nan);
      continue;
    }
    s.mae.push_back(mae(point, truth));
    s.rmse.push_back(rmse(point, truth));
    s.crps_ensemble.push_back(have_paths ? crps_e / n : nan);
    s.crps_quantile.push_back(crps_q / n);
    s.pinball.push_back(pin / n);
    if (table != nullptr) {
      s.picp.push_back(picp(iv, truth));
      const auto [lo, hi] = std::minmax_element(truth.begin(), truth.end());
      s.pinaw.push_back(*hi > *lo ? pinaw(iv, truth) : nan);
    } else {
      s.picp.push_back(nan);
      s.pinaw.push_back(nan);
    }
  }
  return s;
}

// Per-individual CRPS at horizon h: ensemble form when paths exist.
inline std::vector<double> crps_by_individual(const std::vector<Prediction>& preds, int h,
                                              std::vector<int>* years = nullptr) {
  const auto k = static_cast<std::size_t>(h - 1);
  std::vector<double> out;
  for (const auto& p : preds) {
    if (p.observed[k] == 0) continue;
    if (years != nullptr) years->push_back(p.origin_year + h);
    if (p.result.paths.empty()) {
      out.push_back(crps_quantile(p.result.quantiles[k], p.target[k]));
    } else {
      std::vector<double> draws;
      for (const auto& path : p.result.paths) draws.push_back(log_earnings(path[k]));
      out.push_back(crps_ensemble(std::move(draws), p.target[k]));
    }
  }
  return out;
}

inline std::string table_key(const std::string& f, double alpha, const std::string& mode) {
  return f + "_a" + fmt6(alpha) + "_" + mode;
}

// Ratio of means with a delta-method standard error for paired samples.
inline std::pair<double, double> ratio_with_se(const std::vector<double>& num, const std::vector<double>& den) {
  const auto n = static_cast<double>(num.size());
  double mn = 0.0, md = 0.0;
  for (std::size_t i = 0; i < num.size(); ++i) {
    mn += num[i];
    md += den[i];
  }
  mn /= n;
  md /= n;
  const double r = mn / md;
  double ss = 0.0;
  for (std::size_t i = 0; i < num.size(); ++i) {
    const double e = num[i] - r * den[i];
    ss += e * e;
  }
  const double se = n > 1 ? std::sqrt(ss / (n - 1.0) / n) / std::abs(md) : 0.0;
  return {r, se};
}

struct CoreOutput {
  FittedForecasters fitted;
  std::map<std::string, std::vector<Prediction>> calibration;
  std::map<std::string, std::vector<Prediction>> test;
};

inline CoreOutput run_core(const ExperimentConfig& c, const SplitPanels& sp, const Seeds& seeds) {
  CoreOutput core;
  core.fitted = fit_forecasters(c, sp.train, seeds);
  const auto ctx = c.conditioning_len();
  const int hmax = c.max_horizon();
  for (const auto& name : core.fitted.names) {
    const auto& f = *core.fitted.by_name.at(name);
    core.calibration[name] = stage("calibrate:" + name, [&] {
      return predict_calibration(f, sp.calibration, ctx, hmax, seeds.forecast, c.threads, c.group_by,
                                 c.population.schema);
    });
    core.test[name] = stage("forecast:" + name, [&] {
      return predict_test(f, sp.test, ctx, hmax, c.crps_paths, seeds.forecast, c.threads, c.group_by,
                          c.population.schema);
    });
  }
  return core;
}

}  // namespace detail

/// Runs the configured study. Output files are returned in RunResult::files
/// (relative paths); write_outputs puts them on disk.
inline RunResult run_pipeline(const ExperimentConfig& c) {
  c.validate();
  const Seeds seeds = Seeds::from(c.seed);
  RunResult res;
  const Panel panel = detail::stage("simulate", [&] { return detail::simulate_population(c, seeds); });
  res.panel_hash = hex64(fnv1a64(panel_to_csv(panel)));
  const SplitPanels sp = detail::stage("split", [&] { return split_by_cohort(panel, c.split); });
  detail::stage("split", [&] {
    require(sp.train.size() > 0 && sp.calibration.size() > 0 && sp.test.size() > 0, ErrorKind::Parameter,
            "every split needs at least one individual");
    return 0;
  });

  auto core = detail::run_core(c, sp, seeds);
  res.roster = core.fitted.names;
  res.files = core.fitted.files;
  res.diagnostics = core.fitted.diagnostics;
  const auto ctx = c.conditioning_len();
  const int hmax = c.max_horizon();

  // Calibration tables and coverage.
  std::set<std::string> labels;
  for (const auto& name : res.roster) {
    for (double alpha : c.alphas) {
      const ScoreSet scores = calibration_scores(core.calibration[name], alpha);
      for (const auto& mode_s : c.modes) {
        const auto mode = calibration_mode_from_string(mode_s);
        const auto key = detail::table_key(name, alpha, mode_s);
        const auto table = detail::stage("calibrate:" + name, [&] { return build_calibration(scores, alpha, mode); });
        res.tables[key] = table;
        res.files["calibration/" + key + ".json"] = to_json(table).dump(2) + "\n";
        std::vector<std::pair<double, double>> all_iv;
        std::vector<double> all_y;
        std::vector<std::string> all_g;
        for (int h = 1; h <= hmax; ++h) {
          std::vector<std::pair<double, double>> iv;
          std::vector<double> y;
          std::vector<std::string> g;
          const auto k = static_cast<std::size_t>(h - 1);
          for (const auto& p : core.test[name]) {
            if (p.observed[k] == 0) continue;
            iv.push_back(predict_interval(p.result.quantiles[k], table, h));
            y.push_back(p.target[k]);
            if (!c.group_by.empty()) g.push_back(p.group);
          }
          const auto rep = empirical_coverage(iv, y, g, 1.0 - alpha);
          for (const auto& gc : rep.groups) labels.insert(gc.group);
          if (std::find(c.horizons.begin(), c.horizons.end(), h) != c.horizons.end()) {
            res.coverage.push_back({name, mode_s, alpha, h, rep});
          }
          all_iv.insert(all_iv.end(), iv.begin(), iv.end());
          all_y.insert(all_y.end(), y.begin(), y.end());
          all_g.insert(all_g.end(), g.begin(), g.end());
        }
        res.coverage.push_back({name, mode_s, alpha, 0, empirical_coverage(all_iv, all_y, all_g, 1.0 - alpha)});
      }
    }
  }
  res.group_labels.assign(labels.begin(), labels.end());

  // Accuracy.
  const std::string primary_mode =
      std::find(c.modes.begin(), c.modes.end(), "stratified") != c.modes.end() ? "stratified" : c.modes.front();
  for (const auto& name : res.roster) {
    res.scores[name] = detail::score_predictions(core.test[name], hmax, res.tables,
                                                 detail::table_key(name, c.alphas.front(), primary_mode));
  }

  // Diebold–Mariano against the benchmark, per horizon.
  for (const auto& name : res.roster) {
    if (name == c.benchmark) continue;
    for (int h : c.horizons) {
      DmRow row{name, c.benchmark, h, {}, false};
      std::vector<int> years;
      const auto la = detail::crps_by_individual(core.test[name], h, &years);
      const auto lb = detail::crps_by_individual(core.test[c.benchmark], h);
      const auto series = loss_series(years, la, lb);
      if (series.d.size() >= static_cast<std::size_t>(c.dm_lag) + 2) {
        row.dm = dm_test(series, c.dm_lag);
        row.computed = true;
      } else {
        row.dm.periods = series.d.size();
      }
      res.dm.push_back(row);
    }
  }

  // Lifetime aggregation and taxes.
  for (const auto& name : c.lifetime_roster) {
    detail::stage("lifetime:" + name, [&] {
      Panel eligible;
      for (const auto& h : sp.test.panel()) {
        if (h.records.size() >= ctx) eligible.push_back(h);
        if (c.lifetime_individuals > 0 && static_cast<int>(eligible.size()) >= c.lifetime_individuals) break;
      }
      require(!eligible.empty(), ErrorKind::Parameter, "no test individual has a full conditioning window");
      const auto samples = mc_lifetime_batch(*core.fitted.by_name.at(name), eligible, ctx, c.lifetime_paths,
                                             c.discount_rate, seeds.lifetime, c.threads, true);
      LifetimeRow row;
      row.forecaster = name;
      row.individuals = samples.size();
      row.paths = c.lifetime_paths;
      std::vector<double> means;
      std::vector<std::vector<double>> paths;
      double lo = 0.0, hi = 0.0, rel = 0.0;
      for (const auto& s : samples) {
        double m = 0.0;
        for (double v : s.draws) m += v;
        m /= static_cast<double>(s.draws.size());
        means.push_back(m);
        const auto iv = lifetime_interval(s, c.lifetime_alpha);
        lo += iv.first;
        hi += iv.second;
        rel += m > 0.0 ? (iv.second - iv.first) / m : 0.0;
        paths.insert(paths.end(), s.paths.begin(), s.paths.end());
      }
      const auto n = static_cast<double>(samples.size());
      auto sorted = means;
      std::sort(sorted.begin(), sorted.end());
      row.mean_pdv = std::accumulate(means.begin(), means.end(), 0.0) / n;
      row.median_pdv = sorted_quantile(sorted, 0.5);
      row.gini_pdv = gini(means);
      row.top1 = top_share(means, 0.01);
      row.top10 = top_share(means, 0.10);
      row.lower = lo / n;
      row.upper = hi / n;
      row.rel_width = rel / n;
      row.tax = lifetime_tax_statistics(paths, c.tax, c.discount_rate);
      res.lifetime.push_back(row);
      return 0;
    });
  }

  // Studies.
  if (c.study == "placebo-perm") {
    detail::stage("study:placebo-perm", [&] {
      const auto& test = sp.test.panel();
      std::size_t n_eligible = 0;
      for (const auto& h : test) n_eligible += h.records.size() >= ctx ? 1 : 0;
      std::vector<std::size_t> perm(n_eligible);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(seeds.study, {stream::kShuffle});
      for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      for (const auto& name : res.roster) {
        const auto shuffled = predict_test(*core.fitted.by_name.at(name), sp.test, ctx, hmax, c.crps_paths,
                                           seeds.forecast, c.threads, c.group_by, c.population.schema, &perm);
        for (int h : c.horizons) {
          const auto base = detail::crps_by_individual(core.test[name], h);
          const auto plac = detail::crps_by_individual(shuffled, h);
          if (base.empty()) continue;
          const auto [r, se] = detail::ratio_with_se(plac, base);
          double mb = std::accumulate(base.begin(), base.end(), 0.0) / static_cast<double>(base.size());
          double mp = std::accumulate(plac.begin(), plac.end(), 0.0) / static_cast<double>(plac.size());
          res.placebo.push_back({"placebo-perm", name, h, ctx, mb, mp, r, se});
        }
      }
      return 0;
    });
  } else if (c.study == "placebo-short") {
    detail::stage("study:placebo-short", [&] {
      ExperimentConfig shortc = c;
      shortc.population.conditioning_len = c.short_conditioning_len;
      Panel tr = sp.train.panel(), ca = sp.calibration.panel(), te = sp.test.panel();
      for (auto* p : {&tr, &ca, &te}) {
        for (auto& h : *p) h.conditioning_len = c.short_conditioning_len;
      }
      const SplitPanels sps{TrainSet(std::move(tr)), CalibrationSet(std::move(ca)), TestSet(std::move(te))};
      const auto short_core = detail::run_core(shortc, sps, seeds);
      const detail::CoreOutput* settings[] = {&core, &short_core};
      for (const auto* setting : settings) {
        const std::size_t tc = setting == &core ? ctx : static_cast<std::size_t>(c.short_conditioning_len);
        for (const auto& name : res.roster) {
          for (int h : c.horizons) {
            const auto v = detail::crps_by_individual(setting->test.at(name), h);
            const auto b = detail::crps_by_individual(setting->test.at(c.benchmark), h);
            if (v.empty()) continue;
            const auto [r, se] = detail::ratio_with_se(v, b);
            const double mv = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
            res.placebo.push_back({"placebo-short", name, h, tc, mb, mv, r, se});
          }
        }
      }
      return 0;
    });
  } else if (c.study == "loco" || c.study == "bootstrap") {
    detail::stage("study:" + c.study, [&] {
      const double alpha = c.alphas.front();
      for (const auto& name : res.roster) {
        for (int h : c.horizons) {
          const auto cal_items = calibration_items(core.calibration[name], h, alpha);
          if (cal_items.empty()) continue;
          std::vector<SensitivityRow> rows;
          if (c.study == "loco") {
            rows = loco_cv_study(cal_items, alpha, c.loco_sizes, c.replicates, seeds.study, c.threads);
          } else {
            const auto test_items = calibration_items(core.test[name], h, alpha);
            if (test_items.empty()) continue;
            std::vector<double> scores;
            for (const auto& it : cal_items) scores.push_back(it.score());
            rows = bootstrap_study(scores, test_items, alpha, c.bootstrap_sizes, c.replicates, seeds.study, c.threads);
          }
          for (auto& r : rows) res.sensitivity.push_back({name, h, r});
        }
      }
      return 0;
    });
  }
  res.test_predictions = std::move(core.test);
  return res;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::map<std::string, Table> build_tables(const ExperimentConfig& c, const RunResult& r) {
  std::map<std::string, Table> t;
  {
    Table a;
    a.header = {"metric", "h"};
    for (const auto& f : r.roster) a.header.push_back(f);
    const std::vector<std::pair<std::string, std::vector<double> ForecasterScores::*>> metrics{
        {"mae", &ForecasterScores::mae},         {"rmse", &ForecasterScores::rmse},
        {"crps_ensemble", &ForecasterScores::crps_ensemble}, {"crps_quantile", &ForecasterScores::crps_quantile},
        {"pinball", &ForecasterScores::pinball}, {"picp", &ForecasterScores::picp},
        {"pinaw", &ForecasterScores::pinaw}};
    for (const auto& [mname, field] : metrics) {
      for (int h : c.horizons) {
        std::vector<std::string> row{mname, std::to_string(h)};
        for (const auto& f : r.roster) row.push_back(na_or((r.scores.at(f).*field)[static_cast<std::size_t>(h - 1)]));
        a.rows.push_back(row);
      }
    }
    for (int h : c.horizons) {
      std::vector<std::string> row{"n", std::to_string(h)};
      for (const auto& f : r.roster) row.push_back(std::to_string(r.scores.at(f).n[static_cast<std::size_t>(h - 1)]));
      a.rows.push_back(row);
    }
    t["accuracy.csv"] = a;
  }
  {
    Table cv;
    cv.header = {"forecaster", "mode", "alpha", "nominal", "h", "n", "marginal"};
    for (const auto& g : r.group_labels) cv.header.push_back(g);
    for (const auto& row : r.coverage) {
      std::vector<std::string> cells{row.forecaster, row.mode, fmt6(row.alpha), fmt6(1.0 - row.alpha),
                                     row.h == 0 ? "all" : std::to_string(row.h), std::to_string(row.report.n),
                                     na_or(row.report.n > 0 ? row.report.marginal() : std::nan(""))};
      for (const auto& g : r.group_labels) {
        auto it = std::find_if(row.report.groups.begin(), row.report.groups.end(),
                               [&](const GroupCoverage& gc) { return gc.group == g; });
        cells.push_back(it == row.report.groups.end() ? "NA" : fmt6(it->coverage()));
      }
      cv.rows.push_back(cells);
    }
    t["coverage.csv"] = cv;
  }
  {
    Table lt, tx;
    lt.header = {"statistic"};
    tx.header = {"statistic"};
    for (const auto& row : r.lifetime) {
      lt.header.push_back(row.forecaster);
      tx.header.push_back(row.forecaster);
    }
    auto add = [&](Table& tb, const std::string& stat, auto getter) {
      std::vector<std::string> cells{stat};
      for (const auto& row : r.lifetime) cells.push_back(getter(row));
      tb.rows.push_back(cells);
    };
    if (!r.lifetime.empty()) {
      add(lt, "individuals", [](const LifetimeRow& x) { return std::to_string(x.individuals); });
      add(lt, "paths", [](const LifetimeRow& x) { return std::to_string(x.paths); });
      add(lt, "mean_pdv", [](const LifetimeRow& x) { return fmt6(x.mean_pdv); });
      add(lt, "median_pdv", [](const LifetimeRow& x) { return fmt6(x.median_pdv); });
      add(lt, "gini", [](const LifetimeRow& x) { return fmt6(x.gini_pdv); });
      add(lt, "top1_share", [](const LifetimeRow& x) { return fmt6(x.top1); });
      add(lt, "top10_share", [](const LifetimeRow& x) { return fmt6(x.top10); });
      add(lt, "mean_interval_lower", [](const LifetimeRow& x) { return fmt6(x.lower); });
      add(lt, "mean_interval_upper", [](const LifetimeRow& x) { return fmt6(x.upper); });
      add(lt, "mean_relative_width", [](const LifetimeRow& x) { return fmt6(x.rel_width); });
      add(tx, "paths", [](const LifetimeRow& x) { return std::to_string(x.tax.n); });
      add(tx, "mean_lifetime_tax", [](const LifetimeRow& x) { return fmt6(x.tax.mean_lifetime_tax); });
      add(tx, "mean_aetr", [](const LifetimeRow& x) { return fmt6(x.tax.mean_aetr); });
      add(tx, "p99_aetr", [](const LifetimeRow& x) { return fmt6(x.tax.p99_aetr); });
      add(tx, "tax_gini", [](const LifetimeRow& x) { return fmt6(x.tax.tax_gini); });
      add(tx, "zero_earnings_paths", [](const LifetimeRow& x) { return std::to_string(x.tax.zero_earnings); });
    }
    t["lifetime.csv"] = lt;
    t["tax.csv"] = tx;
  }
  {
    Table d;
    d.header = {"forecaster", "benchmark", "h", "periods", "mean_diff", "statistic", "p_value", "degenerate"};
    for (const auto& row : r.dm) {
      if (!row.computed) {
        d.rows.push_back({row.forecaster, row.benchmark, std::to_string(row.h), std::to_string(row.dm.periods), "NA",
                          "NA", "NA", "insufficient_periods"});
        continue;
      }
      d.rows.push_back({row.forecaster, row.benchmark, std::to_string(row.h), std::to_string(row.dm.periods),
                        fmt6(row.dm.mean), fmt6(row.dm.statistic), fmt6(row.dm.p_value),
                        row.dm.degenerate ? "true" : "false"});
    }
    t["dm.csv"] = d;
  }
  {
    Table s;
    s.header = {"study", "forecaster", "h", "fold", "n", "replicates", "nominal",
                "marginal_mean", "marginal_sd", "worst_group_mean", "worst_group_sd"};
    for (const auto& e : r.sensitivity) {
      s.rows.push_back({e.row.study, e.forecaster, std::to_string(e.h), e.row.fold, std::to_string(e.row.n),
                        std::to_string(e.row.replicates), fmt6(e.row.nominal), fmt6(e.row.marginal_mean),
                        fmt6(e.row.marginal_sd), fmt6(e.row.worst_mean), fmt6(e.row.worst_sd)});
    }
    t["sensitivity.csv"] = s;
  }
  {
    Table p;
    p.header = {"study", "forecaster", "h", "conditioning_len", "reference_crps", "crps", "ratio", "ratio_se"};
    for (const auto& e : r.placebo) {
      p.rows.push_back({e.study, e.forecaster, std::to_string(e.h), std::to_string(e.conditioning_len),
                        fmt6(e.reference), fmt6(e.value), fmt6(e.ratio), fmt6(e.ratio_se)});
    }
    t["placebo.csv"] = p;
  }
  return t;
}

/// Every emitted file (tables, calibration JSON, model files) plus the
/// manifest, keyed by relative path.
inline std::map<std::string, std::string> render_outputs(const ExperimentConfig& c, const RunResult& r) {
  std::map<std::string, std::string> files = r.files;
  for (const auto& [name, table] : build_tables(c, r)) files[name] = table.to_csv();
  const Seeds s = Seeds::from(c.seed);
  nlohmann::json listing = nlohmann::json::array();
  for (const auto& [path, body] : files) listing.push_back({{"path", path}, {"fnv1a64", hex64(fnv1a64(body))}});
  nlohmann::json manifest = {
      {"name", c.name},
      {"study", c.study},
      {"version", kVersion},
      {"config_hash", hex64(fnv1a64(c.source_text + "\nseed=" + std::to_string(c.seed) + "\nstudy=" + c.study))},
      {"panel_hash", r.panel_hash},
      {"seeds",
       {{"master", c.seed}, {"simulate", s.simulate}, {"features", s.features}, {"fit", s.fit},
        {"forecast", s.forecast}, {"lifetime", s.lifetime}, {"study", s.study}}},
      {"forecasters", r.roster},
      {"diagnostics", r.diagnostics},
      {"files", listing}};
  files["manifest.json"] = manifest.dump(2) + "\n";
  return files;
}

inline void write_file(const std::filesystem::path& p, const std::string& body) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + p.string());
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + p.string());
}

/// Validates, marks the output directory STALE, runs, writes every file and
/// clears the marker. On failure the marker records the diagnostic.
inline RunResult run_and_write(const ExperimentConfig& c) {
  c.validate();
  const std::filesystem::path dir(c.out_dir);
  std::filesystem::create_directories(dir);
  write_file(dir / "STALE", "running\n");
  try {
    RunResult r = run_pipeline(c);
    for (const auto& [path, body] : render_outputs(c, r)) write_file(dir / path, body);
    std::filesystem::remove(dir / "STALE");
    return r;
  } catch (const std::exception& e) {
    write_file(dir / "STALE", std::string(e.what()) + "\n");
    throw;
  }
}

}  // namespace earnlab
