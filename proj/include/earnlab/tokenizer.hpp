#pragma once

// Record -> token mapping. A token is the projection of five concatenated
// subvectors: a linear map of year-standardized continuous values (log
// earnings first, then the continuous features), one embedding per
// categorical feature, a linear map of the missingness mask, and separate
// age and calendar-year embeddings.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "earnlab/panel.hpp"
#include "earnlab/tensor.hpp"

namespace earnlab {

struct TokenizerConfig {
  int continuous_dim = 8;
  std::vector<int> categorical_dims;  // empty: ceil(log2(cardinality)) + 1 each
  int missing_dim = 4;
  int age_dim = 8;
  int year_dim = 4;
  int model_dim = 32;
  int age_min = 16;
  int age_max = 64;
  int year_min = 1940;
  int year_max = 2060;

  void validate() const {
    require(continuous_dim >= 1 && missing_dim >= 1 && age_dim >= 1 && year_dim >= 1 && model_dim >= 1,
            ErrorKind::Parameter, "tokenizer dimensions must be >= 1");
    for (int d : categorical_dims) require(d >= 1, ErrorKind::Parameter, "categorical dims must be >= 1");
    require(age_min <= age_max && year_min <= year_max, ErrorKind::Parameter, "tokenizer ranges must be ordered");
  }

  /// Reference dimensions of the full-scale model: 64 continuous, 76 embedded
  /// categorical (24/16/8/4/4/4/4/4/4/4), 16 missingness, 64 age, 32 year,
  /// projected to 384.
  static TokenizerConfig full_scale() {
    TokenizerConfig c;
    c.continuous_dim = 64;
    c.categorical_dims = {24, 16, 8, 4, 4, 4, 4, 4, 4, 4};
    c.missing_dim = 16;
    c.age_dim = 64;
    c.year_dim = 32;
    c.model_dim = 384;
    return c;
  }
};

inline int default_embedding_dim(int cardinality) {
  return static_cast<int>(std::ceil(std::log2(static_cast<double>(cardinality)))) + 1;
}

struct CellStats {
  double mean = 0.0;
  double sd = 1.0;
  std::int64_t n = 0;
  bool constant = false;   // fewer than two values or zero spread; sd treated as 1
  bool inherited = false;  // no observations in this year; pooled statistic used
};

/// Year-specific mean/sd per continuous channel (channel 0 is log earnings).
struct FeatureStats {
  std::size_t channels = 0;
  std::map<int, std::vector<CellStats>> by_year;
  std::vector<CellStats> pooled;

  const CellStats& cell(int year, std::size_t channel) const {
    auto it = by_year.find(year);
    if (it == by_year.end()) return pooled[channel];
    return it->second[channel];
  }

  double standardize(int year, std::size_t channel, double value) const {
    const auto& c = cell(year, channel);
    return (value - c.mean) / c.sd;
  }
};

namespace detail {

struct Accum {
  std::vector<double> values;
};

inline CellStats finish_cell(const std::vector<double>& v) {
  CellStats c;
  c.n = static_cast<std::int64_t>(v.size());
  if (v.empty()) return c;
  double s = 0.0;
  for (double x : v) s += x;
  c.mean = s / static_cast<double>(v.size());
  if (v.size() < 2) {
    c.constant = true;
    c.sd = 1.0;
    return c;
  }
  double ss = 0.0;
  for (double x : v) ss += (x - c.mean) * (x - c.mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  if (!(sd > 0.0)) {
    c.constant = true;
    c.sd = 1.0;
  } else {
    c.sd = sd;
  }
  return c;
}

inline double channel_value(const AnnualRecord& r, std::size_t channel) {
  return channel == 0 ? log_earnings(r.earnings) : r.continuous[channel - 1];
}

inline bool channel_observed(const AnnualRecord& r, std::size_t channel) {
  return channel == 0 || r.missing[channel - 1] == 0;
}

}  // namespace detail

/// Two-pass mean and (n-1)-denominator sd per (year, channel) over
/// observed values.
inline FeatureStats fit_stats(const Panel& training) {
  require(!training.empty(), ErrorKind::Parameter, "fit_stats needs a nonempty training panel");
  std::size_t k = 0;
  bool found = false;
  for (const auto& h : training) {
    if (!h.records.empty()) {
      k = h.records.front().continuous.size();
      found = true;
      break;
    }
  }
  require(found, ErrorKind::Parameter, "fit_stats needs at least one record");
  const std::size_t channels = k + 1;
  std::map<int, std::vector<std::vector<double>>> values;
  std::vector<std::vector<double>> pooled(channels);
  for (const auto& h : training) {
    for (const auto& r : h.records) {
      auto& slot = values[r.year];
      if (slot.empty()) slot.resize(channels);
      for (std::size_t c = 0; c < channels; ++c) {
        if (!detail::channel_observed(r, c)) continue;
        const double v = detail::channel_value(r, c);
        slot[c].push_back(v);
        pooled[c].push_back(v);
      }
    }
  }
  FeatureStats stats;
  stats.channels = channels;
  for (const auto& p : pooled) stats.pooled.push_back(detail::finish_cell(p));
  for (const auto& [year, slot] : values) {
    std::vector<CellStats> cells;
    for (std::size_t c = 0; c < channels; ++c) {
      if (slot[c].empty()) {
        CellStats inherited = stats.pooled[c];
        inherited.n = 0;
        inherited.inherited = true;
        cells.push_back(inherited);
      } else {
        cells.push_back(detail::finish_cell(slot[c]));
      }
    }
    stats.by_year.emplace(year, std::move(cells));
  }
  return stats;
}

/// Prepared (pre-embedding) view of a record.
struct TokenInput {
  std::vector<double> continuous;  // standardized; missing -> 0
  std::vector<int> category_rows;  // unknown row = cardinality
  std::vector<double> mask;        // 1 = missing
  int age_row = 0;
  int year_row = 0;
};

struct TokenizerState {
  TokenizerConfig config;
  FeatureStats stats;
  std::vector<int> cardinalities;
  std::size_t n_continuous = 0;  // raw continuous features, excluding log earnings
  ParamSet weights;
  // Tensor indices.
  std::size_t cont_w = 0, miss_w = 0, age_t = 0, year_t = 0, proj_w = 0, proj_b = 0;
  std::vector<std::size_t> cat_t;

  std::size_t concat_dim() const {
    std::size_t n = static_cast<std::size_t>(config.continuous_dim + config.missing_dim + config.age_dim +
                                             config.year_dim);
    for (std::size_t k = 0; k < cat_t.size(); ++k) n += weights[cat_t[k]].cols();
    return n;
  }
  std::size_t model_dim() const { return static_cast<std::size_t>(config.model_dim); }
};

namespace detail {

inline void index_tokenizer(TokenizerState& s) {
  s.cont_w = static_cast<std::size_t>(s.weights.find("tok.cont"));
  s.miss_w = static_cast<std::size_t>(s.weights.find("tok.miss"));
  s.age_t = static_cast<std::size_t>(s.weights.find("tok.age"));
  s.year_t = static_cast<std::size_t>(s.weights.find("tok.year"));
  s.proj_w = static_cast<std::size_t>(s.weights.find("tok.proj.w"));
  s.proj_b = static_cast<std::size_t>(s.weights.find("tok.proj.b"));
  s.cat_t.clear();
  for (std::size_t k = 0; k < s.cardinalities.size(); ++k) {
    s.cat_t.push_back(static_cast<std::size_t>(s.weights.find("tok.cat." + std::to_string(k))));
  }
}

}  // namespace detail

/// Allocates embedding tables (uniform ±1/sqrt(dim)) and linear maps
/// (uniform ±1/sqrt(fan_in)) for the given feature schema.
inline TokenizerState make_tokenizer(const TokenizerConfig& cfg, FeatureStats stats, std::size_t n_continuous,
                                     std::vector<int> cardinalities, std::uint64_t seed) {
  cfg.validate();
  require(stats.channels == n_continuous + 1, ErrorKind::Schema, "feature stats do not match continuous count");
  require(cfg.categorical_dims.empty() || cfg.categorical_dims.size() == cardinalities.size(), ErrorKind::Schema,
          "categorical_dims must list one dimension per categorical feature");
  TokenizerState s;
  s.config = cfg;
  s.stats = std::move(stats);
  s.cardinalities = std::move(cardinalities);
  s.n_continuous = n_continuous;
  const auto n_mask = n_continuous + s.cardinalities.size();
  Rng rng(seed, {stream::kInit, 1});
  auto& w = s.weights;
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  auto add_uniform = [&](const std::string& name, std::vector<std::size_t> shape, double bound) {
    auto i = w.add(name, std::move(shape));
    fill_uniform(w[i], bound, rng);
  };
  add_uniform("tok.cont", {static_cast<std::size_t>(cfg.continuous_dim), n_continuous + 1},
              1.0 / std::sqrt(static_cast<double>(n_continuous + 1)));
  for (std::size_t k = 0; k < s.cardinalities.size(); ++k) {
    require(s.cardinalities[k] >= 2, ErrorKind::Schema, "cardinality must be >= 2");
    const int dim = cfg.categorical_dims.empty() ? default_embedding_dim(s.cardinalities[k]) : cfg.categorical_dims[k];
    add_uniform("tok.cat." + std::to_string(k),
                {static_cast<std::size_t>(s.cardinalities[k] + 1), static_cast<std::size_t>(dim)},
                1.0 / std::sqrt(static_cast<double>(dim)));
  }
  add_uniform("tok.miss", {static_cast<std::size_t>(cfg.missing_dim), n_mask},
              n_mask > 0 ? 1.0 / std::sqrt(static_cast<double>(n_mask)) : 0.0);
  add_uniform("tok.age", {static_cast<std::size_t>(cfg.age_max - cfg.age_min + 1), static_cast<std::size_t>(cfg.age_dim)},
              1.0 / std::sqrt(static_cast<double>(cfg.age_dim)));
  add_uniform("tok.year",
              {static_cast<std::size_t>(cfg.year_max - cfg.year_min + 1), static_cast<std::size_t>(cfg.year_dim)},
              1.0 / std::sqrt(static_cast<double>(cfg.year_dim)));
  detail::index_tokenizer(s);
  const auto concat = s.concat_dim();
  add_uniform("tok.proj.w", {d, concat}, 1.0 / std::sqrt(static_cast<double>(concat)));
  add_uniform("tok.proj.b", {d}, 1.0 / std::sqrt(static_cast<double>(concat)));
  detail::index_tokenizer(s);
  return s;
}

/// Standardizes and indexes a record; rejects ages/years outside the tables.
inline TokenInput prepare_token(const AnnualRecord& r, const TokenizerState& s) {
  const auto& cfg = s.config;
  if (r.age < cfg.age_min || r.age > cfg.age_max) {
    throw Error(ErrorKind::Tokenization, "age " + std::to_string(r.age) + " outside tokenizer range");
  }
  if (r.year < cfg.year_min || r.year > cfg.year_max) {
    throw Error(ErrorKind::Tokenization, "year " + std::to_string(r.year) + " outside tokenizer range");
  }
  require(r.continuous.size() == s.n_continuous && r.categoricals.size() == s.cardinalities.size() &&
              r.missing.size() == s.n_continuous + s.cardinalities.size(),
          ErrorKind::Tokenization, "record does not match tokenizer schema");
  TokenInput in;
  in.continuous.resize(s.n_continuous + 1);
  for (std::size_t c = 0; c <= s.n_continuous; ++c) {
    in.continuous[c] = detail::channel_observed(r, c) ? s.stats.standardize(r.year, c, detail::channel_value(r, c)) : 0.0;
  }
  in.category_rows.resize(s.cardinalities.size());
  for (std::size_t k = 0; k < s.cardinalities.size(); ++k) {
    const bool missing = r.missing[s.n_continuous + k] != 0;
    const int v = r.categoricals[k];
    in.category_rows[k] = (missing || v < 0 || v >= s.cardinalities[k]) ? s.cardinalities[k] : v;
  }
  in.mask.resize(r.missing.size());
  for (std::size_t j = 0; j < r.missing.size(); ++j) in.mask[j] = r.missing[j] ? 1.0 : 0.0;
  in.age_row = r.age - cfg.age_min;
  in.year_row = r.year - cfg.year_min;
  return in;
}

/// The concatenated (pre-projection) subvector.
inline std::vector<double> embed_token(const TokenInput& in, const TokenizerState& s) {
  const auto& w = s.weights;
  std::vector<double> out;
  out.reserve(s.concat_dim());
  const auto& cw = w[s.cont_w];
  for (std::size_t i = 0; i < cw.rows(); ++i) {
    double acc = 0.0;
    const double* row = cw.row(i);
    for (std::size_t j = 0; j < cw.cols(); ++j) acc += row[j] * in.continuous[j];
    out.push_back(acc);
  }
  for (std::size_t k = 0; k < s.cat_t.size(); ++k) {
    const auto& t = w[s.cat_t[k]];
    const double* row = t.row(static_cast<std::size_t>(in.category_rows[k]));
    out.insert(out.end(), row, row + t.cols());
  }
  const auto& mw = w[s.miss_w];
  for (std::size_t i = 0; i < mw.rows(); ++i) {
    double acc = 0.0;
    const double* row = mw.row(i);
    for (std::size_t j = 0; j < in.mask.size(); ++j) acc += row[j] * in.mask[j];
    out.push_back(acc);
  }
  const auto& at = w[s.age_t];
  const double* arow = at.row(static_cast<std::size_t>(in.age_row));
  out.insert(out.end(), arow, arow + at.cols());
  const auto& yt = w[s.year_t];
  const double* yrow = yt.row(static_cast<std::size_t>(in.year_row));
  out.insert(out.end(), yrow, yrow + yt.cols());
  return out;
}

inline std::vector<double> project_token(const std::vector<double>& concat, const TokenizerState& s) {
  const auto& pw = s.weights[s.proj_w];
  const auto& pb = s.weights[s.proj_b];
  std::vector<double> out(pw.rows());
  for (std::size_t i = 0; i < pw.rows(); ++i) {
    double acc = pb.data[i];
    const double* row = pw.row(i);
    for (std::size_t j = 0; j < concat.size(); ++j) acc += row[j] * concat[j];
    out[i] = acc;
  }
  return out;
}

inline std::vector<double> tokenize(const AnnualRecord& record, const TokenizerState& state) {
  return project_token(embed_token(prepare_token(record, state), state), state);
}

/// Accumulates tokenizer gradients given d(loss)/d(token).
inline void tokenize_backward(const TokenInput& in, const std::vector<double>& concat,
                              const std::vector<double>& d_token, const TokenizerState& s, ParamSet& grads) {
  const auto& pw = s.weights[s.proj_w];
  auto& gpw = grads[s.proj_w];
  auto& gpb = grads[s.proj_b];
  std::vector<double> d_concat(concat.size(), 0.0);
  for (std::size_t i = 0; i < pw.rows(); ++i) {
    const double g = d_token[i];
    if (g == 0.0) continue;
    gpb.data[i] += g;
    double* grow = gpw.row(i);
    const double* row = pw.row(i);
    for (std::size_t j = 0; j < concat.size(); ++j) {
      grow[j] += g * concat[j];
      d_concat[j] += g * row[j];
    }
  }
  std::size_t off = 0;
  auto& gcw = grads[s.cont_w];
  for (std::size_t i = 0; i < gcw.rows(); ++i) {
    double* grow = gcw.row(i);
    for (std::size_t j = 0; j < gcw.cols(); ++j) grow[j] += d_concat[off + i] * in.continuous[j];
  }
  off += gcw.rows();
  for (std::size_t k = 0; k < s.cat_t.size(); ++k) {
    auto& gt = grads[s.cat_t[k]];
    double* grow = gt.row(static_cast<std::size_t>(in.category_rows[k]));
    for (std::size_t j = 0; j < gt.cols(); ++j) grow[j] += d_concat[off + j];
    off += gt.cols();
  }
  auto& gmw = grads[s.miss_w];
  for (std::size_t i = 0; i < gmw.rows(); ++i) {
    double* grow = gmw.row(i);
    for (std::size_t j = 0; j < in.mask.size(); ++j) grow[j] += d_concat[off + i] * in.mask[j];
  }
  off += gmw.rows();
  auto& gat = grads[s.age_t];
  double* arow = gat.row(static_cast<std::size_t>(in.age_row));
  for (std::size_t j = 0; j < gat.cols(); ++j) arow[j] += d_concat[off + j];
  off += gat.cols();
  auto& gyt = grads[s.year_t];
  double* yrow = gyt.row(static_cast<std::size_t>(in.year_row));
  for (std::size_t j = 0; j < gyt.cols(); ++j) yrow[j] += d_concat[off + j];
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TokenizerConfig& c) {
  return {{"continuous_dim", c.continuous_dim}, {"categorical_dims", c.categorical_dims},
          {"missing_dim", c.missing_dim},       {"age_dim", c.age_dim},
          {"year_dim", c.year_dim},             {"model_dim", c.model_dim},
          {"age_min", c.age_min},               {"age_max", c.age_max},
          {"year_min", c.year_min},             {"year_max", c.year_max}};
}

inline TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j) {
  TokenizerConfig c;
  c.continuous_dim = j.at("continuous_dim").get<int>();
  c.categorical_dims = j.at("categorical_dims").get<std::vector<int>>();
  c.missing_dim = j.at("missing_dim").get<int>();
  c.age_dim = j.at("age_dim").get<int>();
  c.year_dim = j.at("year_dim").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.age_min = j.at("age_min").get<int>();
  c.age_max = j.at("age_max").get<int>();
  c.year_min = j.at("year_min").get<int>();
  c.year_max = j.at("year_max").get<int>();
  return c;
}

namespace detail {

// Doubles are written as 17-significant-digit strings for exact round trips.
inline nlohmann::json exact(double v) { return fmt17(v); }
inline double from_exact(const nlohmann::json& j) { return std::stod(j.get<std::string>()); }

inline nlohmann::json cell_json(const CellStats& c) {
  return {{"mean", exact(c.mean)}, {"sd", exact(c.sd)}, {"n", c.n}, {"constant", c.constant}, {"inherited", c.inherited}};
}

inline CellStats cell_from_json(const nlohmann::json& j) {
  CellStats c;
  c.mean = from_exact(j.at("mean"));
  c.sd = from_exact(j.at("sd"));
  c.n = j.at("n").get<std::int64_t>();
  c.constant = j.at("constant").get<bool>();
  c.inherited = j.at("inherited").get<bool>();
  return c;
}

}  // namespace detail

inline nlohmann::json to_json(const TokenizerState& s) {
  nlohmann::json stats;
  stats["channels"] = s.stats.channels;
  nlohmann::json pooled = nlohmann::json::array();
  for (const auto& c : s.stats.pooled) pooled.push_back(detail::cell_json(c));
  stats["pooled"] = pooled;
  nlohmann::json years = nlohmann::json::array();
  for (const auto& [year, cells] : s.stats.by_year) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& c : cells) row.push_back(detail::cell_json(c));
    years.push_back({{"year", year}, {"cells", row}});
  }
  stats["by_year"] = years;
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& t : s.weights.tensors()) {
    nlohmann::json data = nlohmann::json::array();
    for (double v : t.data) data.push_back(detail::exact(v));
    tables.push_back({{"name", t.name}, {"shape", t.shape}, {"data", data}});
  }
  return {{"config", to_json(s.config)},
          {"n_continuous", s.n_continuous},
          {"cardinalities", s.cardinalities},
          {"stats", stats},
          {"tables", tables}};
}

inline TokenizerState tokenizer_from_json(const nlohmann::json& j) {
  TokenizerState s;
  s.config = tokenizer_config_from_json(j.at("config"));
  s.n_continuous = j.at("n_continuous").get<std::size_t>();
  s.cardinalities = j.at("cardinalities").get<std::vector<int>>();
  const auto& st = j.at("stats");
  s.stats.channels = st.at("channels").get<std::size_t>();
  for (const auto& c : st.at("pooled")) s.stats.pooled.push_back(detail::cell_from_json(c));
  for (const auto& y : st.at("by_year")) {
    std::vector<CellStats> cells;
    for (const auto& c : y.at("cells")) cells.push_back(detail::cell_from_json(c));
    s.stats.by_year.emplace(y.at("year").get<int>(), std::move(cells));
  }
  for (const auto& t : j.at("tables")) {
    const auto i = s.weights.add(t.at("name").get<std::string>(), t.at("shape").get<std::vector<std::size_t>>());
    auto& data = s.weights[i].data;
    const auto& arr = t.at("data");
    require(arr.size() == data.size(), ErrorKind::Io, "tokenizer table size mismatch");
    for (std::size_t k = 0; k < data.size(); ++k) data[k] = detail::from_exact(arr[k]);
  }
  detail::index_tokenizer(s);
  return s;
}

}  // namespace earnlab
