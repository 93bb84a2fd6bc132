#pragma once

// Toy decoder-only transformer with a point head and a seven-level quantile
// head. Pre-layer-norm blocks, tanh-GELU feed-forward, causal multi-head
// attention. Forward passes run position by position against a key/value
// cache, so full-sequence evaluation and incremental decoding execute the
// same arithmetic. Gradients are hand-derived (double precision).

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "earnlab/panel.hpp"
#include "earnlab/quantile.hpp"
#include "earnlab/tensor.hpp"
#include "earnlab/tokenizer.hpp"

namespace earnlab {

struct ToyTransformerConfig {
  int layers = 2;
  int heads = 4;
  int model_dim = 32;
  int ff_dim = 0;  // 0: 4 * model_dim
  int max_context = 45;
  double dropout = 0.0;
  double stochastic_depth = 0.0;
  std::uint64_t seed = 1;

  int ff() const { return ff_dim > 0 ? ff_dim : 4 * model_dim; }
  int head_dim() const { return model_dim / heads; }

  void validate() const {
    require(layers >= 1 && heads >= 1 && model_dim >= 1 && max_context >= 1, ErrorKind::Parameter,
            "transformer sizes must be >= 1");
    require(model_dim % heads == 0, ErrorKind::Parameter, "model_dim must be divisible by heads");
    require(dropout >= 0.0 && dropout < 1.0 && stochastic_depth >= 0.0 && stochastic_depth < 1.0,
            ErrorKind::Parameter, "dropout rates must lie in [0,1)");
  }

  /// Six layers, eight heads, d = 384.
  static ToyTransformerConfig full_scale() {
    ToyTransformerConfig c;
    c.layers = 6;
    c.heads = 8;
    c.model_dim = 384;
    c.dropout = 0.1;
    c.stochastic_depth = 0.1;
    return c;
  }
};

struct LayerSlots {
  std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct ModelSlots {
  std::vector<LayerSlots> layers;
  std::size_t lnf_g = 0, lnf_b = 0, point_w = 0, point_b = 0, q_w = 0, q_b = 0;
};

struct ModelParams {
  ToyTransformerConfig config;
  TokenizerState tokenizer;
  ParamSet weights;
  ModelSlots slots;
};

namespace detail {

inline std::size_t slot(const ParamSet& w, const std::string& name) {
  const int i = w.find(name);
  require(i >= 0, ErrorKind::Parameter, "missing tensor " + name);
  return static_cast<std::size_t>(i);
}

inline void index_model(ModelParams& p) {
  auto& w = p.weights;
  p.slots.layers.clear();
  for (int l = 0; l < p.config.layers; ++l) {
    const std::string pre = "L" + std::to_string(l) + ".";
    p.slots.layers.push_back(LayerSlots{slot(w, pre + "ln1.g"), slot(w, pre + "ln1.b"), slot(w, pre + "qkv.w"),
                                        slot(w, pre + "qkv.b"), slot(w, pre + "out.w"), slot(w, pre + "out.b"),
                                        slot(w, pre + "ln2.g"), slot(w, pre + "ln2.b"), slot(w, pre + "ff1.w"),
                                        slot(w, pre + "ff1.b"), slot(w, pre + "ff2.w"), slot(w, pre + "ff2.b")});
  }
  p.slots.lnf_g = slot(w, "lnf.g");
  p.slots.lnf_b = slot(w, "lnf.b");
  p.slots.point_w = slot(w, "head.point.w");
  p.slots.point_b = slot(w, "head.point.b");
  p.slots.q_w = slot(w, "head.q.w");
  p.slots.q_b = slot(w, "head.q.b");
}

}  // namespace detail

/// Allocates transformer weights around an initialized tokenizer. Layer-norm
/// gains start at 1, biases at 0, matrices uniform(±1/sqrt(fan_in)).
inline ModelParams make_model(const ToyTransformerConfig& cfg, TokenizerState tokenizer) {
  cfg.validate();
  require(tokenizer.config.model_dim == cfg.model_dim, ErrorKind::Parameter,
          "tokenizer and transformer model_dim differ");
  ModelParams p;
  p.config = cfg;
  p.tokenizer = std::move(tokenizer);
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto f = static_cast<std::size_t>(cfg.ff());
  Rng rng(cfg.seed, {stream::kInit, 2});
  auto& w = p.weights;
  auto matrix = [&](const std::string& name, std::size_t out, std::size_t in) {
    fill_uniform(w[w.add(name, {out, in})], 1.0 / std::sqrt(static_cast<double>(in)), rng);
  };
  auto ones = [&](const std::string& name, std::size_t n) {
    auto& t = w[w.add(name, {n})];
    std::fill(t.data.begin(), t.data.end(), 1.0);
  };
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "L" + std::to_string(l) + ".";
    ones(pre + "ln1.g", d);
    w.add(pre + "ln1.b", {d});
    matrix(pre + "qkv.w", 3 * d, d);
    w.add(pre + "qkv.b", {3 * d});
    matrix(pre + "out.w", d, d);
    w.add(pre + "out.b", {d});
    ones(pre + "ln2.g", d);
    w.add(pre + "ln2.b", {d});
    matrix(pre + "ff1.w", f, d);
    w.add(pre + "ff1.b", {f});
    matrix(pre + "ff2.w", d, f);
    w.add(pre + "ff2.b", {d});
  }
  ones("lnf.g", d);
  w.add("lnf.b", {d});
  matrix("head.point.w", 1, d);
  w.add("head.point.b", {1});
  matrix("head.q.w", kNumLevels, d);
  w.add("head.q.b", {kNumLevels});
  detail::index_model(p);
  return p;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double inner = c * (x + 0.044715 * x * x * x);
  const double th = std::tanh(inner);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LayerCache {
  std::vector<std::vector<double>> qkv;
  std::vector<std::vector<double>> probs;  // heads * (t + 1) per position
  // Kept only for training.
  std::vector<std::vector<double>> x_in, xhat1, o, attn, x_mid, xhat2, h, g, ff;
  std::vector<double> rstd1, rstd2;
  std::vector<std::vector<double>> mask_attn, mask_ff;  // empty vectors: no dropout
  double keep_attn = 1.0, keep_ff = 1.0;               // stochastic-depth factors
};

struct ForwardCache {
  bool keep_activations = false;
  bool keep_attention = false;
  std::size_t length = 0;
  std::vector<LayerCache> layers;
  std::vector<std::vector<double>> x_out, xhat_f;
  std::vector<double> rstd_f;

  explicit ForwardCache(const ToyTransformerConfig& cfg, bool activations = false, bool attention = false)
      : keep_activations(activations), keep_attention(attention || activations),
        layers(static_cast<std::size_t>(cfg.layers)) {}
};

namespace detail {

inline void linear(const Tensor& w, const Tensor& b, const double* x, double* y) {
  const std::size_t out = w.rows();
  const std::size_t in = w.cols();
  for (std::size_t i = 0; i < out; ++i) {
    const double* row = w.row(i);
    double acc = b.data[i];
    for (std::size_t j = 0; j < in; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

inline double layer_norm(const std::vector<double>& x, const Tensor& g, const Tensor& b, std::vector<double>& xhat,
                         std::vector<double>& y) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  xhat.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = g.data[i] * xhat[i] + b.data[i];
  }
  return rstd;
}

inline std::vector<double> dropout_mask(std::size_t n, double rate, double keep_factor, Rng* rng) {
  if (rng == nullptr || (rate <= 0.0 && keep_factor == 1.0)) return {};
  std::vector<double> m(n, keep_factor);
  if (rate > 0.0) {
    for (auto& v : m) v = rng->uniform() < rate ? 0.0 : v / (1.0 - rate);
  }
  return m;
}

}  // namespace detail

/// Runs one position against the cache and appends it. `dropout` enables
/// dropout and stochastic depth (training only).
inline QuantileForecast forward_step(const ModelParams& p, const std::vector<double>& token, ForwardCache& c,
                                     Rng* dropout = nullptr) {
  const auto& cfg = p.config;
  const auto& w = p.weights;
  if (c.length >= static_cast<std::size_t>(cfg.max_context)) {
    throw Error(ErrorKind::Context, "sequence length exceeds max_context " + std::to_string(cfg.max_context));
  }
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  require(token.size() == d, ErrorKind::Parameter, "token dimension mismatch");
  const auto f = static_cast<std::size_t>(cfg.ff());
  const auto nh = static_cast<std::size_t>(cfg.heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t t = c.length;

  std::vector<double> x = token;
  std::vector<double> xhat, a, qkv(3 * d), o(d), attn(d), x_mid(d), bvec, h(f), g(f), ff(d);
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    const auto& s = p.slots.layers[l];
    auto& lc = c.layers[l];
    if (dropout != nullptr && t == 0 && cfg.stochastic_depth > 0.0) {
      const double keep = 1.0 - cfg.stochastic_depth;
      lc.keep_attn = dropout->uniform() < cfg.stochastic_depth ? 0.0 : 1.0 / keep;
      lc.keep_ff = dropout->uniform() < cfg.stochastic_depth ? 0.0 : 1.0 / keep;
    }
    const double rstd1 = detail::layer_norm(x, w[s.ln1_g], w[s.ln1_b], xhat, a);
    detail::linear(w[s.qkv_w], w[s.qkv_b], a.data(), qkv.data());
    lc.qkv.push_back(qkv);

    std::vector<double> probs(nh * (t + 1));
    for (std::size_t hd = 0; hd < nh; ++hd) {
      const double* q = qkv.data() + hd * dh;
      double* pr = probs.data() + hd * (t + 1);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t u = 0; u <= t; ++u) {
        const double* k = lc.qkv[u].data() + d + hd * dh;
        double sc = 0.0;
        for (std::size_t j = 0; j < dh; ++j) sc += q[j] * k[j];
        pr[u] = sc * scale;
        mx = std::max(mx, pr[u]);
      }
      double z = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        pr[u] = std::exp(pr[u] - mx);
        z += pr[u];
      }
      for (std::size_t u = 0; u <= t; ++u) pr[u] /= z;
      double* oh = o.data() + hd * dh;
      std::fill(oh, oh + dh, 0.0);
      for (std::size_t u = 0; u <= t; ++u) {
        const double* v = lc.qkv[u].data() + 2 * d + hd * dh;
        for (std::size_t j = 0; j < dh; ++j) oh[j] += pr[u] * v[j];
      }
    }
    detail::linear(w[s.out_w], w[s.out_b], o.data(), attn.data());
    auto m_attn = detail::dropout_mask(d, cfg.dropout, lc.keep_attn, dropout);
    for (std::size_t i = 0; i < d; ++i) x_mid[i] = x[i] + (m_attn.empty() ? attn[i] : m_attn[i] * attn[i]);

    std::vector<double> xhat2;
    const double rstd2 = detail::layer_norm(x_mid, w[s.ln2_g], w[s.ln2_b], xhat2, bvec);
    detail::linear(w[s.ff1_w], w[s.ff1_b], bvec.data(), h.data());
    for (std::size_t i = 0; i < f; ++i) g[i] = gelu(h[i]);
    detail::linear(w[s.ff2_w], w[s.ff2_b], g.data(), ff.data());
    auto m_ff = detail::dropout_mask(d, cfg.dropout, lc.keep_ff, dropout);
    std::vector<double> x_out(d);
    for (std::size_t i = 0; i < d; ++i) x_out[i] = x_mid[i] + (m_ff.empty() ? ff[i] : m_ff[i] * ff[i]);

    if (c.keep_attention) lc.probs.push_back(std::move(probs));
    if (c.keep_activations) {
      lc.x_in.push_back(x);
      lc.xhat1.push_back(xhat);
      lc.rstd1.push_back(rstd1);
      lc.o.push_back(o);
      lc.attn.push_back(attn);
      lc.x_mid.push_back(x_mid);
      lc.xhat2.push_back(xhat2);
      lc.rstd2.push_back(rstd2);
      lc.h.push_back(h);
      lc.g.push_back(g);
      lc.ff.push_back(ff);
      lc.mask_attn.push_back(std::move(m_attn));
      lc.mask_ff.push_back(std::move(m_ff));
    }
    x = std::move(x_out);
  }
  std::vector<double> xhat_f, fin;
  const double rstd_f = detail::layer_norm(x, w[p.slots.lnf_g], w[p.slots.lnf_b], xhat_f, fin);
  QuantileForecast out;
  detail::linear(w[p.slots.point_w], w[p.slots.point_b], fin.data(), &out.point);
  detail::linear(w[p.slots.q_w], w[p.slots.q_b], fin.data(), out.q.data());
  if (c.keep_activations) {
    c.x_out.push_back(std::move(x));
    c.xhat_f.push_back(std::move(xhat_f));
    c.rstd_f.push_back(rstd_f);
  }
  ++c.length;
  return out;
}

/// Raw (not rearranged) head outputs for every position; output j is the
/// forecast for the record following token j.
inline std::vector<QuantileForecast> forward(const ModelParams& p, const std::vector<std::vector<double>>& tokens,
                                             ForwardCache* cache = nullptr, Rng* dropout = nullptr) {
  if (tokens.size() > static_cast<std::size_t>(p.config.max_context)) {
    throw Error(ErrorKind::Context, "sequence length exceeds max_context " + std::to_string(p.config.max_context));
  }
  ForwardCache local(p.config);
  ForwardCache& c = cache != nullptr ? *cache : local;
  std::vector<QuantileForecast> out;
  out.reserve(tokens.size());
  for (const auto& tok : tokens) out.push_back(forward_step(p, tok, c, dropout));
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

// y = W x + b: accumulates dW, db and returns dx.
inline void linear_backward(const Tensor& w, const double* x, const double* dy, Tensor& gw, Tensor& gb, double* dx) {
  const std::size_t out = w.rows();
  const std::size_t in = w.cols();
  if (dx != nullptr) std::fill(dx, dx + in, 0.0);
  for (std::size_t i = 0; i < out; ++i) {
    const double gi = dy[i];
    gb.data[i] += gi;
    double* grow = gw.row(i);
    const double* row = w.row(i);
    for (std::size_t j = 0; j < in; ++j) {
      grow[j] += gi * x[j];
      if (dx != nullptr) dx[j] += gi * row[j];
    }
  }
}

inline std::vector<double> layer_norm_backward(const std::vector<double>& xhat, double rstd, const Tensor& g,
                                               const std::vector<double>& dy, Tensor& gg, Tensor& gb) {
  const std::size_t n = xhat.size();
  std::vector<double> dxhat(n);
  double m1 = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    gg.data[i] += dy[i] * xhat[i];
    gb.data[i] += dy[i];
    dxhat[i] = dy[i] * g.data[i];
    m1 += dxhat[i];
    m2 += dxhat[i] * xhat[i];
  }
  m1 /= static_cast<double>(n);
  m2 /= static_cast<double>(n);
  std::vector<double> dx(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
  return dx;
}

}  // namespace detail

/// Back-propagates head-output gradients through a cache built with
/// keep_activations. Accumulates into `grads` (shaped like p.weights) and
/// returns d(loss)/d(token) per position.
inline std::vector<std::vector<double>> backward(const ModelParams& p, const ForwardCache& c,
                                                 const std::vector<QuantileForecast>& d_out, ParamSet& grads) {
  require(c.keep_activations, ErrorKind::Parameter, "backward needs a training cache");
  require(d_out.size() == c.length, ErrorKind::Parameter, "gradient count differs from sequence length");
  const auto& cfg = p.config;
  const auto& w = p.weights;
  const auto& sl = p.slots;
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto f = static_cast<std::size_t>(cfg.ff());
  const auto nh = static_cast<std::size_t>(cfg.heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t T = c.length;

  std::vector<std::vector<double>> dx(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto& xf = c.xhat_f[t];
    std::vector<double> fin(d);
    for (std::size_t i = 0; i < d; ++i) fin[i] = w[sl.lnf_g].data[i] * xf[i] + w[sl.lnf_b].data[i];
    std::vector<double> dfin(d, 0.0), tmp(d);
    detail::linear_backward(w[sl.point_w], fin.data(), &d_out[t].point, grads[sl.point_w], grads[sl.point_b],
                            tmp.data());
    for (std::size_t i = 0; i < d; ++i) dfin[i] += tmp[i];
    detail::linear_backward(w[sl.q_w], fin.data(), d_out[t].q.data(), grads[sl.q_w], grads[sl.q_b], tmp.data());
    for (std::size_t i = 0; i < d; ++i) dfin[i] += tmp[i];
    dx[t] = detail::layer_norm_backward(xf, c.rstd_f[t], w[sl.lnf_g], dfin, grads[sl.lnf_g], grads[sl.lnf_b]);
  }

  for (std::size_t li = c.layers.size(); li-- > 0;) {
    const auto& s = sl.layers[li];
    const auto& lc = c.layers[li];
    std::vector<std::vector<double>> dmid(T);
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> dff(d);
      for (std::size_t i = 0; i < d; ++i) dff[i] = lc.mask_ff[t].empty() ? dx[t][i] : lc.mask_ff[t][i] * dx[t][i];
      std::vector<double> dg(f);
      detail::linear_backward(w[s.ff2_w], lc.g[t].data(), dff.data(), grads[s.ff2_w], grads[s.ff2_b], dg.data());
      for (std::size_t i = 0; i < f; ++i) dg[i] *= gelu_grad(lc.h[t][i]);
      std::vector<double> bvec(d), db(d);
      for (std::size_t i = 0; i < d; ++i) bvec[i] = w[s.ln2_g].data[i] * lc.xhat2[t][i] + w[s.ln2_b].data[i];
      detail::linear_backward(w[s.ff1_w], bvec.data(), dg.data(), grads[s.ff1_w], grads[s.ff1_b], db.data());
      auto dln = detail::layer_norm_backward(lc.xhat2[t], lc.rstd2[t], w[s.ln2_g], db, grads[s.ln2_g], grads[s.ln2_b]);
      dmid[t] = dx[t];
      for (std::size_t i = 0; i < d; ++i) dmid[t][i] += dln[i];
    }
    std::vector<std::vector<double>> dqkv(T, std::vector<double>(3 * d, 0.0));
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> dattn(d), dout(d);
      for (std::size_t i = 0; i < d; ++i) dattn[i] = lc.mask_attn[t].empty() ? dmid[t][i] : lc.mask_attn[t][i] * dmid[t][i];
      detail::linear_backward(w[s.out_w], lc.o[t].data(), dattn.data(), grads[s.out_w], grads[s.out_b], dout.data());
      const auto& qt = lc.qkv[t];
      for (std::size_t hd = 0; hd < nh; ++hd) {
        const double* pr = lc.probs[t].data() + hd * (t + 1);
        const double* dov = dout.data() + hd * dh;
        std::vector<double> dp(t + 1);
        double sum = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* v = lc.qkv[u].data() + 2 * d + hd * dh;
          double acc = 0.0;
          for (std::size_t j = 0; j < dh; ++j) acc += dov[j] * v[j];
          dp[u] = acc;
          sum += pr[u] * acc;
          double* dv = dqkv[u].data() + 2 * d + hd * dh;
          for (std::size_t j = 0; j < dh; ++j) dv[j] += pr[u] * dov[j];
        }
        double* dq = dqkv[t].data() + hd * dh;
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = pr[u] * (dp[u] - sum) * scale;
          if (ds == 0.0) continue;
          const double* k = lc.qkv[u].data() + d + hd * dh;
          double* dk = dqkv[u].data() + d + hd * dh;
          for (std::size_t j = 0; j < dh; ++j) {
            dq[j] += ds * k[j];
            dk[j] += ds * qt[hd * dh + j];
          }
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> a(d), da(d);
      for (std::size_t i = 0; i < d; ++i) a[i] = w[s.ln1_g].data[i] * lc.xhat1[t][i] + w[s.ln1_b].data[i];
      detail::linear_backward(w[s.qkv_w], a.data(), dqkv[t].data(), grads[s.qkv_w], grads[s.qkv_b], da.data());
      auto dln = detail::layer_norm_backward(lc.xhat1[t], lc.rstd1[t], w[s.ln1_g], da, grads[s.ln1_g], grads[s.ln1_b]);
      dx[t] = dmid[t];
      for (std::size_t i = 0; i < d; ++i) dx[t][i] += dln[i];
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Sequence loss
// ---------------------------------------------------------------------------

/// Mean of loss_joint over positions first..n-2 (output j scored against
/// targets[j+1]); fills d_out with the matching (sub)gradients when given.
inline double sequence_loss(const std::vector<QuantileForecast>& out, const std::vector<double>& targets,
                            std::size_t first, std::vector<QuantileForecast>* d_out = nullptr, double weight = 1.0) {
  require(out.size() == targets.size() && first + 1 < out.size(), ErrorKind::Parameter,
          "sequence_loss needs at least one forecast position");
  const double n = static_cast<double>(out.size() - 1 - first);
  if (d_out != nullptr) d_out->assign(out.size(), QuantileForecast{});
  double total = 0.0;
  for (std::size_t j = first; j + 1 < out.size(); ++j) {
    const double y = targets[j + 1];
    total += loss_joint(out[j], y);
    if (d_out != nullptr) {
      auto& g = (*d_out)[j];
      g.point = weight * (out[j].point - y) / n;
      for (std::size_t k = 0; k < kNumLevels; ++k) {
        const double u = y - out[j].q[k];
        g.q[k] = weight * ((u < 0.0 ? 1.0 : 0.0) - kQuantileLevels[k]) / n;
      }
    }
  }
  return total / n;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>) {
    std::memcpy(&bits, &v, sizeof(double));
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  require(static_cast<bool>(in), ErrorKind::Io, "truncated model file");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  if constexpr (std::is_same_v<T, double>) {
    double v;
    std::memcpy(&v, &bits, sizeof(double));
    return v;
  } else {
    return static_cast<T>(bits);
  }
}

}  // namespace detail

/// Binary container: "SAGA", u32 version, u64 tensor count, then per tensor
/// u32 name length, name bytes, u32 rank, u64 dims, u64 value count and
/// little-endian doubles. Tokenizer tables come first.
inline void write_model_binary(std::ostream& out, const ModelParams& p) {
  out.write("SAGA", 4);
  detail::put_le<std::uint32_t>(out, kModelFormatVersion);
  const auto& a = p.tokenizer.weights.tensors();
  const auto& b = p.weights.tensors();
  detail::put_le<std::uint64_t>(out, a.size() + b.size());
  auto emit = [&](const Tensor& t) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto s : t.shape) detail::put_le<std::uint64_t>(out, s);
    detail::put_le<std::uint64_t>(out, t.data.size());
    for (double v : t.data) detail::put_le<double>(out, v);
  };
  for (const auto& t : a) emit(t);
  for (const auto& t : b) emit(t);
}

inline std::vector<Tensor> read_tensors_binary(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  require(static_cast<bool>(in) && std::string(magic, 4) == "SAGA", ErrorKind::Io, "bad model magic");
  const auto version = detail::get_le<std::uint32_t>(in);
  require(version == kModelFormatVersion, ErrorKind::Io, "unsupported model version " + std::to_string(version));
  const auto n = detail::get_le<std::uint64_t>(in);
  std::vector<Tensor> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    Tensor t;
    const auto len = detail::get_le<std::uint32_t>(in);
    t.name.resize(len);
    in.read(t.name.data(), len);
    const auto rank = detail::get_le<std::uint32_t>(in);
    std::size_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(detail::get_le<std::uint64_t>(in));
      count *= t.shape.back();
    }
    const auto values = detail::get_le<std::uint64_t>(in);
    require(values == count, ErrorKind::Io, "tensor value count does not match shape: " + t.name);
    t.data.resize(values);
    for (auto& v : t.data) v = detail::get_le<double>(in);
    out.push_back(std::move(t));
  }
  return out;
}

inline nlohmann::json to_json(const ToyTransformerConfig& c) {
  return {{"layers", c.layers},         {"heads", c.heads},     {"model_dim", c.model_dim},
          {"ff_dim", c.ff()},           {"max_context", c.max_context}, {"dropout", c.dropout},
          {"stochastic_depth", c.stochastic_depth}, {"seed", c.seed}};
}

inline ToyTransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  ToyTransformerConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.stochastic_depth = j.at("stochastic_depth").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

/// Manifest: configs, tokenizer statistics and every tensor's shape.
inline nlohmann::json model_manifest(const ModelParams& p) {
  nlohmann::json tok = to_json(p.tokenizer);
  tok.erase("tables");
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto* set : {&p.tokenizer.weights, &p.weights}) {
    for (const auto& t : set->tensors()) shapes.push_back({{"name", t.name}, {"shape", t.shape}});
  }
  return {{"format", "SAGA"},
          {"version", kModelFormatVersion},
          {"transformer", to_json(p.config)},
          {"tokenizer", tok},
          {"tensors", shapes},
          {"parameter_count", p.tokenizer.weights.parameter_count() + p.weights.parameter_count()}};
}

inline ModelParams read_model(std::istream& binary, const nlohmann::json& manifest) {
  auto tensors = read_tensors_binary(binary);
  ModelParams p;
  p.config = transformer_config_from_json(manifest.at("transformer"));
  nlohmann::json tok = manifest.at("tokenizer");
  tok["tables"] = nlohmann::json::array();
  p.tokenizer = tokenizer_from_json(tok);
  for (auto& t : tensors) {
    auto& dst = t.name.rfind("tok.", 0) == 0 ? p.tokenizer.weights : p.weights;
    const auto i = dst.add(t.name, t.shape);
    dst[i].data = std::move(t.data);
  }
  detail::index_tokenizer(p.tokenizer);
  detail::index_model(p);
  return p;
}

}  // namespace earnlab
