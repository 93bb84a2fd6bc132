#pragma once

// Teacher-forced training of the toy transformer: AdamW with linear warmup
// and cosine decay, global-norm clipping, early stopping on validation
// pinball loss.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <vector>

#include "earnlab/transformer.hpp"

namespace earnlab {

struct TrainOptions {
  int max_steps = 600;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double min_lr_ratio = 0.05;
  int warmup_steps = 50;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 1.0;  // <= 0 disables clipping
  int eval_every = 50;
  int patience = 5;
  double validation_fraction = 0.1;
  std::size_t max_validation = 256;
  double head_init_scale = 0.1;

  void validate() const {
    require(max_steps >= 0 && batch_size >= 1 && warmup_steps >= 0 && eval_every >= 1 && patience >= 1,
            ErrorKind::Parameter, "invalid training schedule");
    require(learning_rate >= 0.0 && weight_decay >= 0.0, ErrorKind::Parameter, "learning rate and decay must be >= 0");
    require(validation_fraction >= 0.0 && validation_fraction < 1.0, ErrorKind::Parameter,
            "validation_fraction must be in [0,1)");
  }
};

struct TrainReport {
  std::vector<double> step_loss;
  std::vector<std::pair<int, double>> validation;
  int steps = 0;
  int best_step = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  std::size_t train_sequences = 0;
  std::size_t validation_sequences = 0;
};

/// A tokenizable training sequence: prepared records plus log-earnings
/// targets. Outputs at positions >= first are scored.
struct Sequence {
  std::int64_t id = 0;
  std::vector<TokenInput> inputs;
  std::vector<double> targets;
  std::size_t first = 0;
};

inline std::vector<Sequence> prepare_sequences(const Panel& panel, const TokenizerState& tok, int max_context) {
  std::vector<Sequence> out;
  for (const auto& h : panel) {
    const std::size_t len = std::min(h.records.size(), static_cast<std::size_t>(max_context));
    const auto c = static_cast<std::size_t>(std::max(1, h.conditioning_len));
    if (len <= c) continue;
    Sequence s;
    s.id = h.id;
    s.first = c - 1;
    for (std::size_t j = 0; j < len; ++j) {
      s.inputs.push_back(prepare_token(h.records[j], tok));
      s.targets.push_back(log_earnings(h.records[j].earnings));
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct SequenceEval {
  std::vector<std::vector<double>> concat;
  std::vector<std::vector<double>> tokens;
};

inline SequenceEval embed_sequence(const Sequence& s, const TokenizerState& tok) {
  SequenceEval e;
  for (const auto& in : s.inputs) {
    e.concat.push_back(embed_token(in, tok));
    e.tokens.push_back(project_token(e.concat.back(), tok));
  }
  return e;
}

/// Loss of one sequence; when grads are given, accumulates weight * d(loss).
inline double sequence_loss_and_grad(const ModelParams& p, const Sequence& s, ParamSet* model_grads,
                                     ParamSet* tok_grads, double weight = 1.0, Rng* dropout = nullptr) {
  auto e = embed_sequence(s, p.tokenizer);
  ForwardCache cache(p.config, model_grads != nullptr);
  const auto out = forward(p, e.tokens, &cache, dropout);
  if (model_grads == nullptr) return sequence_loss(out, s.targets, s.first);
  std::vector<QuantileForecast> d_out;
  const double loss = sequence_loss(out, s.targets, s.first, &d_out, weight);
  const auto d_tok = backward(p, cache, d_out, *model_grads);
  for (std::size_t j = 0; j < s.inputs.size(); ++j) {
    tokenize_backward(s.inputs[j], e.concat[j], d_tok[j], p.tokenizer, *tok_grads);
  }
  return loss;
}

/// Mean per-position pinball sum (quantile head only, rearranged).
inline double validation_pinball(const ModelParams& p, const std::vector<Sequence>& seqs) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : seqs) {
    const auto e = embed_sequence(s, p.tokenizer);
    const auto out = forward(p, e.tokens);
    for (std::size_t j = s.first; j + 1 < out.size(); ++j) {
      total += pinball_sum(rearrange_quantiles(out[j].q), s.targets[j + 1]);
      ++n;
    }
  }
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

class AdamW {
 public:
  AdamW(const ParamSet& like, const TrainOptions& opt) : m_(like.zeros_like()), v_(like.zeros_like()), opt_(opt) {}

  void step(ParamSet& w, const ParamSet& g, double lr, int t) {
    const double b1 = opt_.beta1;
    const double b2 = opt_.beta2;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < w.count(); ++i) {
      auto& wt = w[i].data;
      const auto& gt = g[i].data;
      auto& mt = m_[i].data;
      auto& vt = v_[i].data;
      const double decay = w[i].shape.size() >= 2 ? opt_.weight_decay : 0.0;
      for (std::size_t k = 0; k < wt.size(); ++k) {
        mt[k] = b1 * mt[k] + (1.0 - b1) * gt[k];
        vt[k] = b2 * vt[k] + (1.0 - b2) * gt[k] * gt[k];
        const double mh = mt[k] / c1;
        const double vh = vt[k] / c2;
        wt[k] -= lr * (mh / (std::sqrt(vh) + opt_.epsilon) + decay * wt[k]);
      }
    }
  }

 private:
  ParamSet m_, v_;
  TrainOptions opt_;
};

inline double scheduled_lr(const TrainOptions& o, int step) {
  if (o.warmup_steps > 0 && step < o.warmup_steps) {
    return o.learning_rate * static_cast<double>(step + 1) / static_cast<double>(o.warmup_steps);
  }
  const int span = std::max(1, o.max_steps - o.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - o.warmup_steps) / static_cast<double>(span));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return o.learning_rate * (o.min_lr_ratio + (1.0 - o.min_lr_ratio) * cosine);
}

/// Point bias <- mean target, quantile biases <- marginal target quantiles,
/// head weights scaled down so training starts near the marginal forecast.
inline void init_heads(ModelParams& p, const std::vector<Sequence>& seqs, double weight_scale) {
  std::vector<double> y;
  for (const auto& s : seqs) {
    for (std::size_t j = s.first + 1; j < s.targets.size(); ++j) y.push_back(s.targets[j]);
  }
  if (y.empty()) return;
  std::sort(y.begin(), y.end());
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  p.weights[p.slots.point_b].data[0] = mean;
  for (std::size_t k = 0; k < kNumLevels; ++k) p.weights[p.slots.q_b].data[k] = sorted_quantile(y, kQuantileLevels[k]);
  for (auto idx : {p.slots.point_w, p.slots.q_w}) {
    for (auto& v : p.weights[idx].data) v *= weight_scale;
  }
}

/// Age/year embedding rows never visited by a training record are set to
/// the mean of the visited rows.
inline void fill_unvisited_rows(TokenizerState& tok, const std::vector<Sequence>& seqs) {
  std::set<int> ages;
  std::set<int> years;
  for (const auto& s : seqs) {
    for (const auto& in : s.inputs) {
      ages.insert(in.age_row);
      years.insert(in.year_row);
    }
  }
  auto fill = [](Tensor& t, const std::set<int>& used) {
    if (used.empty()) return;
    std::vector<double> mean(t.cols(), 0.0);
    for (int r : used) {
      for (std::size_t j = 0; j < t.cols(); ++j) mean[j] += t.row(static_cast<std::size_t>(r))[j];
    }
    for (auto& v : mean) v /= static_cast<double>(used.size());
    for (std::size_t r = 0; r < t.rows(); ++r) {
      if (used.count(static_cast<int>(r)) != 0) continue;
      std::copy(mean.begin(), mean.end(), t.row(r));
    }
  };
  fill(tok.weights[tok.age_t], ages);
  fill(tok.weights[tok.year_t], years);
}

/// Trains on `panel` (individuals with more than conditioning_len records).
/// A seeded fraction of individuals is held out for early stopping; the
/// best-validation parameters are returned.
inline std::pair<ModelParams, TrainReport> train_toy(const Panel& panel, TokenizerState tokenizer,
                                                     const ToyTransformerConfig& cfg, const TrainOptions& opt,
                                                     std::uint64_t seed) {
  opt.validate();
  ModelParams p = make_model(cfg, std::move(tokenizer));
  auto all = prepare_sequences(panel, p.tokenizer, cfg.max_context);
  require(!all.empty(), ErrorKind::Parameter, "no training sequence is longer than its conditioning window");
  std::vector<Sequence> train, valid;
  for (auto& s : all) {
    Rng r(seed, {s.id, stream::kShuffle});
    if (opt.validation_fraction > 0.0 && r.uniform() < opt.validation_fraction && valid.size() < opt.max_validation) {
      valid.push_back(std::move(s));
    } else {
      train.push_back(std::move(s));
    }
  }
  require(!train.empty(), ErrorKind::Parameter, "validation split left no training sequences");
  init_heads(p, train, opt.head_init_scale);

  TrainReport rep;
  rep.train_sequences = train.size();
  rep.validation_sequences = valid.size();
  AdamW adam_model(p.weights, opt);
  AdamW adam_tok(p.tokenizer.weights, opt);
  ParamSet gm = p.weights.zeros_like();
  ParamSet gt = p.tokenizer.weights.zeros_like();
  ModelParams best = p;
  int bad_evals = 0;
  const bool use_dropout = cfg.dropout > 0.0 || cfg.stochastic_depth > 0.0;
  const double w = 1.0 / static_cast<double>(opt.batch_size);

  for (int step = 0; step < opt.max_steps; ++step) {
    gm.set_zero();
    gt.set_zero();
    Rng pick(seed, {step, stream::kTraining});
    double loss = 0.0;
    for (int b = 0; b < opt.batch_size; ++b) {
      const auto& s = train[pick.below(train.size())];
      Rng drop(seed, {step, b, stream::kTraining, 1});
      loss += w * sequence_loss_and_grad(p, s, &gm, &gt, w, use_dropout ? &drop : nullptr);
    }
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::Numeric, "non-finite training loss at step " + std::to_string(step));
    }
    rep.step_loss.push_back(loss);
    if (opt.grad_clip > 0.0) {
      double norm2 = 0.0;
      for (const auto* g : {&gm, &gt}) {
        for (const auto& t : g->tensors()) {
          for (double v : t.data) norm2 += v * v;
        }
      }
      const double norm = std::sqrt(norm2);
      if (norm > opt.grad_clip) {
        const double f = opt.grad_clip / norm;
        for (auto* g : {&gm, &gt}) {
          for (auto& t : g->tensors()) {
            for (auto& v : t.data) v *= f;
          }
        }
      }
    }
    const double lr = scheduled_lr(opt, step);
    adam_model.step(p.weights, gm, lr, step + 1);
    adam_tok.step(p.tokenizer.weights, gt, lr, step + 1);
    rep.steps = step + 1;

    if (!valid.empty() && ((step + 1) % opt.eval_every == 0 || step + 1 == opt.max_steps)) {
      const double v = validation_pinball(p, valid);
      if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "non-finite validation loss at step " + std::to_string(step));
      rep.validation.emplace_back(step + 1, v);
      if (v < rep.best_validation) {
        rep.best_validation = v;
        rep.best_step = step + 1;
        best = p;
        bad_evals = 0;
      } else if (++bad_evals >= opt.patience) {
        rep.early_stopped = true;
        break;
      }
    }
  }
  if (valid.empty()) {
    best = p;
    rep.best_step = rep.steps;
  }
  fill_unvisited_rows(best.tokenizer, train);
  return {std::move(best), rep};
}

}  // namespace earnlab
