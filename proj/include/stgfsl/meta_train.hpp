#pragma once

// Episodic meta-training with the joint loss L = L_e + λ·L_g, target
// adaptation, and horizon-wise evaluation.
//
// Second-order meta-gradients are exact: with θ_{j+1} = θ_j − α∇L_S(θ_j),
//   ∇_θ L_Q(θ_k) = (I − αH_S(θ_0)) ··· (I − αH_S(θ_{k−1})) ∇L_Q(θ_k),
// and every H_S·v product is taken by running the reverse-mode tape over dual
// numbers whose tangents carry v.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stgfsl/autodiff.hpp"
#include "stgfsl/graph_data.hpp"
#include "stgfsl/graph_recon.hpp"
#include "stgfsl/params.hpp"
#include "stgfsl/stnn.hpp"

namespace stgfsl {

inline constexpr double kDivergenceBound = 1e6;

struct MetaConfig {
  double alpha = 0.01;   // inner learning rate
  double beta = 0.001;   // outer learning rate
  double lambda = 1.5;   // L_g weight
  int inner_steps = 1;
  int k_support = 4;
  int k_query = 4;
  int task_batch = 5;
  bool second_order = true;
  bool normalize_recon = false;
  std::uint64_t seed = 0;
  int max_episodes = 500;
  double lr_decay = 0.99;  // outer step size multiplier ...
  int decay_every = 100;   // ... applied every this many episodes
};

// λ actually used: the M3 ablation removes the reconstruction term.
inline double effective_lambda(const MetaConfig& c, const ModelConfig& m) {
  return m.ablation == Ablation::m3 ? 0.0 : c.lambda;
}

inline void validate(const MetaConfig& c) {
  if (!(c.alpha >= 0.0) || !(c.beta >= 0.0)) throw ConfigError("meta.alpha and meta.beta must be nonnegative");
  if (!(c.lambda >= 0.0)) throw ConfigError("meta.lambda must be nonnegative");
  if (c.inner_steps < 0 || c.k_support < 1 || c.k_query < 1 || c.task_batch < 1 || c.max_episodes < 0)
    throw ConfigError("meta step/sample counts out of range");
}

// Normalized windows of one city, ready for task sampling or adaptation.
struct TrainingCity {
  std::string name;
  const CityGraph* graph = nullptr;
  std::vector<WindowSample> windows;
};

struct Task {
  std::string city_name;
  std::size_t city_index = 0;
  std::vector<WindowSample> support;
  std::vector<WindowSample> query;
};

struct LossParts {
  double total = 0.0;
  double le = 0.0;
  double lg = 0.0;
};

// ---- task sampling ---------------------------------------------------------

inline std::vector<Task> sample_tasks(const std::vector<TrainingCity>& sources, const MetaConfig& cfg,
                                      std::mt19937_64& rng) {
  if (sources.empty()) throw SamplingError("no source cities to sample tasks from");
  std::vector<Task> tasks;
  const std::size_t need = static_cast<std::size_t>(cfg.k_support + cfg.k_query);
  std::uniform_int_distribution<std::size_t> pick_city(0, sources.size() - 1);
  for (int b = 0; b < cfg.task_batch; ++b) {
    const std::size_t c = pick_city(rng);
    const TrainingCity& city = sources[c];
    if (city.windows.size() < need)
      throw SamplingError("city " + city.name + " has " + std::to_string(city.windows.size()) + " windows, need " +
                          std::to_string(need));
    // partial Fisher-Yates: first `need` entries are a uniform sample without replacement
    std::vector<std::size_t> idx(city.windows.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t k = 0; k < need; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
      std::swap(idx[k], idx[pick(rng)]);
    }
    Task t{city.name, c, {}, {}};
    for (std::size_t k = 0; k < need; ++k)
      (k < static_cast<std::size_t>(cfg.k_support) ? t.support : t.query).push_back(city.windows[idx[k]]);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

// ---- loss, gradients, Hessian-vector products --------------------------------

namespace train_detail {

template <class S>
struct LossVars {
  ad::Var<S> total, le, lg;
};

template <class S>
LossVars<S> joint_loss_vars(ad::Tape<S>& t, const BoundParams<S>& p, const Batch& batch, CityContext& ctx,
                            const ModelConfig& mc, double lambda, bool normalize) {
  const auto fwd = stnn::forward(p, t.constant(batch.x.cast<S>()), batch.windows, ctx, mc);
  const ad::Var<S> err = ad::sub(fwd.prediction, t.constant(batch.y.cast<S>()));
  const ad::Var<S> le = ad::scale(ad::sum_squares(err), 1.0 / static_cast<double>(batch.y.size()));
  const ad::Var<S> lg = recon::recon_loss(fwd.a_meta, ctx.target_adjacency, normalize);
  return {ad::add(le, ad::scale(lg, lambda)), le, lg};
}

inline std::vector<const WindowSample*> pointers(const std::vector<WindowSample>& ws) {
  std::vector<const WindowSample*> out;
  out.reserve(ws.size());
  for (const auto& w : ws) out.push_back(&w);
  return out;
}

}  // namespace train_detail

struct LossSettings {
  double lambda = 1.5;
  bool normalize = false;
};

inline LossSettings loss_settings(const MetaConfig& c, const ModelConfig& m) {
  return {effective_lambda(c, m), c.normalize_recon};
}

// L_e = mean squared error over windows and all M·N·d entries; L_g = mean
// over windows of the reconstruction loss; total = L_e + λ·L_g.
inline LossParts joint_loss(const Params& theta, const std::vector<const WindowSample*>& windows, CityContext& ctx,
                            const ModelConfig& mc, const LossSettings& ls) {
  if (windows.empty()) throw ContractError("joint_loss: no windows");
  const Batch b = make_batch(windows, ctx.graph->num_nodes, mc.feature_dim);
  ad::Tape<double> t;
  const BoundParams<double> p(t, theta, false);
  const auto l = train_detail::joint_loss_vars(t, p, b, ctx, mc, ls.lambda, ls.normalize);
  return {l.total.value()(0, 0), l.le.value()(0, 0), l.lg.value()(0, 0)};
}

inline LossParts joint_loss(const Params& theta, const std::vector<WindowSample>& windows, CityContext& ctx,
                            const ModelConfig& mc, const LossSettings& ls) {
  return joint_loss(theta, train_detail::pointers(windows), ctx, mc, ls);
}

struct LossGrad {
  LossParts loss;
  Params grad;
};

inline LossGrad loss_and_grad(const Params& theta, const std::vector<const WindowSample*>& windows, CityContext& ctx,
                              const ModelConfig& mc, const LossSettings& ls) {
  if (windows.empty()) throw ContractError("loss_and_grad: no windows");
  const Batch b = make_batch(windows, ctx.graph->num_nodes, mc.feature_dim);
  ad::Tape<double> t;
  const BoundParams<double> p(t, theta, true);
  const auto l = train_detail::joint_loss_vars(t, p, b, ctx, mc, ls.lambda, ls.normalize);
  t.backward(l.total);
  return {{l.total.value()(0, 0), l.le.value()(0, 0), l.lg.value()(0, 0)}, p.gradients(t)};
}

inline LossGrad loss_and_grad(const Params& theta, const std::vector<WindowSample>& windows, CityContext& ctx,
                              const ModelConfig& mc, const LossSettings& ls) {
  return loss_and_grad(theta, train_detail::pointers(windows), ctx, mc, ls);
}

// H(θ)·v of the joint loss over `windows`.
inline Params hessian_vector(const Params& theta, const Params& v, const std::vector<WindowSample>& windows,
                             CityContext& ctx, const ModelConfig& mc, const LossSettings& ls) {
  const Batch b = make_batch(train_detail::pointers(windows), ctx.graph->num_nodes, mc.feature_dim);
  ad::Tape<Dual> t;
  const ParamVector<Dual> theta_dual = make_dual(theta, v);
  const BoundParams<Dual> p(t, theta_dual, true);
  const auto l = train_detail::joint_loss_vars(t, p, b, ctx, mc, ls.lambda, ls.normalize);
  t.backward(l.total);
  const ParamVector<Dual> g = p.gradients(t);
  Params hv = theta.zeros_like();
  for (std::size_t i = 0; i < hv.num_segments(); ++i) {
    const Mat<Dual>& gi = g.segment(i);
    MatD& out = hv.segment(i);
    for (Eigen::Index k = 0; k < gi.size(); ++k) out.data()[k] = gi.data()[k].d;
  }
  return hv;
}

inline void check_divergence(const LossParts& l, long episode) {
  if (!std::isfinite(l.total) || l.total > kDivergenceBound)
    throw DivergenceError("loss diverged to " + std::to_string(l.total), episode);
}

// ---- inner loop ------------------------------------------------------------

struct InnerResult {
  Params adapted;                 // θ′
  std::vector<Params> trajectory;  // θ_0 … θ_{k−1}
  LossParts support_loss;          // at θ_0
};

inline InnerResult inner_adapt(const Params& theta, const Task& task, CityContext& ctx, const ModelConfig& mc,
                               const MetaConfig& cfg, long episode = 0) {
  if (task.support.empty()) throw ContractError("inner_adapt: empty support set");
  const LossSettings ls = loss_settings(cfg, mc);
  InnerResult r{theta, {}, {}};
  if (cfg.inner_steps == 0) {
    r.support_loss = joint_loss(theta, task.support, ctx, mc, ls);
    check_divergence(r.support_loss, episode);
    return r;
  }
  for (int s = 0; s < cfg.inner_steps; ++s) {
    LossGrad lg = loss_and_grad(r.adapted, task.support, ctx, mc, ls);
    check_divergence(lg.loss, episode);
    if (s == 0) r.support_loss = lg.loss;
    r.trajectory.push_back(r.adapted);
    r.adapted.axpy(-cfg.alpha, lg.grad);
  }
  return r;
}

struct MetaGradient {
  Params grad;
  LossParts support_loss;
  LossParts query_loss;
};

// Gradient of the query loss at θ′ with respect to θ. First-order mode drops
// the Hessian terms.
inline MetaGradient meta_gradient(const Params& theta, const Task& task, CityContext& ctx, const ModelConfig& mc,
                                  const MetaConfig& cfg, long episode = 0) {
  if (task.query.empty()) throw ContractError("meta_gradient: empty query set");
  const LossSettings ls = loss_settings(cfg, mc);
  InnerResult inner = inner_adapt(theta, task, ctx, mc, cfg, episode);
  LossGrad q = loss_and_grad(inner.adapted, task.query, ctx, mc, ls);
  check_divergence(q.loss, episode);
  Params g = std::move(q.grad);
  if (cfg.second_order && cfg.alpha != 0.0)
    for (std::size_t j = inner.trajectory.size(); j-- > 0;)
      g.axpy(-cfg.alpha, hessian_vector(inner.trajectory[j], g, task.support, ctx, mc, ls));
  return {std::move(g), inner.support_loss, q.loss};
}

// ---- outer optimizer -------------------------------------------------------

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long steps = 0;
  Params m, v;

  void step(Params& theta, const Params& grad, double lr) {
    if (m.num_segments() == 0 || m.names() != theta.names()) {
      // new segments (e.g. embeddings) restart the moments
      m = theta.zeros_like();
      v = theta.zeros_like();
      steps = 0;
    }
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (std::size_t i = 0; i < theta.num_segments(); ++i) {
      const MatD& g = grad.segment(i);
      MatD& mi = m.segment(i);
      MatD& vi = v.segment(i);
      mi = beta1 * mi + (1.0 - beta1) * g;
      vi = beta2 * vi + (1.0 - beta2) * g.cwiseAbs2();
      theta.segment(i).array() -= lr * (mi.array() / c1) / ((vi.array() / c2).sqrt() + eps);
    }
  }
};

inline double outer_rate(const MetaConfig& cfg, long episode) {
  const long k = cfg.decay_every > 0 ? episode / cfg.decay_every : 0;
  return cfg.beta * std::pow(cfg.lr_decay, static_cast<double>(k));
}

struct TrainLogRow {
  long episode = 0;
  std::string city;
  double support_loss = 0.0;
  double query_loss = 0.0;
  double le = 0.0;  // query L_e
  double lg = 0.0;  // query L_g
};

// Per-city forward contexts (graph, cached neighborhoods) keyed by name.
class ContextCache {
 public:
  CityContext& get(const std::string& name, const CityGraph& g) {
    auto it = contexts_.find(name);
    if (it == contexts_.end()) it = contexts_.emplace(name, CityContext(name, g)).first;
    return it->second;
  }

 private:
  std::map<std::string, CityContext> contexts_;
};

// One outer update: Σ over tasks of the meta-gradients, then an Adam step.
inline std::vector<TrainLogRow> meta_step(Params& theta, const std::vector<Task>& tasks,
                                          const std::vector<TrainingCity>& sources, ContextCache& contexts,
                                          Adam& opt, const ModelConfig& mc, const MetaConfig& cfg, long episode) {
  if (tasks.empty()) throw ContractError("meta_step: empty task batch");
  Params total = theta.zeros_like();
  std::vector<TrainLogRow> rows;
  for (const Task& task : tasks) {
    CityContext& ctx = contexts.get(task.city_name, *sources.at(task.city_index).graph);
    MetaGradient mg = meta_gradient(theta, task, ctx, mc, cfg, episode);
    total.axpy(1.0, mg.grad);
    rows.push_back({episode, task.city_name, mg.support_loss.total, mg.query_loss.total, mg.query_loss.le,
                    mg.query_loss.lg});
  }
  opt.step(theta, total, outer_rate(cfg, episode));
  return rows;
}

class TrainingAborted : public DivergenceError {
 public:
  TrainingAborted(const DivergenceError& e, std::vector<TrainLogRow> log)
      : DivergenceError(e), log_(std::move(log)) {}
  const std::vector<TrainLogRow>& log() const { return log_; }

 private:
  std::vector<TrainLogRow> log_;
};

struct TrainResult {
  Params theta;
  std::vector<TrainLogRow> log;
};

inline std::vector<std::pair<std::string, int>> city_sizes(const std::vector<TrainingCity>& cities) {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& c : cities) out.emplace_back(c.name, c.graph->num_nodes);
  return out;
}

// Meta-trains from `init` (or a fresh initialization drawn from cfg.seed).
inline TrainResult train(const std::vector<TrainingCity>& sources, const ModelConfig& mc, const MetaConfig& cfg,
                         const Params* init = nullptr) {
  validate(cfg);
  if (sources.empty()) throw SamplingError("train: no source cities");
  std::mt19937_64 init_rng(cfg.seed * 2654435761ULL + 1);
  TrainResult r{init ? *init : init_params(mc, init_rng, city_sizes(sources)), {}};
  for (const auto& c : sources) ensure_city_embedding(r.theta, mc, c.name, c.graph->num_nodes, init_rng);
  std::mt19937_64 task_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 7);
  ContextCache contexts;
  Adam opt;
  for (long ep = 0; ep < cfg.max_episodes; ++ep) {
    const auto tasks = sample_tasks(sources, cfg, task_rng);
    try {
      auto rows = meta_step(r.theta, tasks, sources, contexts, opt, mc, cfg, ep);
      r.log.insert(r.log.end(), rows.begin(), rows.end());
    } catch (const DivergenceError& e) {
      throw TrainingAborted(e, r.log);
    }
  }
  return r;
}

// ---- target adaptation -----------------------------------------------------

struct AdaptConfig {
  int steps = 100;
  int batch = 16;
  double rate = 0.01;  // plain gradient descent step size
  int eval_every = 20;  // full adapt-set loss checkpoints
  std::uint64_t seed = 0;
};

struct AdaptLogRow {
  int step = 0;
  double batch_loss = 0.0;
  double best_full_loss = 0.0;  // best full adapt-set loss seen so far
};

struct AdaptResult {
  Params theta;
  double initial_loss = 0.0;  // full adapt set, before adaptation
  double final_loss = 0.0;    // full adapt set, returned parameters
  std::vector<AdaptLogRow> log;
};

inline LossParts dataset_loss(const Params& theta, const std::vector<WindowSample>& windows, CityContext& ctx,
                              const ModelConfig& mc, const LossSettings& ls, int chunk = 32) {
  if (windows.empty()) throw EvaluationError("dataset_loss: no windows");
  LossParts acc;
  for (std::size_t b = 0; b < windows.size(); b += chunk) {
    std::vector<const WindowSample*> ptrs;
    for (std::size_t k = b; k < std::min(windows.size(), b + chunk); ++k) ptrs.push_back(&windows[k]);
    const LossParts l = joint_loss(theta, ptrs, ctx, mc, ls);
    const double w = static_cast<double>(ptrs.size()) / static_cast<double>(windows.size());
    acc.total += w * l.total;
    acc.le += w * l.le;
    acc.lg += w * l.lg;
  }
  return acc;
}

// Mini-batch gradient descent on the joint loss; returns the checkpoint with
// the lowest full adapt-set loss (step 0 included).
inline AdaptResult adapt_target(const Params& theta_star, const std::vector<WindowSample>& adapt_windows,
                                CityContext& ctx, const ModelConfig& mc, const LossSettings& ls, const AdaptConfig& ac) {
  if (adapt_windows.empty()) throw EmptyDatasetError("adapt_target: no adaptation windows");
  if (ac.steps < 0 || ac.batch < 1) throw ConfigError("adapt.steps must be ≥ 0 and adapt.batch ≥ 1");
  std::mt19937_64 rng(ac.seed * 0xBF58476D1CE4E5B9ULL + 3);
  AdaptResult r{theta_star, 0.0, 0.0, {}};
  ensure_city_embedding(r.theta, mc, ctx.name, ctx.graph->num_nodes, rng);
  Params best = r.theta;
  r.initial_loss = dataset_loss(r.theta, adapt_windows, ctx, mc, ls).total;
  double best_loss = r.initial_loss;
  std::vector<std::size_t> order(adapt_windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (int step = 1; step <= ac.steps; ++step) {
    std::vector<const WindowSample*> mb;
    while (static_cast<int>(mb.size()) < std::min<int>(ac.batch, static_cast<int>(order.size()))) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      mb.push_back(&adapt_windows[order[cursor++]]);
    }
    LossGrad lg = loss_and_grad(r.theta, mb, ctx, mc, ls);
    check_divergence(lg.loss, step);
    r.theta.axpy(-ac.rate, lg.grad);
    if (step % std::max(1, ac.eval_every) == 0 || step == ac.steps) {
      const double full = dataset_loss(r.theta, adapt_windows, ctx, mc, ls).total;
      if (!std::isfinite(full) || full > kDivergenceBound) throw DivergenceError("adaptation diverged", step);
      if (full <= best_loss) {
        best_loss = full;
        best = r.theta;
      }
    }
    r.log.push_back({step, lg.loss.total, best_loss});
  }
  r.theta = std::move(best);
  r.final_loss = best_loss;
  return r;
}

// ---- evaluation ------------------------------------------------------------

struct HorizonMetrics {
  int horizon = 0;  // 1-based step
  double mae = 0.0;
  double rmse = 0.0;
};

// Metrics per requested horizon over all windows, nodes and features.
// predictions[k], truths[k]: M × (N·d) in original units.
inline std::vector<HorizonMetrics> horizon_metrics(const std::vector<MatD>& predictions, const std::vector<MatD>& truths,
                                                   const std::vector<int>& horizons) {
  if (predictions.empty() || predictions.size() != truths.size()) throw EvaluationError("evaluation needs a nonempty test set");
  const int m = static_cast<int>(truths[0].rows());
  std::vector<HorizonMetrics> out;
  for (int h : horizons) {
    if (h < 1 || h > m) throw EvaluationError("horizon " + std::to_string(h) + " outside 1.." + std::to_string(m));
    double abs_sum = 0.0, sq_sum = 0.0;
    long count = 0;
    for (std::size_t k = 0; k < predictions.size(); ++k) {
      const auto diff = (predictions[k].row(h - 1) - truths[k].row(h - 1)).array();
      abs_sum += diff.abs().sum();
      sq_sum += diff.square().sum();
      count += static_cast<long>(diff.size());
    }
    out.push_back({h, abs_sum / static_cast<double>(count), std::sqrt(sq_sum / static_cast<double>(count))});
  }
  return out;
}

// Model predictions for `windows`, inverted through `stats`.
inline std::vector<MatD> predict_windows(const Params& theta, const std::vector<WindowSample>& windows,
                                         CityContext& ctx, const ModelConfig& mc, const NormStats& stats,
                                         int chunk = 32) {
  std::vector<MatD> out;
  out.reserve(windows.size());
  const int n = ctx.graph->num_nodes;
  for (std::size_t b = 0; b < windows.size(); b += chunk) {
    std::vector<const WindowSample*> ptrs;
    for (std::size_t k = b; k < std::min(windows.size(), b + chunk); ++k) ptrs.push_back(&windows[k]);
    const Batch batch = make_batch(ptrs, n, mc.feature_dim);
    ad::Tape<double> t;
    const BoundParams<double> p(t, theta, false);
    const auto fwd = stnn::forward(p, t.constant(batch.x), batch.windows, ctx, mc);
    for (int k = 0; k < batch.windows; ++k)
      out.push_back(invert_zscore(prediction_window(fwd.prediction.value(), k, n, mc.horizon, mc.feature_dim), stats));
  }
  return out;
}

inline std::vector<HorizonMetrics> evaluate(const Params& theta, const std::vector<WindowSample>& test_windows,
                                            CityContext& ctx, const ModelConfig& mc, const NormStats& stats,
                                            const std::vector<int>& horizons) {
  if (test_windows.empty()) throw EvaluationError("evaluate: empty test set");
  const auto preds = predict_windows(theta, test_windows, ctx, mc, stats);
  std::vector<MatD> truths;
  truths.reserve(test_windows.size());
  for (const auto& w : test_windows) truths.push_back(invert_zscore(w.y, stats));
  return horizon_metrics(preds, truths, horizons);
}

}  // namespace stgfsl
