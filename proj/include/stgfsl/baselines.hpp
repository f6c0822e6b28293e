#pragma once

// Comparison methods: historical average, target-only training, fine-tuning
// after pooled-source pretraining, and the MAML preset.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stgfsl/graph_data.hpp"
#include "stgfsl/meta_train.hpp"
#include "stgfsl/stnn.hpp"

namespace stgfsl {

// ---- historical average ----------------------------------------------------

// Mean signal per time-of-day slot; slot of timestep t is t mod slots (series
// are assumed to start at midnight).
struct DailyProfile {
  int slots = 0;
  int num_nodes = 0;
  int feature_dim = 1;
  MatD values;  // slots × (N·d)
  std::vector<std::pair<int, int>> filled;  // (node, slot) with no observation, given the node mean

  // Rows for timesteps first .. first+count−1.
  MatD predict(Eigen::Index first, Eigen::Index count) const {
    MatD out(count, values.cols());
    for (Eigen::Index k = 0; k < count; ++k) out.row(k) = values.row((first + k) % slots);
    return out;
  }
};

inline DailyProfile historical_average(const SignalSeries& s) {
  if (s.interval_minutes < 1 || 1440 % s.interval_minutes != 0)
    throw ValidationError("interval must divide one day, got " + std::to_string(s.interval_minutes) + " min");
  const int slots = 1440 / s.interval_minutes;
  if (s.length() < slots)
    throw ValidationError("historical average needs at least one full day, got " + std::to_string(s.length()) + " steps");
  const bool masked = s.observed.size() == static_cast<std::size_t>(s.length() * s.num_nodes);
  DailyProfile p{slots, s.num_nodes, s.feature_dim, MatD::Zero(slots, s.values.cols()), {}};
  for (int i = 0; i < s.num_nodes; ++i) {
    std::vector<int> count(slots, 0);
    Eigen::VectorXd node_sum = Eigen::VectorXd::Zero(s.feature_dim);
    long node_count = 0;
    for (Eigen::Index t = 0; t < s.length(); ++t) {
      if (masked && !s.is_observed(t, i)) continue;
      const int slot = static_cast<int>(t % slots);
      ++count[slot];
      ++node_count;
      for (int f = 0; f < s.feature_dim; ++f) {
        p.values(slot, i * s.feature_dim + f) += s.at(t, i, f);
        node_sum(f) += s.at(t, i, f);
      }
    }
    for (int slot = 0; slot < slots; ++slot) {
      for (int f = 0; f < s.feature_dim; ++f) {
        double& v = p.values(slot, i * s.feature_dim + f);
        if (count[slot] > 0)
          v /= count[slot];
        else
          v = node_count > 0 ? node_sum(f) / static_cast<double>(node_count) : 0.0;
      }
      if (count[slot] == 0) p.filled.emplace_back(i, slot);
    }
  }
  return p;
}

// Horizon metrics of the profile on windows of the (normalized) series; the
// window's t0 locates it in time.
inline std::vector<HorizonMetrics> evaluate_profile(const DailyProfile& p, const std::vector<WindowSample>& windows,
                                                    const NormStats& stats, const std::vector<int>& horizons) {
  if (windows.empty()) throw EvaluationError("evaluate_profile: empty test set");
  std::vector<MatD> preds, truths;
  for (const auto& w : windows) {
    preds.push_back(p.predict(w.t0 + w.x.rows(), w.y.rows()));
    truths.push_back(invert_zscore(w.y, stats));
  }
  return horizon_metrics(preds, truths, horizons);
}

// ---- trained baselines -----------------------------------------------------

inline ModelConfig shared_extractor(ModelConfig mc) {
  mc.ablation = Ablation::m2;
  return mc;
}

// Initialization used by every from-scratch baseline.
inline Params fresh_params(const ModelConfig& mc, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0xD1B54A32D192ED03ULL + 11);
  return init_params(mc, rng);
}

// Shared-extractor model trained on the adaptation windows alone, with the
// adaptation optimizer. mc is forced to the shared extractor.
inline AdaptResult target_only(const std::vector<WindowSample>& adapt_windows, CityContext& ctx, const ModelConfig& mc,
                               const AdaptConfig& ac, std::uint64_t seed) {
  const ModelConfig m2 = shared_extractor(mc);
  return adapt_target(fresh_params(m2, seed), adapt_windows, ctx, m2, LossSettings{0.0, false}, ac);
}

enum class FineTuneVariant { vanilla, st_meta };

struct PretrainConfig {
  int steps = 500;
  int batch = 16;
  double rate = 0.001;  // Adam step size
  std::uint64_t seed = 0;
};

// Pooled-source supervised training: each step draws a source city uniformly
// and a mini-batch of its windows, then takes an Adam step on the joint loss.
inline Params pretrain_pooled(Params theta, const std::vector<TrainingCity>& sources, const ModelConfig& mc,
                              const LossSettings& ls, const PretrainConfig& pc, std::vector<double>* losses = nullptr) {
  if (sources.empty()) throw SamplingError("pretraining needs at least one source city");
  std::mt19937_64 rng(pc.seed * 0x94D049BB133111EBULL + 5);
  ContextCache contexts;
  Adam opt;
  std::uniform_int_distribution<std::size_t> pick_city(0, sources.size() - 1);
  for (int step = 0; step < pc.steps; ++step) {
    const TrainingCity& city = sources[pick_city(rng)];
    if (city.windows.empty()) throw SamplingError("city " + city.name + " has no windows");
    std::uniform_int_distribution<std::size_t> pick(0, city.windows.size() - 1);
    std::vector<const WindowSample*> mb;
    for (int k = 0; k < pc.batch; ++k) mb.push_back(&city.windows[pick(rng)]);
    LossGrad lg = loss_and_grad(theta, mb, contexts.get(city.name, *city.graph), mc, ls);
    check_divergence(lg.loss, step);
    if (losses) losses->push_back(lg.loss.total);
    opt.step(theta, lg.grad, pc.rate);
  }
  return theta;
}

struct FineTuneResult {
  Params pretrained;
  AdaptResult adapted;
};

// vanilla: shared extractor, L_e only. st_meta: generated extractor with the
// joint loss in both phases (recon_in_pretrain switches λ off for phase one).
inline FineTuneResult fine_tune(const std::vector<TrainingCity>& sources, const std::vector<WindowSample>& adapt_windows,
                                CityContext& ctx, ModelConfig mc, const MetaConfig& meta, FineTuneVariant variant,
                                const PretrainConfig& pc, const AdaptConfig& ac, bool recon_in_pretrain = true) {
  LossSettings ls = loss_settings(meta, mc);
  if (variant == FineTuneVariant::vanilla) {
    mc = shared_extractor(mc);
    ls.lambda = 0.0;
  }
  LossSettings pre = ls;
  if (!recon_in_pretrain) pre.lambda = 0.0;
  Params theta = pretrain_pooled(fresh_params(mc, pc.seed), sources, mc, pre, pc);
  AdaptResult adapted = adapt_target(theta, adapt_windows, ctx, mc, ls, ac);
  return {std::move(theta), std::move(adapted)};
}

// MAML: meta-training with a shared extractor and no reconstruction term.
inline std::pair<ModelConfig, MetaConfig> maml_preset(ModelConfig mc, MetaConfig meta) {
  mc.ablation = Ablation::m2;
  meta.lambda = 0.0;
  return {mc, meta};
}

}  // namespace stgfsl
