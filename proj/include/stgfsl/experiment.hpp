#pragma once

// Experiment orchestration shared by the command-line tool and the
// acceptance runner: data preparation, method runs, result tables.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "stgfsl/baselines.hpp"
#include "stgfsl/config.hpp"
#include "stgfsl/graph_data.hpp"
#include "stgfsl/meta_train.hpp"
#include "stgfsl/stnn.hpp"

namespace stgfsl {

// Sources normalized with their own stats; the target with stats fitted on
// its adaptation days (or the full series when data.target_stats = full).
struct PreparedData {
  std::vector<CityDataset> sources;
  CityDataset target;
  std::vector<TrainingCity> train_cities;
  NormStats target_stats;
  TargetSplit split;
  SignalSeries target_adapt_raw;  // raw adaptation days, for the historical average
};

inline std::unique_ptr<PreparedData> prepare_data(const ExperimentConfig& cfg) {
  validate(cfg);
  auto p = std::make_unique<PreparedData>();
  if (cfg.data_source == "synth") {
    auto cities = synth_cities(cfg.synth, cfg.seed);
    p->target = std::move(cities.back());
    cities.pop_back();
    p->sources = std::move(cities);
  } else {
    for (const auto& d : cfg.source_dirs) p->sources.push_back(load_city(d));
    p->target = load_city(cfg.target_dir);
  }
  const int d = p->target.series.feature_dim;
  for (const auto& s : p->sources)
    if (s.series.feature_dim != d) throw ValidationError("city " + s.name + " has a different feature dimension");

  p->train_cities.reserve(p->sources.size());
  for (const auto& s : p->sources) {
    const MatD norm = apply_zscore(s.series.values, s.stats);
    p->train_cities.push_back(
        {s.name, &s.graph, make_windows(norm, cfg.model.history, cfg.model.horizon, cfg.train_stride)});
  }

  const SignalSeries& raw = p->target.series;
  const Eigen::Index boundary = few_shot_steps(cfg.few_shot_days, raw.interval_minutes);
  if (boundary >= raw.length())
    throw ValidationError("target series is shorter than " + std::to_string(cfg.few_shot_days) + " adaptation day(s)");
  p->target_stats = cfg.target_stats == "full" ? fit_zscore(raw.values) : fit_zscore(MatD(raw.values.topRows(boundary)));
  const MatD norm = apply_zscore(raw.values, p->target_stats);
  p->split = split_target(norm, raw.interval_minutes, cfg.few_shot_days, cfg.model.history, cfg.model.horizon, 1);
  if (cfg.test_stride > 1)
    p->split.test = make_windows(norm, cfg.model.history, cfg.model.horizon, cfg.test_stride, boundary, norm.rows());

  p->target_adapt_raw = raw;
  p->target_adapt_raw.values = raw.values.topRows(boundary);
  if (!raw.observed.empty())
    p->target_adapt_raw.observed.assign(raw.observed.begin(), raw.observed.begin() + boundary * raw.num_nodes);
  return p;
}

// Model config with the feature dimension taken from the data.
inline ModelConfig model_config(const ExperimentConfig& cfg, const PreparedData& data) {
  ModelConfig m = cfg.model;
  m.feature_dim = data.target.series.feature_dim;
  return m;
}

// All randomness in a run flows from the experiment seed.
inline ExperimentConfig seeded(ExperimentConfig cfg) {
  cfg.meta.seed = cfg.seed;
  cfg.adapt.seed = cfg.seed;
  cfg.pretrain.seed = cfg.seed;
  return cfg;
}

// ---- results ---------------------------------------------------------------

struct ResultRow {
  std::string method;
  std::string city;
  int horizon_steps = 0;
  int horizon_minutes = 0;
  double mae = 0.0;
  double rmse = 0.0;
  std::uint64_t seed = 0;
};

inline const char* kResultsHeader = "method,city,horizon_steps,horizon_minutes,mae,rmse,seed";

inline std::vector<ResultRow> result_rows(const std::string& method, const std::string& city, int interval_minutes,
                                          std::uint64_t seed, const std::vector<HorizonMetrics>& metrics) {
  std::vector<ResultRow> out;
  for (const auto& m : metrics) out.push_back({method, city, m.horizon, m.horizon * interval_minutes, m.mae, m.rmse, seed});
  return out;
}

inline void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << kResultsHeader << "\n";
  for (const auto& r : rows)
    f << r.method << "," << r.city << "," << r.horizon_steps << "," << r.horizon_minutes << "," << fmt_double(r.mae) << ","
      << fmt_double(r.rmse) << "," << r.seed << "\n";
}

inline std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("missing results file " + path.string());
  std::string line;
  std::getline(f, line);
  if (detail::trim(line) != kResultsHeader) throw LoadError(path.string() + ": unexpected header");
  std::vector<ResultRow> out;
  while (std::getline(f, line)) {
    if (detail::trim(line).empty()) continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != 7) throw LoadError(path.string() + ": expected 7 columns in '" + line + "'");
    out.push_back({c[0], c[1], std::stoi(c[2]), std::stoi(c[3]), std::stod(c[4]), std::stod(c[5]), std::stoull(c[6])});
  }
  return out;
}

inline void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << "episode,city,support_loss,query_loss,L_e,L_g\n";
  for (const auto& r : log)
    f << r.episode << "," << r.city << "," << fmt_double(r.support_loss) << "," << fmt_double(r.query_loss) << ","
      << fmt_double(r.le) << "," << fmt_double(r.lg) << "\n";
}

inline std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("missing training log " + path.string());
  std::string line;
  std::getline(f, line);
  std::vector<TrainLogRow> out;
  while (std::getline(f, line)) {
    const auto c = detail::split_csv_line(line);
    if (c.size() != 6) continue;
    out.push_back({std::stol(c[0]), c[1], std::stod(c[2]), std::stod(c[3]), std::stod(c[4]), std::stod(c[5])});
  }
  return out;
}

inline void write_adapt_log(const std::filesystem::path& path, const AdaptResult& r) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << "step,batch_loss,best_full_loss\n0,," << fmt_double(r.initial_loss) << "\n";
  for (const auto& row : r.log)
    f << row.step << "," << fmt_double(row.batch_loss) << "," << fmt_double(row.best_full_loss) << "\n";
}

// ---- method runs -----------------------------------------------------------

struct MethodRun {
  std::string method;
  std::vector<HorizonMetrics> metrics;      // after adaptation
  std::vector<HorizonMetrics> pre_metrics;  // before adaptation (meta-trained methods)
  std::vector<TrainLogRow> train_log;
  Params trained;  // θ* (meta-trained or pretrained)
  Params adapted;
};

inline std::string method_label(const ModelConfig& mc) {
  return mc.ablation == Ablation::none ? "stgfsl" : "stgfsl_" + to_string(mc.ablation);
}

// Meta-train → adapt → evaluate on the target test split.
inline MethodRun run_meta_method(const PreparedData& data, const ExperimentConfig& raw_cfg, const ModelConfig& mc,
                                 const MetaConfig& meta, const std::string& label) {
  const ExperimentConfig cfg = seeded(raw_cfg);
  MetaConfig m = meta;
  m.seed = cfg.seed;
  TrainResult tr = train(data.train_cities, mc, m);
  CityContext ctx(data.target.name, data.target.graph);
  MethodRun run{label, {}, {}, std::move(tr.log), std::move(tr.theta), {}};
  Params start = run.trained;
  std::mt19937_64 rng(cfg.seed + 99);
  ensure_city_embedding(start, mc, ctx.name, ctx.graph->num_nodes, rng);
  run.pre_metrics = evaluate(start, data.split.test, ctx, mc, data.target_stats, cfg.horizons);
  AdaptResult ar = adapt_target(start, data.split.adapt, ctx, mc, loss_settings(m, mc), cfg.adapt);
  run.adapted = std::move(ar.theta);
  run.metrics = evaluate(run.adapted, data.split.test, ctx, mc, data.target_stats, cfg.horizons);
  return run;
}

inline MethodRun run_stgfsl(const PreparedData& data, const ExperimentConfig& cfg) {
  const ModelConfig mc = model_config(cfg, data);
  return run_meta_method(data, cfg, mc, cfg.meta, method_label(mc));
}

inline MethodRun run_maml(const PreparedData& data, const ExperimentConfig& cfg) {
  const auto [mc, meta] = maml_preset(model_config(cfg, data), cfg.meta);
  return run_meta_method(data, cfg, mc, meta, "maml");
}

// ha | target_only | fine_tune_vanilla | fine_tune_st_meta | maml
inline MethodRun run_baseline(const PreparedData& data, const ExperimentConfig& raw_cfg, const std::string& name) {
  const ExperimentConfig cfg = seeded(raw_cfg);
  const ModelConfig mc = model_config(cfg, data);
  CityContext ctx(data.target.name, data.target.graph);
  MethodRun run{name, {}, {}, {}, {}, {}};
  if (name == "ha") {
    const DailyProfile p = historical_average(data.target_adapt_raw);
    run.metrics = evaluate_profile(p, data.split.test, data.target_stats, cfg.horizons);
  } else if (name == "target_only") {
    AdaptResult r = target_only(data.split.adapt, ctx, mc, cfg.adapt, cfg.seed);
    run.adapted = std::move(r.theta);
    run.metrics = evaluate(run.adapted, data.split.test, ctx, shared_extractor(mc), data.target_stats, cfg.horizons);
  } else if (name == "fine_tune_vanilla" || name == "fine_tune_st_meta") {
    const auto variant = name == "fine_tune_vanilla" ? FineTuneVariant::vanilla : FineTuneVariant::st_meta;
    FineTuneResult r = fine_tune(data.train_cities, data.split.adapt, ctx, mc, cfg.meta, variant, cfg.pretrain, cfg.adapt,
                                 cfg.pretrain_recon);
    const ModelConfig used = variant == FineTuneVariant::vanilla ? shared_extractor(mc) : mc;
    run.trained = std::move(r.pretrained);
    run.adapted = std::move(r.adapted.theta);
    run.metrics = evaluate(run.adapted, data.split.test, ctx, used, data.target_stats, cfg.horizons);
  } else if (name == "maml") {
    return run_maml(data, raw_cfg);
  } else {
    throw ConfigError("baseline.name: unknown baseline '" + name + "'");
  }
  return run;
}

inline const Ablation kAblationGrid[6] = {Ablation::none, Ablation::m1a, Ablation::m1b,
                                          Ablation::m1c,  Ablation::m2,  Ablation::m3};

}  // namespace stgfsl
