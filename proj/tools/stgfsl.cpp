// stgfsl <synth|train|adapt|eval|baseline|ablate|report> --config PATH [--set k=v ...] [--seed N] [--out DIR]

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "stgfsl/experiment.hpp"
#include "stgfsl/png.hpp"

namespace fs = std::filesystem;
using namespace stgfsl;

namespace {

void write_resolved(const ExperimentConfig& cfg) {
  std::ofstream(fs::path(cfg.out_dir) / "resolved_config.txt") << resolved_config_text(cfg);
}

fs::path checkpoint_or(const ExperimentConfig& cfg, const std::string& fallback) {
  return cfg.checkpoint.empty() ? fs::path(cfg.out_dir) / fallback : fs::path(cfg.checkpoint);
}

Params load_required_checkpoint(const fs::path& base) {
  if (!fs::exists(base.string() + ".json")) throw LoadError("missing checkpoint " + base.string() + ".json");
  return load_checkpoint(base);
}

void write_matrix_csv(const fs::path& path, const MatD& m) {
  std::ofstream f(path);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) f << (j ? "," : "") << fmt_double(m(i, j));
    f << "\n";
  }
}

int cmd_synth(const ExperimentConfig& cfg) {
  auto cities = synth_cities(cfg.synth, cfg.seed);
  for (const auto& c : cities) save_city(c, fs::path(cfg.out_dir) / "cities" / c.name);
  std::printf("wrote %zu cities to %s\n", cities.size(), (fs::path(cfg.out_dir) / "cities").c_str());
  return 0;
}

int cmd_train(const ExperimentConfig& raw) {
  const ExperimentConfig cfg = seeded(raw);
  const auto data = prepare_data(cfg);
  const ModelConfig mc = model_config(cfg, *data);
  try {
    TrainResult r = train(data->train_cities, mc, cfg.meta);
    write_train_log(fs::path(cfg.out_dir) / "train_log.csv", r.log);
    save_checkpoint(r.theta, fs::path(cfg.out_dir) / "checkpoint");
    std::printf("trained %d episodes, %lld parameters\n", cfg.meta.max_episodes,
                static_cast<long long>(r.theta.total_size()));
  } catch (const TrainingAborted& e) {
    write_train_log(fs::path(cfg.out_dir) / "train_log.csv", e.log());
    throw;
  }
  return 0;
}

int cmd_adapt(const ExperimentConfig& raw) {
  const ExperimentConfig cfg = seeded(raw);
  const Params theta = load_required_checkpoint(checkpoint_or(cfg, "checkpoint"));
  const auto data = prepare_data(cfg);
  const ModelConfig mc = model_config(cfg, *data);
  CityContext ctx(data->target.name, data->target.graph);
  const AdaptResult r = adapt_target(theta, data->split.adapt, ctx, mc, loss_settings(cfg.meta, mc), cfg.adapt);
  save_checkpoint(r.theta, fs::path(cfg.out_dir) / "adapted");
  write_adapt_log(fs::path(cfg.out_dir) / "adapt_log.csv", r);
  std::printf("adapt loss %.6g -> %.6g\n", r.initial_loss, r.final_loss);
  return 0;
}

int cmd_eval(const ExperimentConfig& raw) {
  const ExperimentConfig cfg = seeded(raw);
  const Params theta = load_required_checkpoint(checkpoint_or(cfg, "adapted"));
  const auto data = prepare_data(cfg);
  const ModelConfig mc = model_config(cfg, *data);
  CityContext ctx(data->target.name, data->target.graph);
  const auto& windows = cfg.eval_split == "adapt" ? data->split.adapt : data->split.test;
  const auto metrics = evaluate(theta, windows, ctx, mc, data->target_stats, cfg.horizons);
  const auto rows = result_rows(method_label(mc), data->target.name, data->target.series.interval_minutes, cfg.seed, metrics);
  write_results(fs::path(cfg.out_dir) / "results.csv", rows);
  for (const auto& r : rows) std::printf("h=%d mae=%.4f rmse=%.4f\n", r.horizon_steps, r.mae, r.rmse);
  return 0;
}

int cmd_baseline(const ExperimentConfig& cfg) {
  const auto data = prepare_data(cfg);
  const MethodRun run = run_baseline(*data, cfg, cfg.baseline);
  const auto rows = result_rows(run.method, data->target.name, data->target.series.interval_minutes, cfg.seed, run.metrics);
  write_results(fs::path(cfg.out_dir) / "results.csv", rows);
  if (!run.train_log.empty()) write_train_log(fs::path(cfg.out_dir) / "train_log.csv", run.train_log);
  for (const auto& r : rows) std::printf("%s h=%d mae=%.4f rmse=%.4f\n", r.method.c_str(), r.horizon_steps, r.mae, r.rmse);
  return 0;
}

int cmd_ablate(const ExperimentConfig& raw) {
  const auto data = prepare_data(raw);
  ExperimentConfig cfg = raw;
  cfg.horizons = {cfg.ablate_horizon};
  std::vector<ResultRow> rows;
  for (Ablation a : kAblationGrid) {
    cfg.model.ablation = a;
    const MethodRun run = run_stgfsl(*data, cfg);
    for (const auto& r : result_rows(run.method, data->target.name, data->target.series.interval_minutes, cfg.seed, run.metrics)) {
      std::printf("%s h=%d mae=%.4f rmse=%.4f\n", r.method.c_str(), r.horizon_steps, r.mae, r.rmse);
      rows.push_back(r);
    }
  }
  write_results(fs::path(cfg.out_dir) / "ablation.csv", rows);
  return 0;
}

// Mean and population std of MAE/RMSE over seeds per (method, city, horizon).
void write_summary(const fs::path& path, const std::vector<ResultRow>& rows) {
  struct Acc {
    int minutes = 0;
    std::vector<double> mae, rmse;
  };
  std::map<std::tuple<std::string, std::string, int>, Acc> groups;
  for (const auto& r : rows) {
    Acc& a = groups[{r.method, r.city, r.horizon_steps}];
    a.minutes = r.horizon_minutes;
    a.mae.push_back(r.mae);
    a.rmse.push_back(r.rmse);
  }
  const auto mean_std = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
  };
  std::ofstream f(path);
  f << "method,city,horizon_steps,horizon_minutes,mae_mean,mae_std,rmse_mean,rmse_std,runs\n";
  for (const auto& [key, a] : groups) {
    const auto [mm, ms] = mean_std(a.mae);
    const auto [rm, rs] = mean_std(a.rmse);
    f << std::get<0>(key) << "," << std::get<1>(key) << "," << std::get<2>(key) << "," << a.minutes << ","
      << fmt_double(mm) << "," << fmt_double(ms) << "," << fmt_double(rm) << "," << fmt_double(rs) << "," << a.mae.size()
      << "\n";
  }
}

int cmd_report(const ExperimentConfig& cfg) {
  const fs::path out(cfg.out_dir);
  std::vector<std::string> inputs = cfg.report_inputs;
  if (inputs.empty())
    for (const char* name : {"results.csv", "ablation.csv"})
      if (fs::exists(out / name)) inputs.push_back((out / name).string());
  std::vector<ResultRow> rows;
  for (const auto& p : inputs) {
    const auto r = read_results(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (!rows.empty()) {
    write_summary(out / "summary.csv", rows);
    std::printf("summary of %zu result rows -> %s\n", rows.size(), (out / "summary.csv").c_str());
  }

  const fs::path log_path = cfg.report_train_log.empty() ? out / "train_log.csv" : fs::path(cfg.report_train_log);
  if (fs::exists(log_path)) {
    // per-episode means of query loss and its L_e part
    const auto log = read_train_log(log_path);
    std::vector<double> query, le;
    long episode = -1;
    int count = 0;
    for (const auto& r : log) {
      if (r.episode != episode) {
        if (count) {
          query.back() /= count;
          le.back() /= count;
        }
        episode = r.episode;
        count = 0;
        query.push_back(0.0);
        le.push_back(0.0);
      }
      query.back() += r.query_loss;
      le.back() += r.le;
      ++count;
    }
    if (count) {
      query.back() /= count;
      le.back() /= count;
    }
    write_png(line_plot({query}, {0}), out / "loss_query.png");
    write_png(line_plot({le}, {0}), out / "loss_le.png");
    std::printf("loss curves -> %s, %s\n", (out / "loss_query.png").c_str(), (out / "loss_le.png").c_str());
  }

  const fs::path ckpt = checkpoint_or(cfg, "adapted");
  if (fs::exists(ckpt.string() + ".json")) {
    const Params theta = load_checkpoint(ckpt);
    const auto data = prepare_data(seeded(cfg));
    const ModelConfig mc = model_config(cfg, *data);
    const WindowSample& w = data->split.test.front();
    const StnnOutput o = stnn_forward(theta, {&w}, data->target.graph, data->target.name, mc);
    const MatD a = data->target.graph.symmetric_adjacency();
    write_matrix_csv(out / "a_target.csv", a);
    write_matrix_csv(out / "a_meta.csv", o.a_meta.front());
    write_png(heatmap(a), out / "a_target.png");
    write_png(heatmap(o.a_meta.front()), out / "a_meta.png");
    std::printf("heatmaps -> %s, %s\n", (out / "a_target.png").c_str(), (out / "a_meta.png").c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal graph few-shot learning"};
  std::string command, config_path, out_dir;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  app.add_option("command", command, "synth|train|adapt|eval|baseline|ablate|report")
      ->required()
      ->check(CLI::IsMember({"synth", "train", "adapt", "eval", "baseline", "ablate", "report"}));
  app.add_option("--config", config_path, "flat key = value config file")->required();
  app.add_option("--set", sets, "override, key=value (repeatable)");
  app.add_option("--seed", seed, "experiment seed");
  app.add_option("--out", out_dir, "output directory");
  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    apply_config_file(cfg, config_path);
    for (const auto& s : sets) apply_assignment(cfg, s, "--set");
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    validate(cfg);
    fs::create_directories(cfg.out_dir);
    write_resolved(cfg);
    if (command == "synth") return cmd_synth(cfg);
    if (command == "train") return cmd_train(cfg);
    if (command == "adapt") return cmd_adapt(cfg);
    if (command == "eval") return cmd_eval(cfg);
    if (command == "baseline") return cmd_baseline(cfg);
    if (command == "ablate") return cmd_ablate(cfg);
    return cmd_report(cfg);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
