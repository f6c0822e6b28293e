#pragma once

// Experiment configuration: flat `dotted.key = value` text, `#` comments,
// overridable key by key. Every key maps onto one field of ExperimentConfig.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stgfsl/baselines.hpp"
#include "stgfsl/errors.hpp"
#include "stgfsl/graph_data.hpp"
#include "stgfsl/meta_train.hpp"
#include "stgfsl/stnn.hpp"

namespace stgfsl {

struct ExperimentConfig {
  std::uint64_t seed = 0;

  // data
  std::string data_source = "synth";  // synth | dirs
  std::vector<std::string> source_dirs;
  std::string target_dir;
  int few_shot_days = 1;
  int train_stride = 1;
  int test_stride = 1;
  std::string target_stats = "adapt";  // adapt | full
  SynthSpec synth;

  ModelConfig model;
  MetaConfig meta;
  AdaptConfig adapt;
  PretrainConfig pretrain;
  bool pretrain_recon = true;

  std::string baseline = "target_only";  // ha | target_only | fine_tune_vanilla | fine_tune_st_meta | maml
  std::vector<int> horizons{1, 3, 6};
  int ablate_horizon = 6;

  std::string eval_split = "test";  // test | adapt
  std::vector<std::string> report_inputs;  // results CSVs; empty means <out>/results.csv and <out>/ablation.csv
  std::string report_train_log;            // empty means <out>/train_log.csv

  std::string checkpoint;  // input checkpoint base for adapt / eval / report
  std::string out_dir = "out";
  int threads = 1;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<int> to_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& s : split_list(v)) out.push_back(static_cast<int>(to_int(key, s)));
  return out;
}

inline std::string ints(const std::vector<int>& v) {
  std::vector<std::string> s;
  for (int x : v) s.push_back(std::to_string(x));
  return join(s);
}

inline std::string num(double v) { return fmt_double(v); }

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
Field int_field(const std::string& key, T& ref) {
  return {[&ref, key](const std::string& v) { ref = static_cast<T>(to_int(key, v)); },
          [&ref] { return std::to_string(ref); }};
}

inline Field real_field(const std::string& key, double& ref) {
  return {[&ref, key](const std::string& v) { ref = to_double(key, v); }, [&ref] { return num(ref); }};
}

inline Field bool_field(const std::string& key, bool& ref) {
  return {[&ref, key](const std::string& v) { ref = to_bool(key, v); }, [&ref] { return ref ? "true" : "false"; }};
}

inline Field string_field(std::string& ref) {
  return {[&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }};
}

inline Field choice_field(const std::string& key, std::string& ref, std::vector<std::string> allowed) {
  return {[&ref, key, allowed](const std::string& v) {
            for (const auto& a : allowed)
              if (a == v) {
                ref = v;
                return;
              }
            throw ConfigError(key + ": expected one of " + join(allowed) + ", got '" + v + "'");
          },
          [&ref] { return ref; }};
}

inline Field ints_field(const std::string& key, std::vector<int>& ref) {
  return {[&ref, key](const std::string& v) { ref = to_ints(key, v); }, [&ref] { return ints(ref); }};
}

inline Field strings_field(std::vector<std::string>& ref) {
  return {[&ref](const std::string& v) { ref = split_list(v); }, [&ref] { return join(ref); }};
}

}  // namespace config_detail

// Key table bound to one config instance.
inline std::map<std::string, config_detail::Field> config_fields(ExperimentConfig& c) {
  using namespace config_detail;
  std::map<std::string, Field> f;
  f["seed"] = int_field("seed", c.seed);
  f["out"] = string_field(c.out_dir);
  f["threads"] = int_field("threads", c.threads);
  f["checkpoint"] = string_field(c.checkpoint);

  f["data.source"] = choice_field("data.source", c.data_source, {"synth", "dirs"});
  f["data.source_dirs"] = strings_field(c.source_dirs);
  f["data.target_dir"] = string_field(c.target_dir);
  f["data.few_shot_days"] = int_field("data.few_shot_days", c.few_shot_days);
  f["data.train_stride"] = int_field("data.train_stride", c.train_stride);
  f["data.test_stride"] = int_field("data.test_stride", c.test_stride);
  f["data.target_stats"] = choice_field("data.target_stats", c.target_stats, {"adapt", "full"});

  f["synth.names"] = strings_field(c.synth.names);
  f["synth.node_counts"] = ints_field("synth.node_counts", c.synth.node_counts);
  f["synth.length"] = int_field("synth.length", c.synth.length);
  f["synth.interval_minutes"] = int_field("synth.interval_minutes", c.synth.interval_minutes);
  f["synth.noise"] = real_field("synth.noise", c.synth.noise);
  f["synth.mean_degree"] = real_field("synth.mean_degree", c.synth.mean_degree);
  f["synth.rho_min"] = real_field("synth.rho_min", c.synth.rho_min);
  f["synth.rho_max"] = real_field("synth.rho_max", c.synth.rho_max);
  f["synth.amplitude_min"] = real_field("synth.amplitude_min", c.synth.amplitude_min);
  f["synth.amplitude_max"] = real_field("synth.amplitude_max", c.synth.amplitude_max);
  f["synth.phase_spread"] = real_field("synth.phase_spread", c.synth.phase_spread);
  f["synth.level_min"] = real_field("synth.level_min", c.synth.level_min);
  f["synth.level_max"] = real_field("synth.level_max", c.synth.level_max);
  f["synth.missing_rate"] = real_field("synth.missing_rate", c.synth.missing_rate);

  auto& m = c.model;
  f["model.history"] = int_field("model.history", m.history);
  f["model.horizon"] = int_field("model.horizon", m.horizon);
  f["model.d_hidden"] = int_field("model.d_hidden", m.d_hidden);
  f["model.heads"] = int_field("model.heads", m.heads);
  f["model.d_mk"] = int_field("model.d_mk", m.d_mk);
  f["model.hidden"] = int_field("model.hidden", m.hidden);
  f["model.extractor"] = {[&m](const std::string& v) {
                            if (v == "gru") m.extractor = ExtractorKind::gru;
                            else if (v == "tcn") m.extractor = ExtractorKind::tcn;
                            else throw ConfigError("model.extractor: expected gru or tcn, got '" + v + "'");
                          },
                          [&m] { return std::string(m.extractor == ExtractorKind::gru ? "gru" : "tcn"); }};
  f["model.tcn_kernels"] = ints_field("model.tcn_kernels", m.tcn_kernels);
  f["model.tcn_dilations"] = ints_field("model.tcn_dilations", m.tcn_dilations);
  f["model.generator_bias"] = bool_field("model.generator_bias", m.generator_bias);
  f["model.spatial_from_hidden"] = bool_field("model.spatial_from_hidden", m.spatial_from_hidden);
  f["model.self_loops"] = bool_field("model.self_loops", m.self_loops);
  f["model.ablation"] = {[&m](const std::string& v) { m.ablation = parse_ablation(v); },
                         [&m] { return to_string(m.ablation); }};

  auto& mt = c.meta;
  f["meta.alpha"] = real_field("meta.alpha", mt.alpha);
  f["meta.beta"] = real_field("meta.beta", mt.beta);
  f["meta.lambda"] = real_field("meta.lambda", mt.lambda);
  f["meta.inner_steps"] = int_field("meta.inner_steps", mt.inner_steps);
  f["meta.k_support"] = int_field("meta.k_support", mt.k_support);
  f["meta.k_query"] = int_field("meta.k_query", mt.k_query);
  f["meta.task_batch"] = int_field("meta.task_batch", mt.task_batch);
  f["meta.second_order"] = bool_field("meta.second_order", mt.second_order);
  f["meta.normalize_recon"] = bool_field("meta.normalize_recon", mt.normalize_recon);
  f["meta.max_episodes"] = int_field("meta.max_episodes", mt.max_episodes);
  f["meta.lr_decay"] = real_field("meta.lr_decay", mt.lr_decay);
  f["meta.decay_every"] = int_field("meta.decay_every", mt.decay_every);

  f["adapt.steps"] = int_field("adapt.steps", c.adapt.steps);
  f["adapt.batch"] = int_field("adapt.batch", c.adapt.batch);
  f["adapt.rate"] = real_field("adapt.rate", c.adapt.rate);
  f["adapt.eval_every"] = int_field("adapt.eval_every", c.adapt.eval_every);

  f["pretrain.steps"] = int_field("pretrain.steps", c.pretrain.steps);
  f["pretrain.batch"] = int_field("pretrain.batch", c.pretrain.batch);
  f["pretrain.rate"] = real_field("pretrain.rate", c.pretrain.rate);
  f["pretrain.recon"] = bool_field("pretrain.recon", c.pretrain_recon);

  f["baseline.name"] = choice_field("baseline.name", c.baseline,
                                    {"ha", "target_only", "fine_tune_vanilla", "fine_tune_st_meta", "maml"});
  f["eval.horizons"] = ints_field("eval.horizons", c.horizons);
  f["eval.split"] = choice_field("eval.split", c.eval_split, {"test", "adapt"});
  f["report.inputs"] = strings_field(c.report_inputs);
  f["report.train_log"] = string_field(c.report_train_log);
  f["ablate.horizon"] = int_field("ablate.horizon", c.ablate_horizon);
  return f;
}

// Applies one `key = value` assignment; unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  auto fields = config_fields(c);
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(value);
}

inline void apply_assignment(ExperimentConfig& c, const std::string& line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
  set_config_value(c, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
}

inline void apply_config_text(ExperimentConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    apply_assignment(c, line, origin + ":" + std::to_string(lineno));
  }
}

inline void apply_config_file(ExperimentConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(c, ss.str(), path.string());
}

// Every key with its current value, sorted; parses back to the same config.
inline std::string resolved_config_text(ExperimentConfig c) {
  std::string out;
  for (const auto& [key, field] : config_fields(c)) out += key + " = " + field.get() + "\n";
  return out;
}

inline void validate(const ExperimentConfig& c) {
  validate(c.model);
  validate(c.meta);
  if (c.few_shot_days < 1) throw ConfigError("data.few_shot_days must be positive");
  if (c.train_stride < 1 || c.test_stride < 1) throw ConfigError("data strides must be positive");
  if (c.adapt.steps < 0 || c.adapt.batch < 1 || c.adapt.eval_every < 1) throw ConfigError("adapt settings out of range");
  if (c.pretrain.steps < 0 || c.pretrain.batch < 1) throw ConfigError("pretrain settings out of range");
  if (c.threads < 1) throw ConfigError("threads must be positive");
  for (int h : c.horizons)
    if (h < 1 || h > c.model.horizon) throw ConfigError("eval.horizons: " + std::to_string(h) + " outside 1..model.horizon");
  if (c.ablate_horizon < 1 || c.ablate_horizon > c.model.horizon) throw ConfigError("ablate.horizon outside 1..model.horizon");
  if (c.data_source == "dirs") {
    if (c.source_dirs.empty()) throw ConfigError("data.source_dirs: at least one source directory is required");
    if (c.target_dir.empty()) throw ConfigError("data.target_dir: required when data.source = dirs");
    for (const auto& d : c.source_dirs)
      if (!std::filesystem::is_directory(d)) throw ConfigError("data.source_dirs: no such directory " + d);
    if (!std::filesystem::is_directory(c.target_dir)) throw ConfigError("data.target_dir: no such directory " + c.target_dir);
  } else {
    if (c.synth.names.size() < 2 || c.synth.names.size() != c.synth.node_counts.size())
      throw ConfigError("synth.names and synth.node_counts must list the same cities (sources first, target last)");
  }
}

}  // namespace stgfsl
