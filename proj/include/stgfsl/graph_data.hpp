#pragma once

// City datasets: graph + signal series, preprocessing (gap filling, z-score),
// windowing, target splits, thresholded Gaussian kernels, and the synthetic
// city generator used for desk-scale experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stgfsl/autodiff.hpp"
#include "stgfsl/errors.hpp"

namespace stgfsl {

struct Edge {
  int src = 0;
  int dst = 0;
  double weight = 1.0;
};

struct CityGraph {
  int num_nodes = 0;
  std::vector<Edge> edges;
  MatD adjacency;                  // binary, as loaded (may be directed)
  std::optional<MatD> distances;   // optional pairwise distances

  // A_sym = max(A, Aᵀ); the adjacency used by every downstream consumer.
  MatD symmetric_adjacency() const { return adjacency.cwiseMax(adjacency.transpose()); }

  // Undirected neighbor lists (self excluded), ascending.
  std::vector<std::vector<int>> neighbors() const {
    const MatD a = symmetric_adjacency();
    std::vector<std::vector<int>> out(num_nodes);
    for (int i = 0; i < num_nodes; ++i)
      for (int j = 0; j < num_nodes; ++j)
        if (i != j && a(i, j) > 0.0) out[i].push_back(j);
    return out;
  }
};

// Builds a validated graph from an edge list. Self-loops and zero-weight
// edges are not stored.
inline CityGraph make_graph(int num_nodes, const std::vector<Edge>& edges, std::optional<MatD> distances = {}) {
  if (num_nodes < 2) throw ValidationError("graph needs at least 2 nodes, got " + std::to_string(num_nodes));
  CityGraph g;
  g.num_nodes = num_nodes;
  g.adjacency = MatD::Zero(num_nodes, num_nodes);
  for (const Edge& e : edges) {
    if (e.src < 0 || e.src >= num_nodes || e.dst < 0 || e.dst >= num_nodes)
      throw ValidationError("edge (" + std::to_string(e.src) + "," + std::to_string(e.dst) + ") out of range");
    if (!(e.weight >= 0.0 && e.weight <= 1.0)) throw ValidationError("edge weight outside [0,1]");
    if (e.src == e.dst || e.weight <= 0.0) continue;
    g.edges.push_back(e);
    g.adjacency(e.src, e.dst) = 1.0;
  }
  if (distances) {
    if (distances->rows() != num_nodes || distances->cols() != num_nodes)
      throw ValidationError("distance matrix must be N x N");
    if ((distances->array() < 0.0).any()) throw ValidationError("distances must be nonnegative");
  }
  g.distances = std::move(distances);
  return g;
}

struct SignalSeries {
  MatD values;                       // L × (N·d), column = node·d + feature
  std::vector<std::uint8_t> observed;  // L × N, row-major
  int num_nodes = 0;
  int feature_dim = 1;
  int interval_minutes = 5;

  Eigen::Index length() const { return values.rows(); }
  double& at(Eigen::Index t, int node, int feature) { return values(t, node * feature_dim + feature); }
  double at(Eigen::Index t, int node, int feature) const { return values(t, node * feature_dim + feature); }
  bool is_observed(Eigen::Index t, int node) const { return observed[t * num_nodes + node] != 0; }
  int steps_per_day() const { return 1440 / interval_minutes; }
};

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

// Contiguous history/future slices of a normalized series.
struct WindowSample {
  MatD x;  // T × (N·d)
  MatD y;  // M × (N·d)
  int t0 = 0;
};

struct CityDataset {
  std::string name;
  CityGraph graph;
  SignalSeries series;  // raw units, gaps filled
  NormStats stats;      // fitted on the whole series
};

// ---- preprocessing ---------------------------------------------------------

// Linear interpolation along time for every unobserved (t, node); leading and
// trailing gaps take the nearest observed value. Afterwards every entry is
// marked observed.
inline void fill_gaps(SignalSeries& s) {
  const Eigen::Index len = s.length();
  for (int i = 0; i < s.num_nodes; ++i) {
    std::vector<Eigen::Index> obs;
    for (Eigen::Index t = 0; t < len; ++t)
      if (s.is_observed(t, i)) obs.push_back(t);
    if (obs.empty()) throw ValidationError("node " + std::to_string(i) + " has no observed values");
    for (int f = 0; f < s.feature_dim; ++f) {
      for (Eigen::Index t = 0; t < obs.front(); ++t) s.at(t, i, f) = s.at(obs.front(), i, f);
      for (Eigen::Index t = obs.back() + 1; t < len; ++t) s.at(t, i, f) = s.at(obs.back(), i, f);
      for (std::size_t k = 0; k + 1 < obs.size(); ++k) {
        const Eigen::Index a = obs[k], b = obs[k + 1];
        const double va = s.at(a, i, f), vb = s.at(b, i, f);
        for (Eigen::Index t = a + 1; t < b; ++t) {
          const double w = static_cast<double>(t - a) / static_cast<double>(b - a);
          s.at(t, i, f) = va + w * (vb - va);
        }
      }
    }
  }
  std::fill(s.observed.begin(), s.observed.end(), std::uint8_t{1});
}

// Scalar mean and population standard deviation over all entries.
inline NormStats fit_zscore(const MatD& values) {
  if (values.size() == 0) throw EmptyDatasetError("cannot fit z-score stats on an empty series");
  const double mean = values.mean();
  const double var = (values.array() - mean).square().mean();
  const double sd = std::sqrt(var);
  if (!(sd > 0.0) || !std::isfinite(sd)) throw DegenerateStatsError("series has zero variance");
  return {mean, sd};
}

inline NormStats fit_zscore(const SignalSeries& s) { return fit_zscore(s.values); }

inline MatD apply_zscore(const MatD& values, const NormStats& st) {
  if (!(st.std > 0.0)) throw ParameterError("z-score std must be positive");
  return (values.array() - st.mean) / st.std;
}

inline MatD invert_zscore(const MatD& values, const NormStats& st) {
  if (!(st.std > 0.0)) throw ParameterError("z-score std must be positive");
  return values.array() * st.std + st.mean;
}

inline SignalSeries apply_zscore(SignalSeries s, const NormStats& st) {
  s.values = apply_zscore(s.values, st);
  return s;
}

inline SignalSeries invert_zscore(SignalSeries s, const NormStats& st) {
  s.values = invert_zscore(s.values, st);
  return s;
}

// ---- thresholded Gaussian kernel -------------------------------------------

struct KernelAdjacency {
  MatD weights;    // kept weights, zero elsewhere
  MatD adjacency;  // weights > 0
  std::vector<Edge> edges;
};

// Standard deviation of all off-diagonal pairwise distances.
inline double default_kernel_sigma(const MatD& distances) {
  std::vector<double> d;
  for (Eigen::Index i = 0; i < distances.rows(); ++i)
    for (Eigen::Index j = 0; j < distances.cols(); ++j)
      if (i != j) d.push_back(distances(i, j));
  if (d.empty()) throw ParameterError("need at least two nodes for a kernel width");
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(d.size()));
}

// w_ij = exp(−d_ij²/σ²), kept iff w_ij ≥ κ and i ≠ j.
inline KernelAdjacency gaussian_adjacency(const MatD& distances, double sigma, double kappa = 0.1) {
  if (!(sigma > 0.0)) throw ParameterError("kernel sigma must be positive");
  if (!(kappa >= 0.0 && kappa < 1.0)) throw ParameterError("kernel threshold must lie in [0,1)");
  if (distances.rows() != distances.cols()) throw ContractError("distance matrix must be square");
  if ((distances.array() < 0.0).any()) throw ContractError("distances must be nonnegative");
  const Eigen::Index n = distances.rows();
  KernelAdjacency out{MatD::Zero(n, n), MatD::Zero(n, n), {}};
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = distances(i, j);
      const double w = std::exp(-(d * d) / (sigma * sigma));
      if (w >= kappa && w > 0.0) {
        out.weights(i, j) = w;
        out.adjacency(i, j) = 1.0;
        out.edges.push_back({static_cast<int>(i), static_cast<int>(j), w});
      }
    }
  return out;
}

// ---- windowing -------------------------------------------------------------

inline std::size_t window_count(Eigen::Index length, int history, int horizon, int stride) {
  if (length < history + horizon) return 0;
  return static_cast<std::size_t>((length - history - horizon) / stride) + 1;
}

// Windows over rows [begin, end) of a (normalized) L × (N·d) matrix.
inline std::vector<WindowSample> make_windows(const MatD& values, int history, int horizon, int stride,
                                              Eigen::Index begin = 0, Eigen::Index end = -1) {
  if (history < 1 || horizon < 1 || stride < 1) throw ParameterError("T, M and stride must be positive");
  if (end < 0) end = values.rows();
  const Eigen::Index len = end - begin;
  if (len < history + horizon)
    throw EmptyDatasetError("series of length " + std::to_string(len) + " is shorter than T+M = " +
                            std::to_string(history + horizon));
  const std::size_t count = window_count(len, history, horizon, stride);
  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const Eigen::Index t0 = begin + static_cast<Eigen::Index>(k) * stride;
    out.push_back({values.middleRows(t0, history), values.middleRows(t0 + history, horizon), static_cast<int>(t0)});
  }
  return out;
}

inline std::vector<WindowSample> make_windows(const SignalSeries& s, int history, int horizon, int stride) {
  return make_windows(s.values, history, horizon, stride);
}

struct TargetSplit {
  Eigen::Index boundary = 0;  // first test timestep
  std::vector<WindowSample> adapt;
  std::vector<WindowSample> test;
};

inline Eigen::Index few_shot_steps(int few_shot_days, int interval_minutes) {
  if (few_shot_days < 1) throw ParameterError("few-shot days must be positive");
  if (interval_minutes < 1 || 1440 % interval_minutes != 0)
    throw ValidationError("interval must divide one day, got " + std::to_string(interval_minutes) + " min");
  return static_cast<Eigen::Index>(few_shot_days) * (1440 / interval_minutes);
}

// The first few_shot_days of `values` form the adaptation portion, the rest is
// test data. No window crosses the boundary.
inline TargetSplit split_target(const MatD& values, int interval_minutes, int few_shot_days, int history,
                                int horizon, int stride = 1) {
  const Eigen::Index boundary = few_shot_steps(few_shot_days, interval_minutes);
  if (values.rows() <= boundary || boundary < history + horizon || values.rows() - boundary < history + horizon)
    throw ValidationError("series of length " + std::to_string(values.rows()) + " cannot supply " +
                          std::to_string(few_shot_days) + " adaptation day(s) plus a test window");
  TargetSplit out;
  out.boundary = boundary;
  out.adapt = make_windows(values, history, horizon, stride, 0, boundary);
  out.test = make_windows(values, history, horizon, stride, boundary, values.rows());
  return out;
}

// ---- dataset directory I/O -------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::ifstream open_or_throw(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw LoadError("cannot open " + p.string());
  return in;
}

inline MatD read_matrix_csv(const std::filesystem::path& p) {
  std::ifstream in = open_or_throw(p);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<double> r;
    for (const auto& c : split_csv_line(line)) r.push_back(std::stod(c));
    rows.push_back(std::move(r));
  }
  if (rows.empty()) return MatD();
  MatD m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw ValidationError(p.string() + ": ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Round-trip (%.17g) decimal form of a double.
using detail::fmt_double;

inline CityDataset load_city(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path meta_path = dir / "meta.json", sig_path = dir / "signals.csv", edge_path = dir / "edges.csv",
                 dist_path = dir / "distances.csv";
  for (const auto& p : {meta_path, sig_path, edge_path})
    if (!fs::exists(p)) throw LoadError("missing dataset file " + p.string());

  nlohmann::json meta;
  {
    std::ifstream in = detail::open_or_throw(meta_path);
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(meta_path.string() + ": " + e.what());
    }
  }
  CityDataset ds;
  int n = 0, d = 1, interval = 0;
  try {
    ds.name = meta.at("name").get<std::string>();
    n = meta.at("num_nodes").get<int>();
    interval = meta.at("interval_minutes").get<int>();
    d = meta.at("feature_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(meta_path.string() + ": " + e.what());
  }
  if (n < 2 || d < 1 || interval < 1) throw ValidationError(meta_path.string() + ": invalid dimensions");

  std::vector<std::vector<double>> rows;
  std::vector<std::uint8_t> observed;
  {
    std::ifstream in = detail::open_or_throw(sig_path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto cells = detail::split_csv_line(line);
      if (static_cast<int>(cells.size()) != n * d)
        throw ValidationError(sig_path.string() + ": row " + std::to_string(rows.size()) + " has " +
                              std::to_string(cells.size()) + " values, expected N*d = " + std::to_string(n * d));
      std::vector<double> r(cells.size(), 0.0);
      std::vector<std::uint8_t> obs(n, 1);
      for (std::size_t c = 0; c < cells.size(); ++c) {
        const std::string v = detail::trim(cells[c]);
        if (v.empty()) {
          obs[c / d] = 0;
          continue;
        }
        r[c] = std::stod(v);
        if (!std::isfinite(r[c])) obs[c / d] = 0;
      }
      rows.push_back(std::move(r));
      observed.insert(observed.end(), obs.begin(), obs.end());
    }
  }
  if (rows.empty()) throw ValidationError(sig_path.string() + ": no timesteps");
  ds.series.num_nodes = n;
  ds.series.feature_dim = d;
  ds.series.interval_minutes = interval;
  ds.series.values.resize(static_cast<Eigen::Index>(rows.size()), n * d);
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (int c = 0; c < n * d; ++c) ds.series.values(static_cast<Eigen::Index>(t), c) = rows[t][c];
  ds.series.observed = std::move(observed);
  fill_gaps(ds.series);

  std::vector<Edge> edges;
  {
    std::ifstream in = detail::open_or_throw(edge_path);
    std::string line;
    while (std::getline(in, line)) {
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto cells = detail::split_csv_line(line);
      if (cells.size() != 3) throw ValidationError(edge_path.string() + ": expected src,dst,weight");
      edges.push_back({std::stoi(cells[0]), std::stoi(cells[1]), std::stod(cells[2])});
    }
  }
  std::optional<MatD> dist;
  if (fs::exists(dist_path)) dist = detail::read_matrix_csv(dist_path);
  ds.graph = make_graph(n, edges, std::move(dist));
  ds.stats = fit_zscore(ds.series);
  return ds;
}

inline void save_city(const CityDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    nlohmann::json meta = {{"name", ds.name},
                           {"num_nodes", ds.graph.num_nodes},
                           {"interval_minutes", ds.series.interval_minutes},
                           {"feature_dim", ds.series.feature_dim}};
    std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
  }
  {
    std::ofstream out(dir / "signals.csv");
    for (Eigen::Index t = 0; t < ds.series.length(); ++t) {
      for (Eigen::Index c = 0; c < ds.series.values.cols(); ++c) {
        if (c) out << ',';
        if (ds.series.is_observed(t, static_cast<int>(c / ds.series.feature_dim)))
          out << detail::fmt_double(ds.series.values(t, c));
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(dir / "edges.csv");
    for (const Edge& e : ds.graph.edges) out << e.src << ',' << e.dst << ',' << detail::fmt_double(e.weight) << '\n';
  }
  if (ds.graph.distances) {
    std::ofstream out(dir / "distances.csv");
    const MatD& d = *ds.graph.distances;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      for (Eigen::Index j = 0; j < d.cols(); ++j) out << (j ? "," : "") << detail::fmt_double(d(i, j));
      out << '\n';
    }
  }
}

// ---- synthetic cities ------------------------------------------------------

struct SynthSpec {
  std::vector<std::string> names{"source0", "source1", "source2", "target"};
  std::vector<int> node_counts{20, 20, 20, 15};
  int length = 2016;
  int interval_minutes = 5;
  double noise = 0.5;
  double mean_degree = 4.0;
  // Shared hyper-prior over city dynamics.
  double rho_min = 0.2, rho_max = 0.6;
  double amplitude_min = 4.0, amplitude_max = 8.0;
  double phase_spread = 0.5;  // city phase offset ~ U(−spread, spread) radians
  double level_min = 15.0, level_max = 25.0;
  double missing_rate = 0.0;  // fraction of (t, node) entries blanked before gap filling
};

namespace detail {

// Random geometric graph: the radius is the distance of the k-th closest pair,
// k = round(N·mean_degree/2), so the mean degree hits the request.
inline CityGraph random_geometric_graph(int n, double mean_degree, std::mt19937_64& rng,
                                        std::vector<std::pair<double, double>>& points) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  points.resize(n);
  for (auto& p : points) {
    p.first = unit(rng);
    p.second = unit(rng);
  }
  MatD dist(n, n);
  std::vector<double> pair_d;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      dist(i, j) = std::hypot(points[i].first - points[j].first, points[i].second - points[j].second);
      if (i < j) pair_d.push_back(dist(i, j));
    }
  std::sort(pair_d.begin(), pair_d.end());
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(n * mean_degree / 2.0)), 1, pair_d.size());
  const double radius = pair_d[k - 1];
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && dist(i, j) <= radius)
        edges.push_back({i, j, std::exp(-(dist(i, j) * dist(i, j)) / (radius * radius))});
  return make_graph(n, edges, dist);
}

}  // namespace detail

// Synthetic cities sharing a diffusion-autoregressive dynamics family:
//   x_{t+1} = ρ·Â x_t + s(t+1) + ε,   s_i(t) = level + a_i·sin(2πt/P + φ + φ_i)
// with Â the row-normalized adjacency, P one simulated day, and per-node
// amplitude/phase tied to planar position. (ρ, amplitude, phase, level) are
// drawn per city from the SynthSpec ranges.
inline std::vector<CityDataset> synth_cities(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.names.size() != spec.node_counts.size()) throw ParameterError("synth names and node counts differ in length");
  if (spec.length < 1 || spec.interval_minutes < 1 || 1440 % spec.interval_minutes != 0)
    throw ParameterError("synth length/interval invalid");
  if (spec.noise < 0.0 || spec.missing_rate < 0.0 || spec.missing_rate >= 1.0) throw ParameterError("synth noise/missing rate invalid");
  std::vector<CityDataset> out;
  const double period = 1440.0 / spec.interval_minutes;
  constexpr double kTwoPi = 6.283185307179586;
  for (std::size_t c = 0; c < spec.names.size(); ++c) {
    const int n = spec.node_counts[c];
    if (n < 2) throw ParameterError("synthetic city " + spec.names[c] + " needs at least 2 nodes");
    std::mt19937_64 rng(seed * 1000003ULL + c * 7919ULL + 17ULL);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    std::vector<std::pair<double, double>> pts;
    CityDataset ds;
    ds.name = spec.names[c];
    ds.graph = detail::random_geometric_graph(n, spec.mean_degree, rng, pts);

    const double rho = uniform(spec.rho_min, spec.rho_max);
    const double amp = uniform(spec.amplitude_min, spec.amplitude_max);
    const double phase = uniform(-spec.phase_spread, spec.phase_spread);
    const double level = uniform(spec.level_min, spec.level_max);

    MatD a_hat = ds.graph.symmetric_adjacency();
    for (int i = 0; i < n; ++i) {
      const double deg = a_hat.row(i).sum();
      if (deg > 0.0) a_hat.row(i) /= deg;
    }
    Eigen::VectorXd node_amp(n), node_phase(n);
    for (int i = 0; i < n; ++i) {
      node_amp(i) = amp * (0.4 + 1.2 * pts[i].second);
      node_phase(i) = phase + 3.0 * pts[i].first;
    }
    auto sinusoid = [&](long t) {
      Eigen::VectorXd s(n);
      for (int i = 0; i < n; ++i) s(i) = level + node_amp(i) * std::sin(kTwoPi * static_cast<double>(t) / period + node_phase(i));
      return s;
    };

    std::normal_distribution<double> gauss(0.0, 1.0);
    ds.series.num_nodes = n;
    ds.series.feature_dim = 1;
    ds.series.interval_minutes = spec.interval_minutes;
    ds.series.values.resize(spec.length, n);
    Eigen::VectorXd x = sinusoid(0);
    ds.series.values.row(0) = x.transpose();
    for (long t = 1; t < spec.length; ++t) {
      Eigen::VectorXd next = rho * (a_hat * x) + sinusoid(t);
      if (spec.noise > 0.0)
        for (int i = 0; i < n; ++i) next(i) += spec.noise * gauss(rng);
      x = next;
      ds.series.values.row(t) = x.transpose();
    }
    ds.series.observed.assign(static_cast<std::size_t>(spec.length) * n, 1);
    if (spec.missing_rate > 0.0) {
      // t = 0 stays observed so no node is all-missing
      for (long t = 1; t < spec.length; ++t)
        for (int i = 0; i < n; ++i)
          if (unit(rng) < spec.missing_rate) {
            ds.series.observed[t * n + i] = 0;
            ds.series.values(t, i) = 0.0;
          }
      fill_gaps(ds.series);
    }
    ds.stats = fit_zscore(ds.series);
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace stgfsl
