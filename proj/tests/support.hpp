#pragma once

// Shared fixtures for the test suite: random instances, tolerance checks and
// central finite differences.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "stgfsl/graph_data.hpp"
#include "stgfsl/params.hpp"
#include "stgfsl/stnn.hpp"

namespace testing_support {

using stgfsl::MatD;
using stgfsl::Params;

inline MatD random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  MatD m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = g(rng);
  return m;
}

inline bool close_rel(double a, double b, double tol, double floor = 1.0) {
  return std::abs(a - b) <= tol * std::max({floor, std::abs(a), std::abs(b)});
}

inline double max_abs_diff(const MatD& a, const MatD& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return (a - b).cwiseAbs().maxCoeff();
}

// Undirected random graph on n nodes with edge probability p; every node gets
// at least one neighbor.
inline stgfsl::CityGraph random_graph(int n, double p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<stgfsl::Edge> edges;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (u(rng) < p || j == i + 1) {
        edges.push_back({i, j, 1.0});
        edges.push_back({j, i, 1.0});
      }
  return stgfsl::make_graph(n, edges);
}

inline stgfsl::CityGraph path_graph(int n) {
  std::vector<stgfsl::Edge> edges;
  for (int i = 0; i + 1 < n; ++i) {
    edges.push_back({i, i + 1, 1.0});
    edges.push_back({i + 1, i, 1.0});
  }
  return stgfsl::make_graph(n, edges);
}

inline stgfsl::WindowSample random_window(int steps, int horizon, int n, int d, std::mt19937_64& rng, int t0 = 0) {
  return {random_matrix(steps, n * d, rng), random_matrix(horizon, n * d, rng), t0};
}

// Small model used by gradient and oracle checks.
inline stgfsl::ModelConfig tiny_model(int d = 1, int history = 6, int horizon = 2, int d_mk = 4, int hidden = 8) {
  stgfsl::ModelConfig m;
  m.feature_dim = d;
  m.history = history;
  m.horizon = horizon;
  m.d_mk = d_mk;
  m.hidden = hidden;
  m.d_hidden = 5;
  m.heads = 2;
  return m;
}

// θ with every entry redrawn from N(0, scale²) (initializers start generators
// tiny, which would hide errors in the generated path).
inline Params scrambled(const Params& theta, std::mt19937_64& rng, double scale = 0.5) {
  Params out = theta;
  for (std::size_t i = 0; i < out.num_segments(); ++i)
    out.segment(i) = random_matrix(out.segment(i).rows(), out.segment(i).cols(), rng, scale);
  return out;
}

// Central difference of f along flat coordinate k of θ.
inline double central_difference(const std::function<double(const Params&)>& f, const Params& theta, Eigen::Index k,
                                 double h = 1e-5) {
  Params plus = theta, minus = theta;
  plus.flat(k) += h;
  minus.flat(k) -= h;
  return (f(plus) - f(minus)) / (2.0 * h);
}

// Distinct random flat coordinates (all of them when fewer exist).
inline std::vector<Eigen::Index> sample_coordinates(Eigen::Index total, std::size_t count, std::mt19937_64& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(total));
  for (Eigen::Index k = 0; k < total; ++k) idx[static_cast<std::size_t>(k)] = k;
  std::shuffle(idx.begin(), idx.end(), rng);
  if (idx.size() > count) idx.resize(count);
  return idx;
}

// |g − fd| / max(|g|, |fd|, floor): relative error with a floor so that
// coordinates whose true derivative is ~0 are compared absolutely.
inline double gradient_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace testing_support
