#pragma once

// Node-level meta knowledge: a bias-free GRU summarizes each node's window
// (temporal part), multi-head graph attention over closed neighborhoods
// summarizes its surroundings (spatial part), and a learnable per-channel
// ratio γ ∈ (0,1)^{d′} mixes the two before a linear map to d_MK.

#include <string>
#include <vector>

#include "stgfsl/autodiff.hpp"
#include "stgfsl/graph_data.hpp"

namespace stgfsl {

inline constexpr double kAttentionSlope = 0.2;

struct TemporalEncoderParams {
  MatD U_z, U_r, U_c;  // d × d′
  MatD W_z, W_r, W_c;  // d′ × d′
};

struct SpatialEncoderParams {
  std::vector<MatD> head_weights;  // K × (d_s × O)
  std::vector<MatD> head_scorers;  // K × (2·O × 1): [a_self; a_neighbor]
};

struct FusionParams {
  MatD gamma_raw;  // 1 × d′, γ = sigmoid(gamma_raw)
  MatD W_gamma;    // d′ × d_MK
};

// Neighborhoods of `batch` stacked copies of the graph (copy b owns rows
// [b·N, (b+1)·N)). With self_loops every node also attends to itself.
inline ad::Csr closed_neighborhoods(const CityGraph& g, int batch = 1, bool self_loops = true) {
  const auto nbrs = g.neighbors();
  ad::Csr csr;
  csr.row_ptr.reserve(static_cast<std::size_t>(batch) * g.num_nodes + 1);
  for (int b = 0; b < batch; ++b) {
    const int off = b * g.num_nodes;
    for (int i = 0; i < g.num_nodes; ++i) {
      bool self_done = !self_loops;
      for (int j : nbrs[i]) {
        if (!self_done && j > i) {
          csr.col.push_back(off + i);
          self_done = true;
        }
        csr.col.push_back(off + j);
      }
      if (!self_done) csr.col.push_back(off + i);
      csr.row_ptr.push_back(static_cast<int>(csr.col.size()));
    }
  }
  return csr;
}

// T × (N·d) window → N × (T·d): row i is node i's flattened history.
inline MatD window_rows(const MatD& window, int num_nodes, int feature_dim) {
  const Eigen::Index steps = window.rows();
  MatD out(num_nodes, steps * feature_dim);
  for (int i = 0; i < num_nodes; ++i)
    for (Eigen::Index t = 0; t < steps; ++t)
      for (int f = 0; f < feature_dim; ++f) out(i, t * feature_dim + f) = window(t, i * feature_dim + f);
  return out;
}

namespace ml {

template <class S>
struct GruVars {
  ad::Var<S> U[3];  // z, r, c
  ad::Var<S> W[3];
};

// One GRU step with pluggable input/hidden maps (gate index 0 = z, 1 = r, 2 = c):
//   z = σ(in_z(x) + hid_z(h)),  r = σ(in_r(x) + hid_r(h))
//   c = tanh(in_c(x) + hid_c(h ∘ r)),  h′ = (1 − z) ∘ c + z ∘ h
template <class S, class InMap, class HidMap>
ad::Var<S> gru_step(ad::Var<S> x, ad::Var<S> h, InMap&& in, HidMap&& hid) {
  const ad::Var<S> z = ad::sigmoid(ad::add(in(0, x), hid(0, h)));
  const ad::Var<S> r = ad::sigmoid(ad::add(in(1, x), hid(1, h)));
  const ad::Var<S> c = ad::tanh(ad::add(in(2, x), hid(2, ad::mul(h, r))));
  return ad::add(ad::mul(ad::one_minus(z), c), ad::mul(z, h));
}

template <class S>
ad::Var<S> gru_cell(ad::Var<S> x, ad::Var<S> h, const GruVars<S>& p) {
  return gru_step(
      x, h, [&](int g, ad::Var<S> v) { return ad::matmul(v, p.U[g]); },
      [&](int g, ad::Var<S> v) { return ad::matmul(v, p.W[g]); });
}

// X: R × (T·d). Runs the cell over T steps from h₀ = 0; returns R × d′.
template <class S>
ad::Var<S> temporal_meta(ad::Var<S> x, int steps, int feature_dim, const GruVars<S>& p) {
  if (x.cols() != static_cast<Eigen::Index>(steps) * feature_dim)
    throw ContractError("temporal_meta: window columns must equal T·d");
  if (p.U[0].rows() != feature_dim) throw ContractError("temporal_meta: U must be d × d′");
  ad::Tape<S>& t = *x.tape;
  ad::Var<S> h = t.constant(Mat<S>::Zero(x.rows(), p.W[0].rows()));
  for (int s = 0; s < steps; ++s) h = gru_cell(ad::slice_cols(x, s * feature_dim, feature_dim), h, p);
  return h;
}

// Per-head transformed features and their attention coefficients.
template <class S>
struct HeadAttention {
  ad::Var<S> transformed;  // R × O
  ad::Var<S> scores;       // E × 1, e_ij
  ad::Var<S> alpha;        // E × 1, softmax within neighborhoods
};

template <class S>
HeadAttention<S> attention_head(ad::Var<S> h, const ad::Csr& csr, ad::Var<S> weight, ad::Var<S> scorer) {
  const Eigen::Index o = weight.cols();
  if (scorer.rows() != 2 * o || scorer.cols() != 1) throw ContractError("attention scorer must be 2·O × 1");
  const ad::Var<S> wh = ad::matmul(h, weight);
  const ad::Var<S> self_part = ad::matmul(wh, ad::slice_rows(scorer, 0, o));
  const ad::Var<S> nbr_part = ad::matmul(wh, ad::slice_rows(scorer, o, o));
  const ad::Var<S> e = ad::leaky_relu(ad::edge_scores(self_part, nbr_part, csr), kAttentionSlope);
  return {wh, e, ad::segment_softmax(e, csr)};
}

// z_i = σ((1/K) Σ_k Σ_j α^k_ij W^k h_j)
template <class S>
ad::Var<S> spatial_meta(ad::Var<S> h, const ad::Csr& csr, const std::vector<ad::Var<S>>& weights,
                        const std::vector<ad::Var<S>>& scorers) {
  if (weights.empty() || weights.size() != scorers.size()) throw ContractError("spatial_meta: need K ≥ 1 heads");
  ad::Var<S> acc{};
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const HeadAttention<S> head = attention_head(h, csr, weights[k], scorers[k]);
    const ad::Var<S> agg = ad::edge_aggregate(head.alpha, head.transformed, csr);
    acc = k == 0 ? agg : ad::add(acc, agg);
  }
  return ad::sigmoid(ad::scale(acc, 1.0 / static_cast<double>(weights.size())));
}

// (γ ∘ Z_tp + (1 − γ) ∘ Z_sp) · W_γ with γ already in ratio form (1 × d′).
template <class S>
ad::Var<S> fuse_with_gamma(ad::Var<S> z_tp, ad::Var<S> z_sp, ad::Var<S> gamma, ad::Var<S> w_gamma) {
  if (z_tp.rows() != z_sp.rows() || z_tp.cols() != z_sp.cols()) throw ContractError("fuse: Z_tp and Z_sp differ in shape");
  const ad::Var<S> mixed = ad::add(ad::mul_rowvec(z_tp, gamma), ad::mul_rowvec(z_sp, ad::one_minus(gamma)));
  return ad::matmul(mixed, w_gamma);
}

template <class S>
ad::Var<S> fuse(ad::Var<S> z_tp, ad::Var<S> z_sp, ad::Var<S> gamma_raw, ad::Var<S> w_gamma) {
  return fuse_with_gamma(z_tp, z_sp, ad::sigmoid(gamma_raw), w_gamma);
}

}  // namespace ml

// ---- value-level API -------------------------------------------------------

namespace detail {

inline ml::GruVars<double> bind_gru(ad::Tape<double>& t, const TemporalEncoderParams& p) {
  for (const MatD* u : {&p.U_z, &p.U_r, &p.U_c})
    if (u->cols() != p.W_z.rows()) throw ContractError("GRU: U must be d × d′ and W d′ × d′");
  for (const MatD* w : {&p.W_z, &p.W_r, &p.W_c})
    if (w->rows() != w->cols() || w->rows() != p.W_z.rows()) throw ContractError("GRU: W must be d′ × d′");
  return {{t.constant(p.U_z), t.constant(p.U_r), t.constant(p.U_c)},
          {t.constant(p.W_z), t.constant(p.W_r), t.constant(p.W_c)}};
}

}  // namespace detail

inline Eigen::VectorXd gru_cell(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev, const TemporalEncoderParams& p) {
  if (x.size() != p.U_z.rows() || h_prev.size() != p.W_z.rows()) throw ContractError("gru_cell: input shapes differ from params");
  ad::Tape<double> t;
  const auto vars = detail::bind_gru(t, p);
  const auto out = ml::gru_cell(t.constant(x.transpose()), t.constant(h_prev.transpose()), vars);
  return out.value().row(0).transpose();
}

// window: T × (N·d). Returns N × d′ final hidden states.
inline MatD temporal_meta(const MatD& window, int num_nodes, int feature_dim, const TemporalEncoderParams& p) {
  ad::Tape<double> t;
  const auto vars = detail::bind_gru(t, p);
  return ml::temporal_meta(t.constant(window_rows(window, num_nodes, feature_dim)), static_cast<int>(window.rows()),
                           feature_dim, vars)
      .value();
}

// Scores or coefficients stored per closed-neighborhood entry.
struct SparseAttention {
  ad::Csr csr;
  Eigen::VectorXd values;

  double at(int i, int j) const {
    for (int e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e)
      if (csr.col[e] == j) return values(e);
    throw ContractError("attention entry (" + std::to_string(i) + "," + std::to_string(j) + ") not in neighborhood");
  }
};

// e_ij = LeakyReLU(aᵀ[W^k h_i ‖ W^k h_j]) for j ∈ N_i ∪ {i}.
inline SparseAttention attention_scores(const MatD& h, const CityGraph& g, const SpatialEncoderParams& p, int head,
                                        bool self_loops = true) {
  if (h.rows() != g.num_nodes) throw ContractError("attention_scores: H must have one row per node");
  SparseAttention out{closed_neighborhoods(g, 1, self_loops), {}};
  for (int i = 0; i < out.csr.num_rows(); ++i)
    if (out.csr.row_ptr[i] == out.csr.row_ptr[i + 1])
      throw DegenerateNeighborhoodError("node " + std::to_string(i) + " is isolated and self-loops are disabled");
  ad::Tape<double> t;
  const auto head_out =
      ml::attention_head(t.constant(h), out.csr, t.constant(p.head_weights.at(head)), t.constant(p.head_scorers.at(head)));
  out.values = head_out.scores.value().col(0);
  return out;
}

// α_ij = softmax over each neighborhood.
inline SparseAttention normalize_attention(const SparseAttention& scores) {
  ad::Tape<double> t;
  SparseAttention out{scores.csr, {}};
  out.values = ad::segment_softmax(t.constant(MatD(scores.values)), out.csr).value().col(0);
  return out;
}

inline MatD spatial_meta(const MatD& h, const CityGraph& g, const SpatialEncoderParams& p, bool self_loops = true) {
  if (h.rows() != g.num_nodes) throw ContractError("spatial_meta: H must have one row per node");
  const ad::Csr csr = closed_neighborhoods(g, 1, self_loops);
  ad::Tape<double> t;
  std::vector<ad::Var<double>> w, a;
  for (std::size_t k = 0; k < p.head_weights.size(); ++k) {
    w.push_back(t.constant(p.head_weights[k]));
    a.push_back(t.constant(p.head_scorers.at(k)));
  }
  return ml::spatial_meta(t.constant(h), csr, w, a).value();
}

inline MatD fuse(const MatD& z_tp, const MatD& z_sp, const FusionParams& p) {
  ad::Tape<double> t;
  return ml::fuse(t.constant(z_tp), t.constant(z_sp), t.constant(p.gamma_raw), t.constant(p.W_gamma)).value();
}

// Test hook: γ supplied directly, bypassing the sigmoid.
inline MatD fuse_with_gamma(const MatD& z_tp, const MatD& z_sp, const MatD& gamma, const MatD& w_gamma) {
  ad::Tape<double> t;
  return ml::fuse_with_gamma(t.constant(z_tp), t.constant(z_sp), t.constant(gamma), t.constant(w_gamma)).value();
}

}  // namespace stgfsl
