#pragma once

// Meta-graph reconstruction: A_meta = sigmoid(Z Zᵀ) per window, compared to
// the symmetrized binary adjacency by a squared Frobenius loss.
//
// The reconstructed graph is the N × N matrix of pairwise inner products of
// node embeddings, i.e. edge probabilities sigmoid(⟨z_i, z_j⟩).

#include "stgfsl/autodiff.hpp"

namespace stgfsl {

namespace recon {

// Z: (B·N) × d_MK stacked per window → (B·N) × N stacked meta graphs.
template <class S>
ad::Var<S> meta_graph(ad::Var<S> z, Eigen::Index num_nodes) {
  return ad::sigmoid(ad::block_gram(z, num_nodes));
}

// Mean over the B stacked windows of ‖A_meta,b − A‖²_F, divided by N² when
// `normalize` is set.
template <class S>
ad::Var<S> recon_loss(ad::Var<S> a_meta, const MatD& target, bool normalize) {
  const Eigen::Index n = target.rows();
  if (target.cols() != n || a_meta.cols() != n || a_meta.rows() % n != 0)
    throw ContractError("recon_loss: A_meta and target shapes differ");
  const Eigen::Index windows = a_meta.rows() / n;
  ad::Tape<S>& t = *a_meta.tape;
  const ad::Var<S> tgt = ad::tile_rows(t.constant(target.cast<S>()), windows);
  double denom = static_cast<double>(windows);
  if (normalize) denom *= static_cast<double>(n * n);
  return ad::scale(ad::sum_squares(ad::sub(a_meta, tgt)), 1.0 / denom);
}

}  // namespace recon

inline MatD meta_graph(const MatD& z) {
  ad::Tape<double> t;
  return recon::meta_graph(t.constant(z), z.rows()).value();
}

inline double recon_loss(const MatD& a_meta, const MatD& target, bool normalize = false) {
  if (a_meta.rows() != target.rows() || a_meta.cols() != target.cols()) throw ContractError("recon_loss: shape mismatch");
  ad::Tape<double> t;
  return recon::recon_loss(t.constant(a_meta), target, normalize).value()(0, 0);
}

}  // namespace stgfsl
