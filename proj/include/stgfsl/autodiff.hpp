#pragma once

// Reverse-mode automatic differentiation over row-major Eigen matrices.
//
// A Tape records every operation as a node holding its value, a lazily
// allocated gradient, and a backward closure. Everything is templated on the
// scalar so the same model code runs on double (values + gradients) and on
// Dual (gradients + Hessian-vector products).

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "stgfsl/dual.hpp"
#include "stgfsl/errors.hpp"

namespace stgfsl {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatD = Mat<double>;

namespace ad {

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat<S>&)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Mat<S> value) { return push(std::move(value), false, nullptr); }
  Var<S> variable(Mat<S> value) { return push(std::move(value), true, nullptr); }

  Var<S> push(Mat<S> value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat<S>(), needs_grad, needs_grad ? std::move(backward) : nullptr});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<S>& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  // Gradient of the last backward() root with respect to node `id`; zeros
  // when the node did not influence the root.
  Mat<S> grad(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Mat<S>& grad_acc(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every node.
  void backward(Var<S> root) {
    if (root.rows() != 1 || root.cols() != 1) throw ContractError("backward root must be a 1x1 scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_acc(root.id)(0, 0) = S(1.0);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool needs_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ContractError(std::string(op) + ": " + what);
}

template <class S>
S sigmoid_scalar(const S& x) {
  using std::exp;
  if (x >= S(0.0)) return S(1.0) / (S(1.0) + exp(-x));
  const S e = exp(x);
  return e / (S(1.0) + e);
}

template <class S>
S tanh_scalar(const S& x) {
  using std::tanh;
  return tanh(x);
}

}  // namespace detail

template <class S>
S sigmoid(const S& x) {
  return detail::sigmoid_scalar(x);
}

// ---- dense algebra ---------------------------------------------------------

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require(a.cols() == b.rows(), "matmul", "inner dimensions differ");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value() * b.value();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(std::move(out), ng, [a, b](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(a.id)) tp.grad_acc(a.id).noalias() += g * tp.value(b.id).transpose();
    if (tp.needs_grad(b.id)) tp.grad_acc(b.id).noalias() += tp.value(a.id).transpose() * g;
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add", "shape mismatch");
  Tape<S>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(a.value() + b.value(), ng, [a, b](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(a.id)) tp.grad_acc(a.id) += g;
    if (tp.needs_grad(b.id)) tp.grad_acc(b.id) += g;
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", "shape mismatch");
  Tape<S>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(a.value() - b.value(), ng, [a, b](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(a.id)) tp.grad_acc(a.id) += g;
    if (tp.needs_grad(b.id)) tp.grad_acc(b.id) -= g;
  });
}

// Elementwise product.
template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul", "shape mismatch");
  Tape<S>& t = *a.tape;
  const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
  return t.push(a.value().cwiseProduct(b.value()), ng, [a, b](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(a.id)) tp.grad_acc(a.id) += g.cwiseProduct(tp.value(b.id));
    if (tp.needs_grad(b.id)) tp.grad_acc(b.id) += g.cwiseProduct(tp.value(a.id));
  });
}

template <class S>
Var<S> scale(Var<S> a, double c) {
  Tape<S>& t = *a.tape;
  return t.push(a.value() * S(c), t.needs_grad(a.id),
                [a, c](Tape<S>& tp, const Mat<S>& g) { tp.grad_acc(a.id) += g * S(c); });
}

// 1 - a
template <class S>
Var<S> one_minus(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = (-a.value()).array() + S(1.0);
  return t.push(std::move(out), t.needs_grad(a.id),
                [a](Tape<S>& tp, const Mat<S>& g) { tp.grad_acc(a.id) -= g; });
}

// a + 1·v, v a 1×cols row vector broadcast over rows.
template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> v) {
  detail::require(v.rows() == 1 && v.cols() == a.cols(), "add_rowvec", "bias must be 1 x cols");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().rowwise() + v.value().row(0);
  const bool ng = t.needs_grad(a.id) || t.needs_grad(v.id);
  return t.push(std::move(out), ng, [a, v](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(a.id)) tp.grad_acc(a.id) += g;
    if (tp.needs_grad(v.id)) tp.grad_acc(v.id) += g.colwise().sum();
  });
}

// a ∘ (1·v), v a 1×cols row vector broadcast over rows.
template <class S>
Var<S> mul_rowvec(Var<S> a, Var<S> v) {
  detail::require(v.rows() == 1 && v.cols() == a.cols(), "mul_rowvec", "scale must be 1 x cols");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().array().rowwise() * v.value().row(0).array();
  const bool ng = t.needs_grad(a.id) || t.needs_grad(v.id);
  return t.push(std::move(out), ng, [a, v](Tape<S>& tp, const Mat<S>& g) {
    if (tp.needs_grad(a.id)) tp.grad_acc(a.id).array() += g.array().rowwise() * tp.value(v.id).row(0).array();
    if (tp.needs_grad(v.id)) tp.grad_acc(v.id) += g.cwiseProduct(tp.value(a.id)).colwise().sum();
  });
}

// ---- elementwise nonlinearities ------------------------------------------

template <class S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().unaryExpr([](const S& x) { return detail::sigmoid_scalar(x); });
  const int out_id = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(a.id), [a, out_id](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y = tp.value(out_id);
    tp.grad_acc(a.id).array() += g.array() * y.array() * (S(1.0) - y.array());
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().unaryExpr([](const S& x) { return detail::tanh_scalar(x); });
  const int out_id = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(a.id), [a, out_id](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y = tp.value(out_id);
    tp.grad_acc(a.id).array() += g.array() * (S(1.0) - y.array().square());
  });
}

template <class S>
Var<S> leaky_relu(Var<S> a, double slope) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().unaryExpr([slope](const S& x) { return x > S(0.0) ? x : x * S(slope); });
  return t.push(std::move(out), t.needs_grad(a.id), [a, slope](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& x = tp.value(a.id);
    Mat<S>& ga = tp.grad_acc(a.id);
    for (Eigen::Index i = 0; i < x.size(); ++i) ga.data()[i] += x.data()[i] > S(0.0) ? g.data()[i] : g.data()[i] * S(slope);
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  return leaky_relu(a, 0.0);
}

// ---- shape manipulation ----------------------------------------------------

// Row-major reinterpretation; element order is preserved.
template <class S>
Var<S> reshape(Var<S> a, Eigen::Index rows, Eigen::Index cols) {
  detail::require(rows * cols == a.value().size(), "reshape", "element count changes");
  Tape<S>& t = *a.tape;
  Mat<S> out = Eigen::Map<const Mat<S>>(a.value().data(), rows, cols);
  return t.push(std::move(out), t.needs_grad(a.id), [a](Tape<S>& tp, const Mat<S>& g) {
    Mat<S>& ga = tp.grad_acc(a.id);
    Eigen::Map<Mat<S>>(ga.data(), g.rows(), g.cols()) += g;
  });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.cols(), "slice_cols", "range out of bounds");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().middleCols(start, count);
  return t.push(std::move(out), t.needs_grad(a.id), [a, start, count](Tape<S>& tp, const Mat<S>& g) {
    tp.grad_acc(a.id).middleCols(start, count) += g;
  });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.rows(), "slice_rows", "range out of bounds");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().middleRows(start, count);
  return t.push(std::move(out), t.needs_grad(a.id), [a, start, count](Tape<S>& tp, const Mat<S>& g) {
    tp.grad_acc(a.id).middleRows(start, count) += g;
  });
}

// Vertical stack of `times` copies of a.
template <class S>
Var<S> tile_rows(Var<S> a, Eigen::Index times) {
  Tape<S>& t = *a.tape;
  const Eigen::Index r = a.rows();
  Mat<S> out(r * times, a.cols());
  for (Eigen::Index k = 0; k < times; ++k) out.middleRows(k * r, r) = a.value();
  return t.push(std::move(out), t.needs_grad(a.id), [a, r, times](Tape<S>& tp, const Mat<S>& g) {
    Mat<S>& ga = tp.grad_acc(a.id);
    for (Eigen::Index k = 0; k < times; ++k) ga += g.middleRows(k * r, r);
  });
}

// ---- reductions -------------------------------------------------------------

template <class S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), t.needs_grad(a.id),
                [a](Tape<S>& tp, const Mat<S>& g) { tp.grad_acc(a.id).array() += g(0, 0); });
}

// Σ a².
template <class S>
Var<S> sum_squares(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return t.push(std::move(out), t.needs_grad(a.id), [a](Tape<S>& tp, const Mat<S>& g) {
    tp.grad_acc(a.id) += (S(2.0) * g(0, 0)) * tp.value(a.id);
  });
}

// ---- graph attention primitives --------------------------------------------

// Compressed neighborhoods: node i's neighbors are col[row_ptr[i] .. row_ptr[i+1]).
struct Csr {
  std::vector<int> row_ptr{0};
  std::vector<int> col;

  int num_rows() const { return static_cast<int>(row_ptr.size()) - 1; }
  int num_edges() const { return static_cast<int>(col.size()); }
};

// e_ij = src_score_i + dst_score_j for every stored (i, j).
template <class S>
Var<S> edge_scores(Var<S> src_score, Var<S> dst_score, const Csr& csr) {
  detail::require(src_score.cols() == 1 && dst_score.cols() == 1, "edge_scores", "scores must be column vectors");
  detail::require(src_score.rows() == csr.num_rows() && dst_score.rows() == csr.num_rows(), "edge_scores",
                  "score rows differ from neighborhood rows");
  Tape<S>& t = *src_score.tape;
  Mat<S> out(csr.num_edges(), 1);
  const auto& s = src_score.value();
  const auto& d = dst_score.value();
  for (int i = 0; i < csr.num_rows(); ++i)
    for (int e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) out(e, 0) = s(i, 0) + d(csr.col[e], 0);
  const bool ng = t.needs_grad(src_score.id) || t.needs_grad(dst_score.id);
  return t.push(std::move(out), ng, [src_score, dst_score, &csr](Tape<S>& tp, const Mat<S>& g) {
    const bool gs = tp.needs_grad(src_score.id), gd = tp.needs_grad(dst_score.id);
    Mat<S>* dsrc = gs ? &tp.grad_acc(src_score.id) : nullptr;
    Mat<S>* ddst = gd ? &tp.grad_acc(dst_score.id) : nullptr;
    for (int i = 0; i < csr.num_rows(); ++i)
      for (int e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) {
        if (gs) (*dsrc)(i, 0) += g(e, 0);
        if (gd) (*ddst)(csr.col[e], 0) += g(e, 0);
      }
  });
}

// Softmax of edge scores within each node's neighborhood, max-shifted.
template <class S>
Var<S> segment_softmax(Var<S> scores, const Csr& csr) {
  detail::require(scores.rows() == csr.num_edges() && scores.cols() == 1, "segment_softmax",
                  "one score per stored edge expected");
  using std::exp;
  Tape<S>& t = *scores.tape;
  const auto& e = scores.value();
  Mat<S> out(csr.num_edges(), 1);
  for (int i = 0; i < csr.num_rows(); ++i) {
    const int b = csr.row_ptr[i], f = csr.row_ptr[i + 1];
    if (b == f) throw DegenerateNeighborhoodError("node " + std::to_string(i) + " has an empty neighborhood");
    S mx = e(b, 0);
    for (int k = b + 1; k < f; ++k)
      if (e(k, 0) > mx) mx = e(k, 0);
    S z(0.0);
    for (int k = b; k < f; ++k) {
      out(k, 0) = exp(e(k, 0) - mx);
      z += out(k, 0);
    }
    for (int k = b; k < f; ++k) out(k, 0) /= z;
  }
  const int out_id = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(scores.id), [scores, out_id, &csr](Tape<S>& tp, const Mat<S>& g) {
    const Mat<S>& y = tp.value(out_id);
    Mat<S>& gs = tp.grad_acc(scores.id);
    for (int i = 0; i < csr.num_rows(); ++i) {
      S dot(0.0);
      for (int k = csr.row_ptr[i]; k < csr.row_ptr[i + 1]; ++k) dot += g(k, 0) * y(k, 0);
      for (int k = csr.row_ptr[i]; k < csr.row_ptr[i + 1]; ++k) gs(k, 0) += y(k, 0) * (g(k, 0) - dot);
    }
  });
}

// out_i = Σ_j weight_ij · x_j over the stored neighborhood of i.
template <class S>
Var<S> edge_aggregate(Var<S> weights, Var<S> x, const Csr& csr) {
  detail::require(weights.rows() == csr.num_edges() && weights.cols() == 1, "edge_aggregate",
                  "one weight per stored edge expected");
  detail::require(x.rows() == csr.num_rows(), "edge_aggregate", "feature rows differ from neighborhood rows");
  Tape<S>& t = *weights.tape;
  const auto& w = weights.value();
  const auto& xv = x.value();
  Mat<S> out = Mat<S>::Zero(xv.rows(), xv.cols());
  for (int i = 0; i < csr.num_rows(); ++i)
    for (int e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) out.row(i) += w(e, 0) * xv.row(csr.col[e]);
  const bool ng = t.needs_grad(weights.id) || t.needs_grad(x.id);
  return t.push(std::move(out), ng, [weights, x, &csr](Tape<S>& tp, const Mat<S>& g) {
    const bool gw = tp.needs_grad(weights.id), gx = tp.needs_grad(x.id);
    const auto& w = tp.value(weights.id);
    const auto& xv = tp.value(x.id);
    Mat<S>* dw = gw ? &tp.grad_acc(weights.id) : nullptr;
    Mat<S>* dx = gx ? &tp.grad_acc(x.id) : nullptr;
    for (int i = 0; i < csr.num_rows(); ++i)
      for (int e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) {
        const int j = csr.col[e];
        if (gw) (*dw)(e, 0) += g.row(i).dot(xv.row(j));
        if (gx) dx->row(j) += w(e, 0) * g.row(i);
      }
  });
}

// ---- blocked and batched products -----------------------------------------

// Per block b of `block` consecutive rows: out_b = Z_b Z_bᵀ. Result stacks the
// block Gram matrices vertically: (B·block) × block.
template <class S>
Var<S> block_gram(Var<S> z, Eigen::Index block) {
  detail::require(block > 0 && z.rows() % block == 0, "block_gram", "rows must be a multiple of the block size");
  Tape<S>& t = *z.tape;
  const Eigen::Index nb = z.rows() / block;
  Mat<S> out(z.rows(), block);
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto zb = z.value().middleRows(b * block, block);
    out.middleRows(b * block, block).noalias() = zb * zb.transpose();
  }
  return t.push(std::move(out), t.needs_grad(z.id), [z, block, nb](Tape<S>& tp, const Mat<S>& g) {
    Mat<S>& gz = tp.grad_acc(z.id);
    for (Eigen::Index b = 0; b < nb; ++b) {
      const auto gb = g.middleRows(b * block, block);
      const auto zb = tp.value(z.id).middleRows(b * block, block);
      gz.middleRows(b * block, block).noalias() += (gb + gb.transpose()) * zb;
    }
  });
}

// y_r = x_r · W_r where W_r is rows [r·d_in, (r+1)·d_in) of w.
template <class S>
Var<S> batched_rowmat(Var<S> x, Var<S> w) {
  const Eigen::Index n = x.rows(), din = x.cols();
  detail::require(w.rows() == n * din, "batched_rowmat", "weight stack rows must equal rows·d_in");
  Tape<S>& t = *x.tape;
  const Eigen::Index dout = w.cols();
  Mat<S> out(n, dout);
  for (Eigen::Index r = 0; r < n; ++r) out.row(r).noalias() = x.value().row(r) * w.value().middleRows(r * din, din);
  const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id);
  return t.push(std::move(out), ng, [x, w, n, din](Tape<S>& tp, const Mat<S>& g) {
    const bool gx = tp.needs_grad(x.id), gw = tp.needs_grad(w.id);
    Mat<S>* dx = gx ? &tp.grad_acc(x.id) : nullptr;
    Mat<S>* dw = gw ? &tp.grad_acc(w.id) : nullptr;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (gx) dx->row(r).noalias() += g.row(r) * tp.value(w.id).middleRows(r * din, din).transpose();
      if (gw) dw->middleRows(r * din, din).noalias() += tp.value(x.id).row(r).transpose() * g.row(r);
    }
  });
}

// Shape of a per-row causal 1D convolution.
struct ConvShape {
  Eigen::Index steps = 0;     // T
  Eigen::Index c_in = 0;
  Eigen::Index c_out = 0;
  Eigen::Index kernel = 0;    // K_W
  Eigen::Index dilation = 1;
};

// Causal dilated 1D convolution with a separate kernel per row.
//   x:  R × (T·C_in), time-major then channel
//   w:  (R·C_in) × (C_out·K), kernel tap k of (ci, co) at column co·K + k
//   b:  R × C_out
//   out[r, t·C_out + co] = b[r, co] + Σ_{ci,k} w_r[ci, co·K + k] · x[r, (t − dil·(K−1−k))·C_in + ci]
// Inputs before t = 0 are zero (left padding).
template <class S>
Var<S> causal_conv(Var<S> x, Var<S> w, Var<S> b, ConvShape s) {
  const Eigen::Index n = x.rows();
  detail::require(x.cols() == s.steps * s.c_in, "causal_conv", "input columns must equal T·C_in");
  detail::require(w.rows() == n * s.c_in && w.cols() == s.c_out * s.kernel, "causal_conv",
                  "kernel stack must be (R·C_in) × (C_out·K)");
  detail::require(b.rows() == n && b.cols() == s.c_out, "causal_conv", "bias must be R × C_out");
  Tape<S>& t = *x.tape;
  Mat<S> out(n, s.steps * s.c_out);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index ts = 0; ts < s.steps; ++ts)
      for (Eigen::Index co = 0; co < s.c_out; ++co) {
        S acc = bv(r, co);
        for (Eigen::Index k = 0; k < s.kernel; ++k) {
          const Eigen::Index src = ts - s.dilation * (s.kernel - 1 - k);
          if (src < 0) continue;
          for (Eigen::Index ci = 0; ci < s.c_in; ++ci)
            acc += wv(r * s.c_in + ci, co * s.kernel + k) * xv(r, src * s.c_in + ci);
        }
        out(r, ts * s.c_out + co) = acc;
      }
  const bool ng = t.needs_grad(x.id) || t.needs_grad(w.id) || t.needs_grad(b.id);
  return t.push(std::move(out), ng, [x, w, b, s, n](Tape<S>& tp, const Mat<S>& g) {
    const bool gx = tp.needs_grad(x.id), gw = tp.needs_grad(w.id), gb = tp.needs_grad(b.id);
    const auto& xv = tp.value(x.id);
    const auto& wv = tp.value(w.id);
    Mat<S>* dx = gx ? &tp.grad_acc(x.id) : nullptr;
    Mat<S>* dw = gw ? &tp.grad_acc(w.id) : nullptr;
    Mat<S>* db = gb ? &tp.grad_acc(b.id) : nullptr;
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index ts = 0; ts < s.steps; ++ts)
        for (Eigen::Index co = 0; co < s.c_out; ++co) {
          const S go = g(r, ts * s.c_out + co);
          if (gb) (*db)(r, co) += go;
          for (Eigen::Index k = 0; k < s.kernel; ++k) {
            const Eigen::Index src = ts - s.dilation * (s.kernel - 1 - k);
            if (src < 0) continue;
            for (Eigen::Index ci = 0; ci < s.c_in; ++ci) {
              if (gw) (*dw)(r * s.c_in + ci, co * s.kernel + k) += go * xv(r, src * s.c_in + ci);
              if (gx) (*dx)(r, src * s.c_in + ci) += go * wv(r * s.c_in + ci, co * s.kernel + k);
            }
          }
        }
  });
}

}  // namespace ad
}  // namespace stgfsl
