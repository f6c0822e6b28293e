#pragma once

// Two-step hypernetwork generation of per-node layer parameters from meta
// knowledge.
//
// Linear layer, per node i with meta knowledge z (length d_MK):
//   v   = z · S1 (+ c1)               S1: d_MK × (d_in·d_MK)
//   V   = reshape(v, d_in × d_MK)
//   W_i = V · S2 (+ 1·c2)             S2: d_MK × d_out, acting on the last axis
//   b_i = z · B (+ c3)                B:  d_MK × d_out
// Convolutions reuse the same maps with d_in = C_in and d_out = C_out·K_H·K_W,
// and the result is read as a C_in × C_out × K_H × K_W kernel.
//
// count_params reports weight-only counts (S1 and S2), which is what the
// d_MK·(d_in·d_MK + d_out) formula describes. The optional generator biases
// c1, c2 and the bias generator (B, c3) are extra trainable parameters on
// top of that count.

#include <cmath>
#include <random>
#include <string>

#include "stgfsl/autodiff.hpp"
#include "stgfsl/params.hpp"

namespace stgfsl {

struct LinearGenSpec {
  int d_mk = 16;
  int d_in = 1;
  int d_out = 1;
  bool include_generator_bias = true;  // c1, c2, c3
  int bias_out = 0;                    // bias length; 0 means d_out

  int bias_dim() const { return bias_out > 0 ? bias_out : d_out; }
};

struct ConvGenSpec {
  int d_mk = 16;
  int c_in = 1;
  int c_out = 1;
  int k_h = 1;
  int k_w = 1;
  bool include_generator_bias = true;

  LinearGenSpec as_linear() const { return {d_mk, c_in, c_out * k_h * k_w, include_generator_bias, c_out}; }
};

// Per-node parameters. Linear: weights (N·d_in) × d_out, node i owning rows
// [i·d_in, (i+1)·d_in). Conv: weights (N·C_in) × (C_out·K_H·K_W).
struct GeneratedLayer {
  MatD weights;
  MatD biases;  // N × d_out (N × C_out for convolutions)
};

struct ParamCount {
  long long two_step = 0;
  long long one_step = 0;
  double reduction = 0.0;  // 1 − two_step/one_step; negative when two-step is larger
};

inline ParamCount count_params(long long d_mk, long long d_in, long long d_out) {
  if (d_mk < 1 || d_in < 1 || d_out < 1) throw ParameterError("count_params: dimensions must be positive");
  ParamCount c;
  c.two_step = d_mk * (d_in * d_mk + d_out);
  c.one_step = d_mk * d_in * d_out;
  c.reduction = 1.0 - static_cast<double>(c.two_step) / static_cast<double>(c.one_step);
  return c;
}

// Registers generator segments under `prefix`. Weights are U[−1/√fan_in,
// 1/√fan_in]·0.1; biases U[−1/√fan_in, 1/√fan_in].
inline void add_linear_generator(Params& theta, const std::string& prefix, const LinearGenSpec& s, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(s.d_mk));
  theta.add(prefix + ".step1.w", uniform_matrix(s.d_mk, static_cast<Eigen::Index>(s.d_in) * s.d_mk, 0.1 * bound, rng));
  theta.add(prefix + ".step2.w", uniform_matrix(s.d_mk, s.d_out, 0.1 * bound, rng));
  theta.add(prefix + ".bias.w", uniform_matrix(s.d_mk, s.bias_dim(), 0.1 * bound, rng));
  if (s.include_generator_bias) {
    theta.add(prefix + ".step1.b", uniform_matrix(1, static_cast<Eigen::Index>(s.d_in) * s.d_mk, bound, rng));
    theta.add(prefix + ".step2.b", uniform_matrix(1, s.d_out, bound, rng));
    theta.add(prefix + ".bias.b", uniform_matrix(1, s.bias_dim(), bound, rng));
  }
}

// Trainable weights of the two-step maps only (S1 and S2).
inline long long generator_weight_count(const Params& theta, const std::string& prefix) {
  return theta[prefix + ".step1.w"].size() + theta[prefix + ".step2.w"].size();
}

namespace gen {

template <class S>
struct LinearGenVars {
  ad::Var<S> step1_w, step2_w, bias_w;
  ad::Var<S> step1_b, step2_b, bias_b;  // id < 0 when absent
};

template <class S>
LinearGenVars<S> bind_linear(const BoundParams<S>& p, const std::string& prefix) {
  LinearGenVars<S> v{p[prefix + ".step1.w"], p[prefix + ".step2.w"], p[prefix + ".bias.w"], {}, {}, {}};
  if (p.contains(prefix + ".step1.b")) {
    v.step1_b = p[prefix + ".step1.b"];
    v.step2_b = p[prefix + ".step2.b"];
    v.bias_b = p[prefix + ".bias.b"];
  }
  return v;
}

template <class S>
struct GeneratedVars {
  ad::Var<S> weights;  // (R·d_in) × d_out
  ad::Var<S> biases;   // R × d_out
};

// Z: R × d_MK → per-row weights and biases.
template <class S>
GeneratedVars<S> gen_linear(ad::Var<S> z, const LinearGenVars<S>& g, Eigen::Index d_in) {
  const Eigen::Index d_mk = z.cols();
  if (g.step1_w.rows() != d_mk || g.step1_w.cols() != d_in * d_mk)
    throw ContractError("gen_linear: step1 must map d_MK to d_in·d_MK");
  if (g.step2_w.rows() != d_mk) throw ContractError("gen_linear: step2 must act on a d_MK axis");
  const Eigen::Index rows = z.rows();
  ad::Var<S> v = ad::matmul(z, g.step1_w);
  if (g.step1_b.id >= 0) v = ad::add_rowvec(v, g.step1_b);
  ad::Var<S> w = ad::matmul(ad::reshape(v, rows * d_in, d_mk), g.step2_w);
  if (g.step2_b.id >= 0) w = ad::add_rowvec(w, g.step2_b);
  ad::Var<S> b = ad::matmul(z, g.bias_w);
  if (g.bias_b.id >= 0) b = ad::add_rowvec(b, g.bias_b);
  return {w, b};
}

// y_r = x_r · W_r + b_r
template <class S>
ad::Var<S> apply_linear(ad::Var<S> x, const GeneratedVars<S>& layer) {
  if (layer.biases.rows() != x.rows()) throw ContractError("apply_generated_linear: node counts differ");
  return ad::add(ad::batched_rowmat(x, layer.weights), layer.biases);
}

}  // namespace gen

// ---- value-level API -------------------------------------------------------

// Standalone generator parameters (mirrors the θ segments).
struct LinearGenerator {
  LinearGenSpec spec;
  MatD step1_w, step2_w, bias_w;
  MatD step1_b, step2_b, bias_b;  // empty when spec.include_generator_bias is off

  static LinearGenerator random(const LinearGenSpec& s, std::mt19937_64& rng) {
    Params p;
    add_linear_generator(p, "g", s, rng);
    LinearGenerator g{s, p["g.step1.w"], p["g.step2.w"], p["g.bias.w"], {}, {}, {}};
    if (s.include_generator_bias) {
      g.step1_b = p["g.step1.b"];
      g.step2_b = p["g.step2.b"];
      g.bias_b = p["g.bias.b"];
    }
    return g;
  }
};

namespace detail {

inline gen::LinearGenVars<double> bind_generator(ad::Tape<double>& t, const LinearGenerator& g) {
  gen::LinearGenVars<double> v{t.constant(g.step1_w), t.constant(g.step2_w), t.constant(g.bias_w), {}, {}, {}};
  if (g.spec.include_generator_bias) {
    v.step1_b = t.constant(g.step1_b);
    v.step2_b = t.constant(g.step2_b);
    v.bias_b = t.constant(g.bias_b);
  }
  return v;
}

}  // namespace detail

inline GeneratedLayer gen_linear(const MatD& z, const LinearGenerator& g) {
  if (z.cols() != g.spec.d_mk) throw ContractError("gen_linear: Z must have d_MK columns");
  if (g.step2_w.cols() != g.spec.d_out) throw ContractError("gen_linear: step2 must produce d_out columns");
  ad::Tape<double> t;
  const auto out = gen::gen_linear(t.constant(z), detail::bind_generator(t, g), g.spec.d_in);
  return {out.weights.value(), out.biases.value()};
}

// Kernel of node i, element [ci][co][kh][kw], sits at weights(i·C_in + ci, (co·K_H + kh)·K_W + kw).
inline GeneratedLayer gen_conv(const MatD& z, const ConvGenSpec& spec, const LinearGenerator& g) {
  const LinearGenSpec lin = spec.as_linear();
  if (g.spec.d_in != lin.d_in || g.spec.d_out != lin.d_out || g.spec.d_mk != lin.d_mk)
    throw ContractError("gen_conv: generator dimensions do not match the kernel shape");
  return gen_linear(z, g);
}

inline MatD apply_generated_linear(const MatD& x, const GeneratedLayer& layer) {
  if (layer.biases.rows() != x.rows() || layer.weights.rows() != x.rows() * x.cols())
    throw ContractError("apply_generated_linear: node axes disagree");
  ad::Tape<double> t;
  return gen::apply_linear(t.constant(x), gen::GeneratedVars<double>{t.constant(layer.weights), t.constant(layer.biases)})
      .value();
}

}  // namespace stgfsl
