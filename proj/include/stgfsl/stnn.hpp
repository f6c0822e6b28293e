#pragma once

// Spatio-temporal network: meta knowledge → generated per-node extractor
// (GRU or two-branch dilated causal TCN) → shared multi-step predictor.
// Ablations reroute the meta-knowledge path (M1a/M1b/M1c) or replace the
// generated extractor with a shared one (M2); M3 lives in the loss.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stgfsl/autodiff.hpp"
#include "stgfsl/graph_data.hpp"
#include "stgfsl/graph_recon.hpp"
#include "stgfsl/meta_learner.hpp"
#include "stgfsl/param_gen.hpp"
#include "stgfsl/params.hpp"

namespace stgfsl {

enum class Ablation { none, m1a, m1b, m1c, m2, m3 };
enum class ExtractorKind { gru, tcn };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::m1a: return "M1a";
    case Ablation::m1b: return "M1b";
    case Ablation::m1c: return "M1c";
    case Ablation::m2: return "M2";
    case Ablation::m3: return "M3";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  for (Ablation a : {Ablation::none, Ablation::m1a, Ablation::m1b, Ablation::m1c, Ablation::m2, Ablation::m3}) {
    std::string name = to_string(a), lower = s;
    for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (name == lower) return a;
  }
  if (s == "full") return Ablation::none;
  throw ConfigError("unknown ablation '" + s + "' (expected none|M1a|M1b|M1c|M2|M3)");
}

struct ModelConfig {
  int feature_dim = 1;  // d
  int history = 12;     // T
  int horizon = 6;      // M
  int d_hidden = 32;    // d′
  int heads = 2;        // K
  int d_mk = 16;
  int hidden = 16;      // extractor feature size F
  ExtractorKind extractor = ExtractorKind::gru;
  std::vector<int> tcn_kernels{2, 3};
  std::vector<int> tcn_dilations{1, 2};
  bool generator_bias = true;
  bool spatial_from_hidden = false;  // attention over GRU states instead of raw windows
  bool self_loops = true;
  Ablation ablation = Ablation::none;

  bool generated_extractor() const { return ablation != Ablation::m2; }
  bool uses_meta_learner() const { return ablation != Ablation::m1c; }
  int spatial_input_dim() const { return spatial_from_hidden ? d_hidden : history * feature_dim; }
};

inline const char* const kGruMatrices[6] = {"U_z", "U_r", "U_c", "W_z", "W_r", "W_c"};

inline std::string embedding_segment(const std::string& city) { return "embed." + city; }

inline std::string tcn_prefix(int kernel, int layer) {
  return "tcn.k" + std::to_string(kernel) + ".l" + std::to_string(layer);
}

// Adds a trainable per-node embedding table for `city` (M1c) if absent.
inline void ensure_city_embedding(Params& theta, const ModelConfig& cfg, const std::string& city, int num_nodes,
                                  std::mt19937_64& rng) {
  if (cfg.ablation != Ablation::m1c || theta.contains(embedding_segment(city))) return;
  theta.add(embedding_segment(city), uniform_matrix(num_nodes, cfg.d_mk, 1.0, rng));
}

namespace detail {

// bias_dim = 0 means one bias per output column (linear layers); convolutions
// pass C_out.
inline void add_layer_params(Params& theta, const ModelConfig& cfg, const std::string& name, int d_in, int d_out,
                             std::mt19937_64& rng, int bias_dim = 0) {
  if (cfg.generated_extractor()) {
    add_linear_generator(theta, "gen." + name, LinearGenSpec{cfg.d_mk, d_in, d_out, cfg.generator_bias, bias_dim}, rng);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    theta.add("ext." + name + ".w", uniform_matrix(d_in, d_out, bound, rng));
    theta.add("ext." + name + ".b", uniform_matrix(1, bias_dim > 0 ? bias_dim : d_out, bound, rng));
  }
}

}  // namespace detail

inline void validate(const ModelConfig& c) {
  if (c.feature_dim < 1 || c.history < 1 || c.horizon < 1 || c.d_hidden < 1 || c.heads < 1 || c.d_mk < 1 || c.hidden < 1)
    throw ConfigError("model dimensions must be positive");
  if (c.extractor == ExtractorKind::tcn &&
      (c.tcn_kernels.empty() || c.tcn_dilations.empty()))
    throw ConfigError("tcn extractor needs kernel sizes and dilations");
  if (c.ablation == Ablation::m1b && c.spatial_from_hidden)
    throw ConfigError("M1b (spatial-only) cannot take the spatial input from temporal hidden states");
}

// θ = {meta learner, generators (or shared extractor), predictor, embeddings}.
inline Params init_params(const ModelConfig& cfg, std::mt19937_64& rng,
                          const std::vector<std::pair<std::string, int>>& cities = {}) {
  validate(cfg);
  Params theta;
  const int d = cfg.feature_dim, dh = cfg.d_hidden;
  if (cfg.uses_meta_learner()) {
    const double b = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const char* u : {"U_z", "U_r", "U_c"}) theta.add(std::string("ml.") + u, uniform_matrix(d, dh, b, rng));
    for (const char* w : {"W_z", "W_r", "W_c"}) theta.add(std::string("ml.") + w, uniform_matrix(dh, dh, b, rng));
    const int ds = cfg.spatial_input_dim();
    for (int k = 0; k < cfg.heads; ++k) {
      theta.add("ml.gat.W." + std::to_string(k), uniform_matrix(ds, dh, 1.0 / std::sqrt(static_cast<double>(ds)), rng));
      theta.add("ml.gat.a." + std::to_string(k), uniform_matrix(2 * dh, 1, b, rng));
    }
    theta.add("ml.gamma_raw", MatD::Zero(1, dh));
    theta.add("ml.W_gamma", uniform_matrix(dh, cfg.d_mk, b, rng));
  }
  if (cfg.extractor == ExtractorKind::gru) {
    for (int g = 0; g < 3; ++g) detail::add_layer_params(theta, cfg, kGruMatrices[g], d, cfg.hidden, rng);
    for (int g = 3; g < 6; ++g) detail::add_layer_params(theta, cfg, kGruMatrices[g], cfg.hidden, cfg.hidden, rng);
  } else {
    for (int k : cfg.tcn_kernels)
      for (std::size_t l = 0; l < cfg.tcn_dilations.size(); ++l) {
        const int c_in = l == 0 ? d : cfg.hidden;
        detail::add_layer_params(theta, cfg, tcn_prefix(k, static_cast<int>(l)), c_in, cfg.hidden * k, rng, cfg.hidden);
      }
  }
  const double pb = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  theta.add("pred.w", uniform_matrix(cfg.hidden, cfg.horizon * d, pb, rng));
  theta.add("pred.b", uniform_matrix(1, cfg.horizon * d, pb, rng));
  for (const auto& [name, n] : cities) ensure_city_embedding(theta, cfg, name, n, rng);
  return theta;
}

// Stacked windows of one city: row b·N + i is node i of window b.
struct Batch {
  MatD x;  // (B·N) × (T·d)
  MatD y;  // (B·N) × (M·d)
  int windows = 0;
  int num_nodes = 0;
};

inline Batch make_batch(const std::vector<const WindowSample*>& ws, int num_nodes, int feature_dim) {
  if (ws.empty()) throw ContractError("make_batch: no windows");
  const Eigen::Index t = ws[0]->x.rows(), m = ws[0]->y.rows();
  Batch b;
  b.windows = static_cast<int>(ws.size());
  b.num_nodes = num_nodes;
  b.x.resize(static_cast<Eigen::Index>(ws.size()) * num_nodes, t * feature_dim);
  b.y.resize(static_cast<Eigen::Index>(ws.size()) * num_nodes, m * feature_dim);
  for (std::size_t k = 0; k < ws.size(); ++k) {
    if (ws[k]->x.cols() != num_nodes * feature_dim) throw ContractError("make_batch: window width differs from N·d");
    b.x.middleRows(static_cast<Eigen::Index>(k) * num_nodes, num_nodes) = window_rows(ws[k]->x, num_nodes, feature_dim);
    b.y.middleRows(static_cast<Eigen::Index>(k) * num_nodes, num_nodes) = window_rows(ws[k]->y, num_nodes, feature_dim);
  }
  return b;
}

// (B·N) × (M·d) prediction rows → window b as M × (N·d).
inline MatD prediction_window(const MatD& rows, int window, int num_nodes, int horizon, int feature_dim) {
  MatD out(horizon, num_nodes * feature_dim);
  for (int i = 0; i < num_nodes; ++i)
    for (int t = 0; t < horizon; ++t)
      for (int f = 0; f < feature_dim; ++f)
        out(t, i * feature_dim + f) = rows(static_cast<Eigen::Index>(window) * num_nodes + i, t * feature_dim + f);
  return out;
}

// Everything the forward pass needs about the city a batch comes from.
struct CityContext {
  std::string name;
  const CityGraph* graph = nullptr;
  MatD target_adjacency;  // symmetrized binary
  std::vector<ad::Csr> csr_by_batch;  // lazily filled, index = windows per batch

  CityContext(std::string city, const CityGraph& g) : name(std::move(city)), graph(&g), target_adjacency(g.symmetric_adjacency()) {}

  const ad::Csr& neighborhoods(int windows, bool self_loops) {
    if (static_cast<int>(csr_by_batch.size()) <= windows) csr_by_batch.resize(windows + 1);
    ad::Csr& c = csr_by_batch[windows];
    if (c.num_rows() == 0) c = closed_neighborhoods(*graph, windows, self_loops);
    return c;
  }
};

namespace stnn {

template <class S>
ml::GruVars<S> bind_meta_gru(const BoundParams<S>& p) {
  return {{p["ml.U_z"], p["ml.U_r"], p["ml.U_c"]}, {p["ml.W_z"], p["ml.W_r"], p["ml.W_c"]}};
}

template <class S>
struct MetaKnowledgeVars {
  ad::Var<S> z_mk;  // (B·N) × d_MK
  ad::Var<S> z_tp;  // id < 0 when not computed
  ad::Var<S> z_sp;
};

template <class S>
MetaKnowledgeVars<S> meta_knowledge(const BoundParams<S>& p, ad::Var<S> x, int windows, CityContext& city,
                                    const ModelConfig& cfg) {
  ad::Tape<S>& t = *x.tape;
  MetaKnowledgeVars<S> out{};
  if (cfg.ablation == Ablation::m1c)
    return {ad::tile_rows(p[embedding_segment(city.name)], windows), {}, {}};
  if (cfg.ablation != Ablation::m1b || cfg.spatial_from_hidden)
    out.z_tp = ml::temporal_meta(x, cfg.history, cfg.feature_dim, bind_meta_gru(p));
  if (cfg.ablation != Ablation::m1a) {
    std::vector<ad::Var<S>> w, a;
    for (int k = 0; k < cfg.heads; ++k) {
      w.push_back(p["ml.gat.W." + std::to_string(k)]);
      a.push_back(p["ml.gat.a." + std::to_string(k)]);
    }
    const ad::Var<S> h = cfg.spatial_from_hidden ? out.z_tp : x;
    out.z_sp = ml::spatial_meta(h, city.neighborhoods(windows, cfg.self_loops), w, a);
  }
  if (cfg.ablation == Ablation::m1a) {
    out.z_mk = ad::matmul(out.z_tp, p["ml.W_gamma"]);
  } else if (cfg.ablation == Ablation::m1b) {
    out.z_mk = ad::matmul(out.z_sp, p["ml.W_gamma"]);
  } else {
    out.z_mk = ml::fuse(out.z_tp, out.z_sp, p["ml.gamma_raw"], p["ml.W_gamma"]);
  }
  (void)t;
  return out;
}

// One extractor layer y = x·W + b, per-row generated or shared.
template <class S>
struct LayerVars {
  gen::GeneratedVars<S> generated{};
  ad::Var<S> shared_w{}, shared_b{};
  bool per_row = true;

  ad::Var<S> apply(ad::Var<S> x) const {
    if (per_row) return gen::apply_linear(x, generated);
    return ad::add_rowvec(ad::matmul(x, shared_w), shared_b);
  }

  // Per-row kernel stack for convolutions: shared parameters are tiled.
  std::pair<ad::Var<S>, ad::Var<S>> stacked(Eigen::Index rows) const {
    if (per_row) return {generated.weights, generated.biases};
    return {ad::tile_rows(shared_w, rows), ad::tile_rows(shared_b, rows)};
  }
};

template <class S>
LayerVars<S> layer(const BoundParams<S>& p, const ModelConfig& cfg, const std::string& name, ad::Var<S> z_mk, int d_in) {
  LayerVars<S> l;
  if (cfg.generated_extractor()) {
    l.generated = gen::gen_linear(z_mk, gen::bind_linear(p, "gen." + name), d_in);
  } else {
    l.per_row = false;
    l.shared_w = p["ext." + name + ".w"];
    l.shared_b = p["ext." + name + ".b"];
  }
  return l;
}

// X: R × (T·d) → R × F. z_mk may be empty when the extractor is shared.
template <class S>
ad::Var<S> extract_features(const BoundParams<S>& p, ad::Var<S> x, ad::Var<S> z_mk, const ModelConfig& cfg) {
  ad::Tape<S>& t = *x.tape;
  const Eigen::Index rows = x.rows();
  const int d = cfg.feature_dim, f = cfg.hidden;
  if (cfg.extractor == ExtractorKind::gru) {
    std::vector<LayerVars<S>> mats;
    for (int g = 0; g < 6; ++g) mats.push_back(layer(p, cfg, kGruMatrices[g], z_mk, g < 3 ? d : f));
    ad::Var<S> h = t.constant(Mat<S>::Zero(rows, f));
    for (int s = 0; s < cfg.history; ++s)
      h = ml::gru_step(
          ad::slice_cols(x, s * d, d), h, [&](int g, ad::Var<S> v) { return mats[g].apply(v); },
          [&](int g, ad::Var<S> v) { return mats[3 + g].apply(v); });
    return h;
  }
  ad::Var<S> total{};
  bool first = true;
  for (int k : cfg.tcn_kernels) {
    ad::Var<S> cur = x;
    int c_in = d;
    for (std::size_t l = 0; l < cfg.tcn_dilations.size(); ++l) {
      const LayerVars<S> lv = layer(p, cfg, tcn_prefix(k, static_cast<int>(l)), z_mk, c_in);
      const auto [w, b] = lv.stacked(rows);
      cur = ad::causal_conv(cur, w, b, ad::ConvShape{cfg.history, c_in, f, k, cfg.tcn_dilations[l]});
      if (l + 1 < cfg.tcn_dilations.size()) cur = ad::relu(cur);
      c_in = f;
    }
    const ad::Var<S> last = ad::slice_cols(cur, static_cast<Eigen::Index>(cfg.history - 1) * f, f);
    total = first ? last : ad::add(total, last);
    first = false;
  }
  return total;
}

template <class S>
ad::Var<S> predict(const BoundParams<S>& p, ad::Var<S> features) {
  return ad::add_rowvec(ad::matmul(features, p["pred.w"]), p["pred.b"]);
}

template <class S>
struct ForwardVars {
  ad::Var<S> prediction;  // (B·N) × (M·d)
  ad::Var<S> a_meta;      // (B·N) × N
  MetaKnowledgeVars<S> meta;
};

template <class S>
ForwardVars<S> forward(const BoundParams<S>& p, ad::Var<S> x, int windows, CityContext& city, const ModelConfig& cfg) {
  if (x.rows() != static_cast<Eigen::Index>(windows) * city.graph->num_nodes)
    throw ContractError("stnn_forward: batch rows must equal windows · N");
  if (cfg.ablation == Ablation::m1c && !p.contains(embedding_segment(city.name)))
    throw ConfigError("M1c needs an embedding table for city '" + city.name + "'");
  const MetaKnowledgeVars<S> meta = meta_knowledge(p, x, windows, city, cfg);
  const ad::Var<S> feats = extract_features(p, x, meta.z_mk, cfg);
  return {predict(p, feats), recon::meta_graph(meta.z_mk, city.graph->num_nodes), meta};
}

}  // namespace stnn

// ---- value-level API -------------------------------------------------------

struct StnnOutput {
  std::vector<MatD> predictions;  // per window, M × (N·d)
  std::vector<MatD> a_meta;       // per window, N × N
};

inline StnnOutput stnn_forward(const Params& theta, const std::vector<const WindowSample*>& windows,
                               const CityGraph& graph, const std::string& city, const ModelConfig& cfg) {
  const Batch b = make_batch(windows, graph.num_nodes, cfg.feature_dim);
  CityContext ctx(city, graph);
  ad::Tape<double> t;
  const BoundParams<double> p(t, theta, false);
  const auto out = stnn::forward(p, t.constant(b.x), b.windows, ctx, cfg);
  StnnOutput r;
  for (int k = 0; k < b.windows; ++k) {
    r.predictions.push_back(prediction_window(out.prediction.value(), k, graph.num_nodes, cfg.horizon, cfg.feature_dim));
    r.a_meta.push_back(out.a_meta.value().middleRows(static_cast<Eigen::Index>(k) * graph.num_nodes, graph.num_nodes));
  }
  return r;
}

// features: N × F, weight: F × (M·d), bias: 1 × (M·d) → M × (N·d).
inline MatD predict(const MatD& features, const MatD& weight, const MatD& bias, int horizon, int feature_dim) {
  if (weight.rows() != features.cols() || weight.cols() != horizon * feature_dim || bias.cols() != weight.cols())
    throw ContractError("predict: predictor shape does not match features or M·d");
  ad::Tape<double> t;
  Params theta;
  theta.add("pred.w", weight);
  theta.add("pred.b", bias);
  const BoundParams<double> p(t, theta, false);
  const MatD rows = stnn::predict(p, t.constant(features)).value();
  return prediction_window(rows, 0, static_cast<int>(features.rows()), horizon, feature_dim);
}

// Extractor features for one window with meta knowledge supplied (N × d_MK).
inline MatD extract_features(const Params& theta, const MatD& window, int num_nodes, const MatD& z_mk,
                             const ModelConfig& cfg) {
  ad::Tape<double> t;
  const BoundParams<double> p(t, theta, false);
  const MatD x = window_rows(window, num_nodes, cfg.feature_dim);
  return stnn::extract_features(p, t.constant(x), t.constant(z_mk), cfg).value();
}

}  // namespace stgfsl
