#pragma once

// Named, ordered collection of trainable matrices (θ) plus the flat binary
// checkpoint format with its JSON manifest.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stgfsl/autodiff.hpp"
#include "stgfsl/errors.hpp"

namespace stgfsl {

template <class S>
class ParamVector {
 public:
  void add(const std::string& name, Mat<S> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter segment " + name);
    index_[name] = values_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t num_segments() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  Mat<S>& operator[](const std::string& name) { return values_[lookup(name)]; }
  const Mat<S>& operator[](const std::string& name) const { return values_[lookup(name)]; }
  Mat<S>& segment(std::size_t i) { return values_[i]; }
  const Mat<S>& segment(std::size_t i) const { return values_[i]; }

  Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  ParamVector zeros_like() const {
    ParamVector out;
    for (std::size_t i = 0; i < values_.size(); ++i)
      out.add(names_[i], Mat<S>::Zero(values_[i].rows(), values_[i].cols()));
    return out;
  }

  // this += a · other
  void axpy(double a, const ParamVector& other) {
    check_layout(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += S(a) * other.values_[i];
  }

  // Applies f(value, other_value) segment by segment.
  template <class F>
  void zip_with(const ParamVector& other, F&& f) {
    check_layout(other);
    for (std::size_t i = 0; i < values_.size(); ++i) f(values_[i], other.values_[i]);
  }

  S dot(const ParamVector& other) const {
    check_layout(other);
    S acc(0.0);
    for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i].cwiseProduct(other.values_[i]).sum();
    return acc;
  }

  bool all_finite() const {
    using std::isfinite;
    for (const auto& v : values_)
      for (Eigen::Index k = 0; k < v.size(); ++k)
        if (!isfinite(v.data()[k])) return false;
    return true;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total_size()));
    for (const auto& v : values_)
      for (Eigen::Index k = 0; k < v.size(); ++k) out.push_back(primal(v.data()[k]));
    return out;
  }

  // Scalar at a flat coordinate (segment order, row-major within segment).
  S& flat(Eigen::Index k) {
    for (auto& v : values_) {
      if (k < v.size()) return v.data()[k];
      k -= v.size();
    }
    throw ContractError("flat parameter index out of range");
  }
  const S& flat(Eigen::Index k) const { return const_cast<ParamVector*>(this)->flat(k); }

  void check_layout(const ParamVector& other) const {
    if (other.names_ != names_) throw ContractError("parameter vectors have different segment layouts");
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols())
        throw ContractError("segment " + names_[i] + " changed shape");
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter segment " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Mat<S>> values_;
  std::map<std::string, std::size_t> index_;
};

using Params = ParamVector<double>;

// Lifts θ to dual numbers with tangent `direction`.
inline ParamVector<Dual> make_dual(const Params& theta, const Params& direction) {
  theta.check_layout(direction);
  ParamVector<Dual> out;
  for (std::size_t i = 0; i < theta.num_segments(); ++i) {
    const MatD& v = theta.segment(i);
    const MatD& d = direction.segment(i);
    Mat<Dual> m(v.rows(), v.cols());
    for (Eigen::Index k = 0; k < v.size(); ++k) m.data()[k] = Dual(v.data()[k], d.data()[k]);
    out.add(theta.names()[i], std::move(m));
  }
  return out;
}

// Tape variables for every segment of θ.
template <class S>
class BoundParams {
 public:
  BoundParams(ad::Tape<S>& tape, const ParamVector<S>& theta, bool trainable = true) {
    for (std::size_t i = 0; i < theta.num_segments(); ++i) {
      const auto& name = theta.names()[i];
      vars_.emplace(name, trainable ? tape.variable(theta.segment(i)) : tape.constant(theta.segment(i)));
      order_.push_back(name);
    }
  }

  ad::Var<S> operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("parameter segment " + name + " is not bound");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  // Gradients after tape.backward(), laid out like θ.
  ParamVector<S> gradients(const ad::Tape<S>& tape) const {
    ParamVector<S> out;
    for (const auto& name : order_) out.add(name, tape.grad(vars_.at(name).id));
    return out;
  }

 private:
  std::map<std::string, ad::Var<S>> vars_;
  std::vector<std::string> order_;
};

// Elementwise U[−bound, bound].
inline MatD uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  MatD m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
  return m;
}

// ---- checkpoints -----------------------------------------------------------
//
// <base>.bin  : all segments, float64 little-endian, concatenated in order
// <base>.json : {"segments": [{"name", "shape": [r, c], "offset"}...]} where
//               offset counts float64 elements from the file start.

inline void save_checkpoint(const Params& theta, const std::filesystem::path& base) {
  static_assert(sizeof(double) == 8);
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  nlohmann::json manifest;
  manifest["format"] = "float64-le";
  manifest["segments"] = nlohmann::json::array();
  std::ofstream bin(base.string() + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw LoadError("cannot write " + base.string() + ".bin");
  std::int64_t offset = 0;
  for (std::size_t i = 0; i < theta.num_segments(); ++i) {
    const MatD& m = theta.segment(i);
    manifest["segments"].push_back({{"name", theta.names()[i]}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      const double v = m.data()[k];
      unsigned char bytes[8];
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
      bin.write(reinterpret_cast<const char*>(bytes), 8);
    }
    offset += m.size();
  }
  std::ofstream(base.string() + ".json") << manifest.dump(2) << "\n";
}

inline Params load_checkpoint(const std::filesystem::path& base) {
  const std::string json_path = base.string() + ".json", bin_path = base.string() + ".bin";
  std::ifstream js(json_path);
  if (!js) throw LoadError("missing checkpoint manifest " + json_path);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw LoadError("missing checkpoint data " + bin_path);
  nlohmann::json manifest;
  js >> manifest;
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  Params theta;
  for (const auto& seg : manifest.at("segments")) {
    const auto rows = seg.at("shape")[0].get<Eigen::Index>(), cols = seg.at("shape")[1].get<Eigen::Index>();
    const auto offset = seg.at("offset").get<std::int64_t>();
    if (static_cast<std::size_t>((offset + rows * cols) * 8) > raw.size())
      throw LoadError("checkpoint data shorter than manifest for " + seg.at("name").get<std::string>());
    MatD m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[(offset + k) * 8 + b]) << (8 * b);
      std::memcpy(&m.data()[k], &bits, 8);
    }
    theta.add(seg.at("name").get<std::string>(), std::move(m));
  }
  return theta;
}

}  // namespace stgfsl
