#pragma once

// Parameter bookkeeping and the small layers every network here is built from.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bimot/checkpoint.hpp"
#include "bimot/ops.hpp"

namespace bimot {

using Rng = std::mt19937_64;

inline double gaussian(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

template <typename T>
struct Param {
  std::string name;
  // Freezing granularity; the optimizer and the freeze checks work per group.
  std::string group;
  Tensor<T> tensor;
};

template <typename T>
class ParamStore {
 public:
  Tensor<T> add(std::string name, std::string group, Shape shape, std::vector<T> values) {
    for (const auto& p : params_) {
      if (p.name == name) throw ContractError("duplicate parameter " + name);
    }
    Tensor<T> t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(group), t});
    return t;
  }

  Tensor<T> normal(std::string name, std::string group, Shape shape, double stddev, Rng& rng) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(stddev * gaussian(rng));
    return add(std::move(name), std::move(group), std::move(shape), std::move(v));
  }

  Tensor<T> constant(std::string name, std::string group, Shape shape, T value) {
    std::vector<T> v(shape_numel(shape), value);
    return add(std::move(name), std::move(group), std::move(shape), std::move(v));
  }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  const Param<T>& find(std::string_view name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p;
    }
    throw ContractError("unknown parameter " + std::string(name));
  }

  // Groups are matched by prefix, so "text" covers "text.base" and "text.special".
  void set_trainable(std::string_view group_prefix, bool trainable) {
    for (auto& p : params_) {
      if (p.group.starts_with(group_prefix)) p.tensor.set_requires_grad(trainable);
    }
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void save_to(ArrayArchive& archive, const std::string& prefix = "") const {
    for (const auto& p : params_) archive.put(prefix + p.name, p.tensor);
  }

  void load_from(const ArrayArchive& archive, const std::string& prefix = "") {
    for (auto& p : params_) {
      const auto& e = archive.entry(prefix + p.name);
      if (e.shape != p.tensor.shape()) {
        throw DataError("checkpoint array " + prefix + p.name + " has shape " + shape_str(e.shape) +
                        ", model expects " + shape_str(p.tensor.shape()));
      }
      auto values = archive.get<T>(prefix + p.name);
      std::copy(values.begin(), values.end(), p.tensor.values().begin());
    }
  }

 private:
  std::vector<Param<T>> params_;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]

  static Linear create(ParamStore<T>& store, const std::string& name, const std::string& group, std::size_t in,
                       std::size_t out, Rng& rng, double stddev = 0.02) {
    Linear l;
    l.weight = store.normal(name + ".w", group, {in, out}, stddev, rng);
    l.bias = store.constant(name + ".b", group, {out}, T(0));
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_row(matmul(x, weight), bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm create(ParamStore<T>& store, const std::string& name, const std::string& group,
                          std::size_t dim) {
    return {store.constant(name + ".g", group, {dim}, T(1)), store.constant(name + ".b", group, {dim}, T(0))};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)), GELU FFN.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln_attn, ln_ffn;
  Linear<T> qkv, proj, fc, fc_out;
  std::size_t heads = 1;
  std::size_t width = 0;

  static TransformerBlock create(ParamStore<T>& store, const std::string& name, const std::string& group,
                                 std::size_t width, std::size_t heads, std::size_t ffn, Rng& rng,
                                 double stddev = 0.02, double residual_std = -1.0) {
    if (residual_std < 0) residual_std = stddev;
    TransformerBlock b;
    b.heads = heads;
    b.width = width;
    b.ln_attn = LayerNorm<T>::create(store, name + ".ln1", group, width);
    b.qkv = Linear<T>::create(store, name + ".attn.qkv", group, width, 3 * width, rng, stddev);
    b.proj = Linear<T>::create(store, name + ".attn.proj", group, width, width, rng, residual_std);
    b.ln_ffn = LayerNorm<T>::create(store, name + ".ln2", group, width);
    b.fc = Linear<T>::create(store, name + ".ffn.fc", group, width, ffn, rng, stddev);
    b.fc_out = Linear<T>::create(store, name + ".ffn.out", group, ffn, width, rng, residual_std);
    return b;
  }

  Tensor<T> attend(const Tensor<T>& x, const AttentionLayout& layout) const {
    Tensor<T> packed = qkv(ln_attn(x));
    Tensor<T> q = slice_cols(packed, 0, width);
    Tensor<T> k = slice_cols(packed, width, 2 * width);
    Tensor<T> v = slice_cols(packed, 2 * width, 3 * width);
    return proj(attention(q, k, v, heads, layout));
  }

  Tensor<T> feed_forward(const Tensor<T>& x) const { return fc_out(gelu(fc(ln_ffn(x)))); }

  Tensor<T> operator()(const Tensor<T>& x, const AttentionLayout& layout) const {
    Tensor<T> h = add(x, attend(x, layout));
    return add(h, feed_forward(h));
  }
};

/// Row-constant tensor without gradient (masks, schedule coefficients, ...).
template <typename T>
Tensor<T> constant_tensor(Shape shape, const std::vector<double>& values) {
  return Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

}  // namespace bimot
