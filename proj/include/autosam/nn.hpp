#pragma once

// Parameterized layers shared by the encoder and the heads.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "autosam/ops.hpp"

namespace autosam {

using Rng = std::mt19937_64;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
std::size_t parameter_count(const NamedParams<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.numel();
  return n;
}

template <typename T>
void set_trainable(const NamedParams<T>& params, bool on) {
  for (auto [name, p] : params) p.set_requires_grad(on);
}

template <typename T>
void zero_grads(const NamedParams<T>& params) {
  for (auto [name, p] : params) p.zero_grad();
}

// y = x W + b on x[L, in].
template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(uniform_param<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
        bias(uniform_param<T>({out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + "weight", weight);
    out.emplace_back(prefix + "bias", bias);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  T eps = T(1e-6);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gamma(constant_param<T>({d}, T(1))), beta(constant_param<T>({d}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + "gamma", gamma);
    out.emplace_back(prefix + "beta", beta);
  }
};

// Stack of linear layers with an activation between consecutive layers.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;
  Activation act = Activation::gelu;

  Mlp() = default;
  Mlp(const std::vector<std::size_t>& widths, Activation a, Rng& rng) : act(a) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
  }

  Tensor<T> operator()(Tensor<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = activation(x, act);
    }
    return x;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + std::to_string(i) + ".", out);
  }
};

// Projected multi-head attention. Queries/keys/values of width `dim` are
// projected to `inner` channels, attended per head, then projected back.
template <typename T>
struct Attention {
  Linear<T> q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 1;

  Attention() = default;
  Attention(std::size_t dim, std::size_t inner, std::size_t num_heads, Rng& rng)
      : q_proj(dim, inner, rng), k_proj(dim, inner, rng), v_proj(dim, inner, rng),
        out_proj(inner, dim, rng), heads(num_heads) {
    if (inner % num_heads != 0) {
      throw DimensionError("attention width " + std::to_string(inner) + " not divisible by " +
                           std::to_string(num_heads) + " heads");
    }
  }

  Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) const {
    return out_proj(multi_head_attention(q_proj(q), k_proj(k), v_proj(v), heads));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    q_proj.collect(prefix + "q.", out);
    k_proj.collect(prefix + "k.", out);
    v_proj.collect(prefix + "v.", out);
    out_proj.collect(prefix + "out.", out);
  }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  // gain scales the fan-in bound; sqrt(6) gives He init for ReLU stacks.
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p, Rng& rng, double gain = 1.0)
      : stride(s), pad(p) {
    const double bound = gain / std::sqrt(static_cast<double>(in * k * k));
    weight = uniform_param<T>({out, in, k, k}, bound, rng);
    bias = uniform_param<T>({out}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + "weight", weight);
    out.emplace_back(prefix + "bias", bias);
  }
};

template <typename T>
struct ConvTranspose2d {
  Tensor<T> weight;  // [in, out, k, k]
  Tensor<T> bias;
  std::size_t stride = 2;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in, std::size_t out, std::size_t k, std::size_t s, Rng& rng, double gain = 1.0)
      : stride(s) {
    const double bound = gain / std::sqrt(static_cast<double>(in * k * k) / static_cast<double>(s * s));
    weight = uniform_param<T>({in, out, k, k}, bound, rng);
    bias = uniform_param<T>({out}, bound, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv_transpose2d(x, weight, bias, stride); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + "weight", weight);
    out.emplace_back(prefix + "bias", bias);
  }
};

// [1, C, H, W] feature map <-> [H*W, C] token sequence.
template <typename T>
Tensor<T> map_to_sequence(const Tensor<T>& map) {
  const std::size_t c = map.dim(1), hw = map.dim(2) * map.dim(3);
  return transpose(reshape(map, {c, hw}));
}

template <typename T>
Tensor<T> sequence_to_map(const Tensor<T>& seq, std::size_t h, std::size_t w) {
  const std::size_t c = seq.dim(1);
  return reshape(transpose(seq), {1, c, h, w});
}

}  // namespace autosam
