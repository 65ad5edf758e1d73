#pragma once

// Finite-difference audit of every differentiable operation, run at 64-bit
// precision. Used by the `gradcheck` command and the test suites.

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "autosam/gradcheck.hpp"
#include "autosam/heads.hpp"
#include "autosam/losses.hpp"

namespace autosam {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t elements = 0;
  bool pass = false;
};

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t op_seeds = 10;
  std::uint64_t base_seed = 1234;
};

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  t.set_requires_grad(requires_grad);
  return t;
}

// Compares backward() of `loss_fn` against central differences over all
// tensors in `wrt`, measured on the concatenated gradient vector. Blocks whose
// true gradient is identically zero (attention key biases) are then judged
// against the overall gradient scale rather than against their own roundoff.
inline GradcheckResult check_gradients(const std::string& name, const std::function<Tensor<double>()>& loss_fn,
                                       std::vector<Tensor<double>> wrt, const GradcheckOptions& opt = {}) {
  GradcheckResult r{name, 0.0, 0, false};
  for (auto& t : wrt) t.zero_grad();
  backward(loss_fn());
  std::vector<double> analytic, numeric;
  for (auto& t : wrt) {
    if (t.has_grad()) {
      analytic.insert(analytic.end(), t.grad().begin(), t.grad().end());
    } else {
      analytic.insert(analytic.end(), t.numel(), 0.0);
    }
    const Tensor<double> fd =
        finite_diff_grad<double>([&](const Tensor<double>&) { return loss_fn().item(); }, t, opt.eps);
    numeric.insert(numeric.end(), fd.data().begin(), fd.data().end());
    r.elements += t.numel();
  }
  r.max_rel_error = relative_error<double>(analytic, numeric);
  r.pass = r.max_rel_error <= opt.tolerance;
  return r;
}

// Scalarizes an op output with a fixed random weighting, so every output
// element contributes a distinct gradient.
inline std::function<Tensor<double>()> weighted_sum(std::function<Tensor<double>()> op, std::uint64_t seed) {
  auto weights = std::make_shared<Tensor<double>>();
  return [op = std::move(op), weights, seed]() {
    Tensor<double> out = op();
    if (!weights->defined()) {
      Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
      *weights = random_tensor(out.shape(), rng, -1.0, 1.0, false);
    }
    return sum(mul(out, *weights));
  };
}

inline LabelMap random_labels(std::size_t n, std::size_t h, std::size_t w, std::size_t classes, Rng& rng) {
  std::uniform_int_distribution<int> dist(0, int(classes) - 1);
  LabelMap lm{{n, h, w}, std::vector<std::uint8_t>(n * h * w)};
  for (auto& v : lm.values) v = static_cast<std::uint8_t>(dist(rng));
  return lm;
}

// Toy 16x16 configuration for end-to-end head checks.
inline EncoderConfig gradcheck_encoder_config() {
  EncoderConfig c;
  c.img = 16;
  c.patch = 4;
  c.dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.window = 4;
  c.mlp_ratio = 2;
  return c;
}

inline HeadConfig gradcheck_head_config(HeadKind kind) {
  HeadConfig h;
  h.kind = kind;
  h.num_classes = 3;
  h.cnn_depth = 3;
  h.twoway_layers = 1;
  h.attn_heads = 2;
  return h;
}

// One result per (op, seed) for the primitive ops, one per composite.
inline std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opt = {}) {
  std::vector<GradcheckResult> results;
  auto record = [&](GradcheckResult r) { results.push_back(std::move(r)); };

  for (std::size_t s = 0; s < opt.op_seeds; ++s) {
    const std::uint64_t seed = opt.base_seed + s;
    Rng rng(seed);
    const std::string tag = "[seed " + std::to_string(seed) + "]";
    {
      auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
      record(check_gradients("matmul " + tag, weighted_sum([=] { return matmul(a, b); }, seed), {a, b}, opt));
    }
    {
      auto x = random_tensor({2, 2, 5, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
      record(check_gradients("conv2d " + tag, weighted_sum([=] { return conv2d(x, w, b, 2, 1); }, seed), {x, w, b},
                             opt));
    }
    {
      auto x = random_tensor({2, 2, 3, 3}, rng), w = random_tensor({2, 3, 2, 2}, rng), b = random_tensor({3}, rng);
      record(check_gradients("conv_transpose2d " + tag,
                             weighted_sum([=] { return conv_transpose2d(x, w, b, 2); }, seed), {x, w, b}, opt));
    }
    {
      auto x = random_tensor({4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
      record(check_gradients("layernorm " + tag, weighted_sum([=] { return layernorm(x, g, b, 1e-5); }, seed),
                             {x, g, b}, opt));
    }
    {
      auto x = random_tensor({2, 3, 4}, rng);
      record(check_gradients("softmax " + tag, weighted_sum([=] { return softmax(x, 1); }, seed), {x}, opt));
    }
    {
      auto x = random_tensor({5, 4}, rng);
      record(check_gradients("relu " + tag, weighted_sum([=] { return relu(x); }, seed), {x}, opt));
      record(check_gradients("gelu " + tag, weighted_sum([=] { return gelu(x); }, seed), {x}, opt));
    }
    {
      auto q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
      record(check_gradients("attention " + tag,
                             weighted_sum([=] { return multi_head_attention(q, k, v, 2); }, seed), {q, k, v}, opt));
    }
    {
      auto x = random_tensor({1, 2, 3, 4}, rng);
      record(check_gradients("bilinear_resize " + tag,
                             weighted_sum([=] { return bilinear_resize(x, 7, 5); }, seed), {x}, opt));
    }
    {
      auto logits = random_tensor({2, 4, 3, 3}, rng, -2.0, 2.0);
      const LabelMap labels = random_labels(2, 3, 3, 4, rng);
      record(check_gradients("cross_entropy " + tag, [=] { return cross_entropy(logits, labels); }, {logits}, opt));
      record(check_gradients("soft_dice_loss " + tag, [=] { return soft_dice_loss(logits, labels); }, {logits}, opt));
    }
  }

  const EncoderConfig enc = gradcheck_encoder_config();
  {
    Rng rng(opt.base_seed + 100);
    const HeadConfig hc = gradcheck_head_config(HeadKind::autosam);
    TwoWayTransformer<double> tw(enc.dim, 1, hc.attn_heads, rng);
    auto tokens = random_tensor({3, enc.dim}, rng);
    auto grid = random_tensor({enc.grid() * enc.grid(), enc.dim}, rng);
    const auto pe = grid_positional_encoding<double>(enc.grid(), enc.dim);
    NamedParams<double> params;
    tw.collect("", params);
    std::vector<Tensor<double>> wrt{tokens, grid};
    for (auto& [n, p] : params) wrt.push_back(p);
    record(check_gradients(
        "two_way_attention",
        weighted_sum([=] {
          auto [t, g] = tw.forward(tokens, grid, pe);
          return concat(std::vector<Tensor<double>>{t, g}, 0);
        }, opt.base_seed + 100),
        wrt, opt));
  }

  for (HeadKind kind : {HeadKind::autosam, HeadKind::cnn, HeadKind::linear}) {
    Rng rng(opt.base_seed + 200 + static_cast<int>(kind));
    std::shared_ptr<PromptFreeHead<double>> head = make_head<double>(gradcheck_head_config(kind), enc, rng);
    auto grid = random_tensor({1, enc.dim, enc.grid(), enc.grid()}, rng);
    const LabelMap labels = random_labels(1, enc.img, enc.img, 4, rng);
    std::vector<Tensor<double>> wrt{grid};
    for (auto& [n, p] : head->parameters()) wrt.push_back(p);
    record(check_gradients("head " + to_string(kind) + " (16x16, loss)",
                           [=] { return combined_loss(head->forward({grid}).logits, labels, 1.0, 1.0); }, wrt, opt));
  }
  return results;
}

}  // namespace autosam
