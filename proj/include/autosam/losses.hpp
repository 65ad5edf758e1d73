#pragma once

// Segmentation losses over channel-first logits [N, C, H, W] with integer
// labels [N, H, W] in {0..C-1}.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "autosam/ops.hpp"

namespace autosam {

struct LabelMap {
  Shape shape;  // [N, H, W]
  std::vector<std::uint8_t> values;

  std::size_t batch() const { return shape.at(0); }
  std::size_t pixels_per_sample() const { return shape.at(1) * shape.at(2); }
};

namespace detail {

inline void check_labels(const Shape& logits, const LabelMap& labels) {
  if (logits.size() != 4 || labels.shape.size() != 3 || labels.shape[0] != logits[0] ||
      labels.shape[1] != logits[2] || labels.shape[2] != logits[3]) {
    throw DimensionError("loss: logits " + to_string(logits) + " incompatible with labels " +
                         to_string(labels.shape));
  }
  if (labels.values.size() != numel(labels.shape)) throw DimensionError("loss: label buffer size mismatch");
  for (auto v : labels.values) {
    if (v >= logits[1]) {
      throw std::out_of_range("loss: label " + std::to_string(int(v)) + " outside 0.." +
                              std::to_string(logits[1] - 1));
    }
  }
}

// Channel softmax of [N,C,H,W] into `probs`.
template <typename T>
void channel_softmax(const Tensor<T>& logits, std::vector<T>& probs) {
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  probs.resize(logits.numel());
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t base = in * c * hw + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, logits[base + k * hw]);
      T z = 0;
      for (std::size_t k = 0; k < c; ++k) {
        probs[base + k * hw] = std::exp(logits[base + k * hw] - mx);
        z += probs[base + k * hw];
      }
      for (std::size_t k = 0; k < c; ++k) probs[base + k * hw] /= z;
    }
  }
}

}  // namespace detail

// Mean over pixels of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelMap& labels) {
  detail::check_labels(logits.shape(), labels);
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<T> probs;
  detail::channel_softmax(logits, probs);
  T total = 0;
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t base = in * c * hw + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, logits[base + k * hw]);
      T z = 0;
      for (std::size_t k = 0; k < c; ++k) z += std::exp(logits[base + k * hw] - mx);
      const std::size_t y = labels.values[in * hw + i];
      total += (mx + std::log(z)) - logits[base + y * hw];
    }
  }
  const T count = static_cast<T>(n * hw);
  return detail::make_result<T>(
      Shape{1}, {total / count}, {logits},
      [li = logits.impl(), probs = std::move(probs), labels = labels.values, n, c, hw, count](std::span<const T> g) {
        T* gl = li->grad_buffer();
        if (!gl) return;
        const T s = g[0] / count;
        for (std::size_t in = 0; in < n; ++in) {
          for (std::size_t k = 0; k < c; ++k) {
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (in * c + k) * hw + i;
              const T onehot = labels[in * hw + i] == k ? T(1) : T(0);
              gl[idx] += s * (probs[idx] - onehot);
            }
          }
        }
      });
}

// 1 - mean_c (2 sum p y + s) / (sum p + sum y + s) with p the channel softmax
// and y the one-hot labels, sums taken over the whole batch. Channel 0 is
// skipped when include_background is false.
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& logits, const LabelMap& labels, bool include_background = true,
                         T smooth = T(1e-5)) {
  detail::check_labels(logits.shape(), labels);
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const std::size_t first = include_background ? 0 : 1;
  if (first >= c) throw std::invalid_argument("soft_dice_loss: no channels left to score");
  std::vector<T> probs;
  detail::channel_softmax(logits, probs);
  std::vector<T> inter(c, 0), psum(c, 0), ysum(c, 0);
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < hw; ++i) {
        const T p = probs[(in * c + k) * hw + i];
        const bool y = labels.values[in * hw + i] == k;
        psum[k] += p;
        if (y) {
          inter[k] += p;
          ysum[k] += 1;
        }
      }
    }
  }
  const T channels = static_cast<T>(c - first);
  T dice_mean = 0;
  for (std::size_t k = first; k < c; ++k) dice_mean += (2 * inter[k] + smooth) / (psum[k] + ysum[k] + smooth);
  dice_mean /= channels;
  return detail::make_result<T>(
      Shape{1}, {T(1) - dice_mean}, {logits},
      [li = logits.impl(), probs = std::move(probs), labels = labels.values, inter, psum, ysum, n, c, hw, first,
       channels, smooth](std::span<const T> g) {
        T* gl = li->grad_buffer();
        if (!gl) return;
        // dL/dp for every channel, then through the softmax.
        std::vector<T> coef_y(c, 0), coef_all(c, 0);
        for (std::size_t k = first; k < c; ++k) {
          const T den = psum[k] + ysum[k] + smooth;
          const T num = 2 * inter[k] + smooth;
          coef_y[k] = -g[0] / channels * 2 / den;
          coef_all[k] = g[0] / channels * num / (den * den);
        }
        std::vector<T> dp(c);
        for (std::size_t in = 0; in < n; ++in) {
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t y = labels[in * hw + i];
            T dot = 0;
            for (std::size_t k = 0; k < c; ++k) {
              dp[k] = coef_all[k] + (y == k ? coef_y[k] : T(0));
              dot += dp[k] * probs[(in * c + k) * hw + i];
            }
            for (std::size_t k = 0; k < c; ++k) {
              const std::size_t idx = (in * c + k) * hw + i;
              gl[idx] += probs[idx] * (dp[k] - dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const LabelMap& labels, T w_ce, T w_dice,
                        bool dice_include_background = true) {
  if (w_ce < 0 || w_dice < 0) throw std::invalid_argument("combined_loss: loss weights must be non-negative");
  return add(scale(cross_entropy(logits, labels), w_ce),
             scale(soft_dice_loss(logits, labels, dice_include_background), w_dice));
}

}  // namespace autosam
