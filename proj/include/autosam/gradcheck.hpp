#pragma once

// Central finite differences: the independent oracle every backward rule is
// checked against.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "autosam/tensor.hpp"

namespace autosam {

// d f / d x by central differences, one element at a time. `x` is perturbed
// in place and restored; f must be deterministic.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, Tensor<T> x, T eps) {
  NoGradGuard no_grad;
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = x[i];
    x[i] = orig + eps;
    const T fp = f(x);
    x[i] = orig - eps;
    const T fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (T(2) * eps);
  }
  return g;
}

// ||a - b||_2 / max(||a||_2, ||b||_2, floor). The floor acts as an absolute
// tolerance for gradients that are identically zero (e.g. attention key
// biases), where finite-difference noise would otherwise read as 100% error.
template <typename T>
double relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-6) {
  if (a.size() != b.size()) return INFINITY;
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = static_cast<double>(a[i]), db = static_cast<double>(b[i]);
    diff += (da - db) * (da - db);
    na += da * da;
    nb += db * db;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace autosam
