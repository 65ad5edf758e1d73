#pragma once

// Brute-force metric oracles shared by the metric tests and the acceptance
// run: direct counting and all-pairs distances, independent of the distance
// transform.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "autosam/mask.hpp"

namespace autosam::oracle {

inline double brute_dice(const BinaryMask& p, const BinaryMask& g) {
  long a = 0, b = 0, both = 0;
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) {
      a += p.at(y, x);
      b += g.at(y, x);
      both += p.at(y, x) && g.at(y, x);
    }
  return a + b == 0 ? 1.0 : 2.0 * both / double(a + b);
}

inline std::vector<std::pair<long, long>> brute_boundary(const BinaryMask& m) {
  std::vector<std::pair<long, long>> out;
  const long h = long(m.height), w = long(m.width);
  auto fg = [&](long y, long x) { return y >= 0 && x >= 0 && y < h && x < w && m.at(y, x); };
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) out.push_back({y, x});
  return out;
}

inline std::optional<double> brute_assd(const BinaryMask& p, const BinaryMask& g) {
  const auto bp = brute_boundary(p), bg = brute_boundary(g);
  if (bp.empty() || bg.empty()) return std::nullopt;
  auto nearest = [](std::pair<long, long> a, const std::vector<std::pair<long, long>>& set) {
    long best = -1;
    for (auto b : set) {
      const long d = (a.first - b.first) * (a.first - b.first) + (a.second - b.second) * (a.second - b.second);
      if (best < 0 || d < best) best = d;
    }
    return std::sqrt(double(best));
  };
  double from_p = 0, from_g = 0;
  for (auto a : bp) from_p += nearest(a, bg);
  for (auto b : bg) from_g += nearest(b, bp);
  return (from_p + from_g) / double(bp.size() + bg.size());
}

inline BinaryMask random_mask(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  BinaryMask m(h, w);
  const int style = int(rng() % 3);
  std::uniform_real_distribution<double> u(0, 1);
  if (style == 0) {
    const double p = u(rng);
    for (auto& b : m.bits) b = u(rng) < p;
  } else {
    // A few random discs, closer to real segmentation masks.
    const int n = 1 + int(rng() % 3);
    for (int k = 0; k < n; ++k) {
      const double cy = u(rng) * h, cx = u(rng) * w, r = 1 + u(rng) * std::min(h, w) / 3.0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          if (std::hypot(y - cy, x - cx) < r) m.set(y, x);
    }
  }
  return m;
}

}  // namespace autosam::oracle
