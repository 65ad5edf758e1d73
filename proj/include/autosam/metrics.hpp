#pragma once

// Dice and average symmetric surface distance, per volume and aggregated over
// repeated splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autosam/data.hpp"
#include "autosam/mask.hpp"

namespace autosam {

// 2|P n G| / (|P| + |G|); both empty counts as a perfect 1.
inline double dice_score(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_extents(pred, gt);
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    np += pred.bits[i];
    ng += gt.bits[i];
    inter += pred.bits[i] & gt.bits[i];
  }
  return np + ng == 0 ? 1.0 : 2.0 * double(inter) / double(np + ng);
}

struct Pixel {
  std::size_t y, x;
  bool operator==(const Pixel&) const = default;
};

// Foreground pixels with a background 4-neighbour (outside the frame counts as
// background), in raster order.
inline std::vector<Pixel> boundary_pixels(const BinaryMask& m) {
  std::vector<Pixel> out;
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.height || x + 1 == m.width || !m.at(y - 1, x) ||
                        !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
      if (edge) out.push_back({y, x});
    }
  }
  return out;
}

namespace detail {

// One axis of the exact squared Euclidean distance transform
// (Felzenszwalb-Huttenlocher lower envelope of parabolas). `inf` marks cells
// with no seed yet.
inline void edt_pass(const std::int64_t* in, std::int64_t* out, std::size_t n, std::size_t stride, std::int64_t inf,
                     std::vector<std::size_t>& v, std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  std::size_t k = 0;
  bool any = false;
  auto intersect = [&](std::size_t a, std::size_t b) {
    const double fa = double(in[a * stride]) + double(a) * double(a);
    const double fb = double(in[b * stride]) + double(b) * double(b);
    return (fb - fa) / (2.0 * (double(b) - double(a)));
  };
  for (std::size_t q = 0; q < n; ++q) {
    if (in[q * stride] >= inf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -INFINITY;
      z[1] = INFINITY;
      any = true;
      continue;
    }
    double s = intersect(v[k], q);
    while (s <= z[k]) {
      --k;
      s = intersect(v[k], q);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = INFINITY;
  }
  if (!any) {
    for (std::size_t q = 0; q < n; ++q) out[q * stride] = inf;
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < double(q)) ++k;
    const std::int64_t d = std::int64_t(q) - std::int64_t(v[k]);
    out[q * stride] = d * d + in[v[k] * stride];
  }
}

// Squared distance from every cell of a [d,h,w] grid to the nearest seed
// (given as linear indices). Integer results, so exact.
inline std::vector<std::int64_t> squared_edt(const std::vector<std::size_t>& seeds, std::size_t d, std::size_t h,
                                             std::size_t w) {
  const std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> f(d * h * w, inf), tmp(d * h * w);
  for (auto i : seeds) f[i] = 0;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t x = 0; x < w; ++x) edt_pass(f.data() + a * h * w + x, tmp.data() + a * h * w + x, h, w, inf, v, z);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t y = 0; y < h; ++y) edt_pass(tmp.data() + (a * h + y) * w, f.data() + (a * h + y) * w, w, 1, inf, v, z);
  if (d > 1) {
    tmp = f;
    for (std::size_t i = 0; i < h * w; ++i) edt_pass(tmp.data() + i, f.data() + i, d, h * w, inf, v, z);
  }
  return f;
}

inline std::optional<double> symmetric_mean(const std::vector<std::size_t>& bp, const std::vector<std::size_t>& bg,
                                            std::size_t d, std::size_t h, std::size_t w) {
  if (bp.empty() || bg.empty()) return std::nullopt;
  const auto to_gt = squared_edt(bg, d, h, w);
  const auto to_pred = squared_edt(bp, d, h, w);
  // Two partial sums so swapping the arguments gives a bitwise-equal result.
  double from_pred = 0, from_gt = 0;
  for (auto i : bp) from_pred += std::sqrt(double(to_gt[i]));
  for (auto i : bg) from_gt += std::sqrt(double(to_pred[i]));
  return (from_pred + from_gt) / double(bp.size() + bg.size());
}

// Foreground voxels of a [d,h,w] mask with a background 6-neighbour (the
// volume border counts as background), as raster-order linear indices.
inline std::vector<std::size_t> boundary_voxels(const std::uint8_t* m, std::size_t d, std::size_t h, std::size_t w) {
  std::vector<std::size_t> out;
  auto on = [&](std::size_t a, std::size_t y, std::size_t x) { return m[(a * h + y) * w + x] != 0; };
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!on(a, y, x)) continue;
        const bool edge = a == 0 || y == 0 || x == 0 || a + 1 == d || y + 1 == h || x + 1 == w || !on(a - 1, y, x) ||
                          !on(a + 1, y, x) || !on(a, y - 1, x) || !on(a, y + 1, x) || !on(a, y, x - 1) ||
                          !on(a, y, x + 1);
        if (edge) out.push_back((a * h + y) * w + x);
      }
  return out;
}

}  // namespace detail

// (sum_{p in Bp} d(p,Bg) + sum_{g in Bg} d(g,Bp)) / (|Bp| + |Bg|), or nullopt
// when either boundary is empty.
inline std::optional<double> assd(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_extents(pred, gt);
  std::vector<std::size_t> bp, bg;
  for (const auto& p : boundary_pixels(pred)) bp.push_back(p.y * pred.width + p.x);
  for (const auto& g : boundary_pixels(gt)) bg.push_back(g.y * gt.width + g.x);
  return detail::symmetric_mean(bp, bg, 1, pred.height, pred.width);
}

enum class AssdMode { slice2d, volume3d };

// Scores for one volume, indexed by foreground class 1..C at [c-1].
struct VolumeMetrics {
  std::uint32_t patient_id = 0;
  std::vector<double> dice;
  std::vector<std::optional<double>> assd;

  double mean_dice() const {
    double s = 0;
    for (double d : dice) s += d;
    return dice.empty() ? 0.0 : s / double(dice.size());
  }

  // Mean over classes with a defined ASSD.
  std::optional<double> mean_assd() const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& a : assd)
      if (a) {
        s += *a;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / double(n);
  }
};

// Per class: 3D Dice over the stacked slices. ASSD is either averaged over
// the slices where it is defined (slice2d) or taken between 3D surfaces.
// `pred` is [D,H,W] like v.labels.
inline VolumeMetrics score_volume(const std::vector<std::uint8_t>& pred, const Volume& v,
                                  AssdMode mode = AssdMode::slice2d, std::size_t num_classes = kNumForeground) {
  if (v.depth == 0) throw std::invalid_argument("score_volume: empty volume");
  if (pred.size() != v.labels.size()) {
    throw DimensionError("score_volume: prediction has " + std::to_string(pred.size()) + " voxels, labels have " +
                         std::to_string(v.labels.size()));
  }
  VolumeMetrics m;
  m.patient_id = v.patient_id;
  const std::size_t hw = v.slice_size();
  for (std::size_t c = 1; c <= num_classes; ++c) {
    const auto cls = std::uint8_t(c);
    const BinaryMask p3 = BinaryMask::from_labels(pred.data(), v.depth * v.height, v.width, cls);
    const BinaryMask g3 = BinaryMask::from_labels(v.labels.data(), v.depth * v.height, v.width, cls);
    m.dice.push_back(dice_score(p3, g3));
    if (mode == AssdMode::volume3d) {
      m.assd.push_back(detail::symmetric_mean(detail::boundary_voxels(p3.bits.data(), v.depth, v.height, v.width),
                                              detail::boundary_voxels(g3.bits.data(), v.depth, v.height, v.width),
                                              v.depth, v.height, v.width));
      continue;
    }
    double total = 0;
    std::size_t defined = 0;
    for (std::size_t s = 0; s < v.depth; ++s) {
      const auto a = assd(BinaryMask::from_labels(pred.data() + s * hw, v.height, v.width, cls),
                          BinaryMask::from_labels(v.labels.data() + s * hw, v.height, v.width, cls));
      if (a) {
        total += *a;
        ++defined;
      }
    }
    m.assd.push_back(defined ? std::optional<double>(total / double(defined)) : std::nullopt);
  }
  return m;
}

// mean +- population std over the defined entries; `excluded` counts the rest.
struct Stat {
  double mean = 0, std = 0;
  std::size_t n = 0, excluded = 0;

  bool defined() const { return n > 0; }

  static Stat of(const std::vector<std::optional<double>>& xs) {
    Stat s;
    double sum = 0;
    for (const auto& x : xs) {
      if (x) {
        sum += *x;
        ++s.n;
      } else {
        ++s.excluded;
      }
    }
    if (s.n == 0) return s;
    s.mean = sum / double(s.n);
    double var = 0;
    for (const auto& x : xs)
      if (x) var += (*x - s.mean) * (*x - s.mean);
    s.std = std::sqrt(var / double(s.n));
    return s;
  }

  static Stat of(const std::vector<double>& xs) { return of(std::vector<std::optional<double>>(xs.begin(), xs.end())); }

  // "m +- s" with the given scale, or "-" when nothing is defined.
  std::string format(double scale = 1.0, int precision = 2) const {
    if (!defined()) return "-";
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(precision);
    os << mean * scale << " +- " << std * scale;
    return os.str();
  }
};

// One evaluation run (one split seed): metrics of every test volume.
struct RunMetrics {
  std::uint64_t split_seed = 0;
  std::vector<VolumeMetrics> volumes;

  // Per-class volume-mean Dice, then their class average.
  std::vector<double> class_dice() const {
    std::vector<double> out;
    if (volumes.empty()) return out;
    for (std::size_t c = 0; c < volumes.front().dice.size(); ++c) {
      double s = 0;
      for (const auto& v : volumes) s += v.dice[c];
      out.push_back(s / double(volumes.size()));
    }
    return out;
  }
  double mean_dice() const {
    const auto d = class_dice();
    double s = 0;
    for (double x : d) s += x;
    return d.empty() ? 0.0 : s / double(d.size());
  }
  // Mean over volumes of the per-volume class-averaged ASSD, where defined.
  std::optional<double> mean_assd() const {
    std::vector<std::optional<double>> xs;
    for (const auto& v : volumes) xs.push_back(v.mean_assd());
    const Stat s = Stat::of(xs);
    if (!s.defined()) return std::nullopt;
    return s.mean;
  }
};

// One row of a method report, aggregated across runs.
struct ReportRow {
  std::string method;
  std::string n_labeled;
  std::vector<Stat> dice;  // per foreground class
  Stat dice_avg;
  Stat assd;
  std::size_t runs = 0;
};

inline ReportRow aggregate(const std::string& method, const std::string& n_labeled, const std::vector<RunMetrics>& runs) {
  ReportRow row;
  row.method = method;
  row.n_labeled = n_labeled;
  row.runs = runs.size();
  if (runs.empty()) return row;
  const std::size_t classes = runs.front().class_dice().size();
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> xs;
    for (const auto& r : runs) xs.push_back(r.class_dice()[c]);
    row.dice.push_back(Stat::of(xs));
  }
  std::vector<double> avg;
  std::vector<std::optional<double>> assd_runs;
  for (const auto& r : runs) {
    avg.push_back(r.mean_dice());
    assd_runs.push_back(r.mean_assd());
  }
  row.dice_avg = Stat::of(avg);
  row.assd = Stat::of(assd_runs);
  return row;
}

struct MetricsReport {
  std::vector<ReportRow> rows;

  static std::string csv_header() {
    return "method,n_labeled,dice_RV,dice_RV_std,dice_Myo,dice_Myo_std,dice_LV,dice_LV_std,dice_avg,dice_avg_std,"
           "assd,assd_std,assd_excluded,runs";
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(6);
    os << csv_header() << "\n";
    auto cell = [&](const Stat& s) {
      if (s.defined()) {
        os << s.mean << "," << s.std;
      } else {
        os << "-,-";
      }
    };
    for (const auto& r : rows) {
      os << r.method << "," << r.n_labeled;
      for (const auto& d : r.dice) {
        os << ",";
        cell(d);
      }
      os << ",";
      cell(r.dice_avg);
      os << ",";
      cell(r.assd);
      os << "," << r.assd.excluded << "," << r.runs << "\n";
    }
    return os.str();
  }

  // Human-readable table, Dice in percent.
  std::string to_text() const {
    std::ostringstream os;
    os << "method | labeled | RV | Myo | LV | avg | ASSD\n";
    for (const auto& r : rows) {
      os << r.method << " | " << r.n_labeled;
      for (const auto& d : r.dice) os << " | " << d.format(100.0);
      os << " | " << r.dice_avg.format(100.0) << " | " << r.assd.format(1.0) << "\n";
    }
    return os.str();
  }
};

}  // namespace autosam
