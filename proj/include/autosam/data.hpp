#pragma once

// Synthetic cardiac phantoms and source blobs, volume preprocessing,
// augmentation, patient splits and the SVOL volume format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "autosam/nn.hpp"

namespace autosam {

inline constexpr std::uint8_t kBackground = 0, kRV = 1, kMyo = 2, kLV = 3;
inline constexpr std::size_t kNumForeground = 3;

inline const char* class_name(std::size_t c) {
  static constexpr const char* names[] = {"bg", "RV", "Myo", "LV"};
  return c < 4 ? names[c] : "?";
}

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DegenerateVolumeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// image and labels are [D, H, W] in raster order.
struct Volume {
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<float> image;
  std::vector<std::uint8_t> labels;
  std::uint32_t patient_id = 0;

  std::size_t slice_size() const { return height * width; }
  std::size_t voxels() const { return depth * height * width; }
  const float* image_slice(std::size_t i) const { return image.data() + i * slice_size(); }
  const std::uint8_t* label_slice(std::size_t i) const { return labels.data() + i * slice_size(); }

  void validate(std::size_t max_label = kNumForeground) const {
    if (image.size() != voxels() || labels.size() != voxels()) throw DimensionError("volume: buffer/extent mismatch");
    for (auto l : labels) {
      if (l > max_label) throw std::out_of_range("volume: label " + std::to_string(int(l)) + " out of range");
    }
  }

  bool operator==(const Volume&) const = default;
};

// splitmix64 finalizer, used to derive independent per-sample seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t sample_seed(std::uint64_t global_seed, std::uint64_t epoch, std::uint64_t index) {
  return mix64(mix64(mix64(global_seed) ^ epoch) ^ index);
}

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Separable Gaussian blur with clamped borders, in place.
inline void gaussian_blur(std::vector<float>& img, std::size_t h, std::size_t w, double sigma) {
  if (sigma <= 0) return;
  const int r = std::max(1, int(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  std::vector<float> tmp(img.size());
  const int H = int(h), W = int(w);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * W + std::clamp(x + i, 0, W - 1)];
      tmp[y * W + x] = float(s);
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[std::clamp(y + i, 0, H - 1) * W + x];
      img[y * W + x] = float(s);
    }
}

// Smooth zero-mean field with unit peak-ish amplitude.
inline std::vector<float> smooth_noise(std::size_t h, std::size_t w, double sigma, Rng& rng) {
  std::normal_distribution<float> n01(0.f, 1.f);
  std::vector<float> f(h * w);
  for (auto& v : f) v = n01(rng);
  gaussian_blur(f, h, w, sigma);
  float mx = 1e-12f;
  for (auto v : f) mx = std::max(mx, std::abs(v));
  for (auto& v : f) v /= mx;
  return f;
}

struct Ellipse {
  double cx, cy, a, b, theta;

  // <= 1 inside.
  double level(double x, double y) const {
    const double dx = x - cx, dy = y - cy, c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
    return u * u + v * v;
  }
  bool inside(double x, double y) const { return level(x, y) <= 1.0; }
  bool within_frame(double size, double margin) const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double ex = std::sqrt(a * a * c * c + b * b * s * s), ey = std::sqrt(a * a * s * s + b * b * c * c);
    return cx - ex >= margin && cx + ex <= size - 1 - margin && cy - ey >= margin && cy + ey <= size - 1 - margin;
  }
};

struct HeartShape {
  Ellipse lv, rv;
  double myo;  // wall thickness in pixels
  Ellipse epi() const { return {lv.cx, lv.cy, lv.a + myo, lv.b + myo, lv.theta}; }
};

struct PatientAppearance {
  double blood_lv, blood_rv, myo, tissue, texture, bias_x, bias_y, bias_q, noise;
  std::vector<Ellipse> organs;
  std::vector<double> organ_levels;
};

}  // namespace detail

struct PhantomConfig {
  std::size_t n_patients = 20;
  std::size_t slices = 8;
  std::size_t img = 64;
  std::uint64_t seed = 0;
};

// Two volumes per patient (end-diastole, then end-systole). Each slice holds an
// LV disk, a thin Myo ring around it and an RV crescent hugging the ring, on a
// textured background of similar intensity to the Myo.
inline std::vector<Volume> generate_phantom_dataset(const PhantomConfig& cfg) {
  if (cfg.img < 16) throw std::invalid_argument("phantom: img must be >= 16");
  if (cfg.slices < 1 || cfg.n_patients < 1) throw std::invalid_argument("phantom: need >= 1 patient and slice");
  using detail::uniform;
  const double S = double(cfg.img);
  const std::size_t hw = cfg.img * cfg.img;
  std::vector<Volume> out;
  for (std::size_t p = 0; p < cfg.n_patients; ++p) {
    Rng rng(mix64(cfg.seed ^ mix64(p + 1)));
    detail::HeartShape base{};
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const double a = uniform(rng, 0.17, 0.21) * S;
      base.lv = {S / 2 + uniform(rng, -0.08, 0.08) * S, S / 2 + uniform(rng, -0.08, 0.08) * S, a,
                 a * uniform(rng, 0.85, 1.0), uniform(rng, 0, std::numbers::pi)};
      base.myo = uniform(rng, 0.035, 0.05) * S;
      const double phi = std::numbers::pi + uniform(rng, -0.5, 0.5);
      const double reach = (a + base.myo) * uniform(rng, 0.55, 0.75);
      base.rv = {base.lv.cx + reach * std::cos(phi), base.lv.cy + reach * std::sin(phi), uniform(rng, 0.15, 0.19) * S,
                 uniform(rng, 0.26, 0.32) * S, phi};
      ok = base.epi().within_frame(S, 2) && base.rv.within_frame(S, 2);
    }
    if (!ok) throw std::runtime_error("phantom: could not fit heart in frame after 100 retries");

    detail::PatientAppearance look;
    look.blood_lv = uniform(rng, 0.75, 0.95);
    look.blood_rv = look.blood_lv * uniform(rng, 0.85, 1.0);
    look.myo = uniform(rng, 0.28, 0.38);
    look.tissue = look.myo + uniform(rng, 0.02, 0.1);
    look.texture = uniform(rng, 0.05, 0.09);
    look.bias_x = uniform(rng, -0.1, 0.1);
    look.bias_y = uniform(rng, -0.1, 0.1);
    look.bias_q = uniform(rng, -0.08, 0.08);
    look.noise = uniform(rng, 0.02, 0.04);
    const int n_organs = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int i = 0; i < n_organs; ++i) {
      const double r = uniform(rng, 0.06, 0.14) * S;
      look.organs.push_back({uniform(rng, 0.1, 0.9) * S, uniform(rng, 0.1, 0.9) * S, r, r * uniform(rng, 0.5, 1.0),
                             uniform(rng, 0, std::numbers::pi)});
      look.organ_levels.push_back(uniform(rng, 0.15, 0.75));
    }

    for (int phase = 0; phase < 2; ++phase) {
      Volume v;
      v.depth = cfg.slices;
      v.height = v.width = cfg.img;
      v.patient_id = static_cast<std::uint32_t>(p);
      v.image.resize(v.voxels());
      v.labels.resize(v.voxels());
      // Systole: smaller cavity, thicker wall, smaller RV.
      const double lv_scale = phase == 0 ? 1.0 : uniform(rng, 0.7, 0.8);
      const double wall_scale = phase == 0 ? 1.0 : uniform(rng, 1.15, 1.3);
      const double rv_scale = phase == 0 ? 1.0 : uniform(rng, 0.8, 0.9);
      for (std::size_t s = 0; s < cfg.slices; ++s) {
        // Base to apex.
        const double t = cfg.slices > 1 ? double(s) / double(cfg.slices - 1) : 0.0;
        const double k = 1.0 - 0.25 * t;
        detail::HeartShape h = base;
        h.lv.a *= k * lv_scale;
        h.lv.b *= k * lv_scale;
        h.myo *= wall_scale;
        h.rv.a *= k * rv_scale;
        h.rv.b *= k * rv_scale;
        const detail::Ellipse epi = h.epi();
        std::uint8_t* lab = v.labels.data() + s * hw;
        std::vector<float> clean(hw);
        for (std::size_t y = 0; y < cfg.img; ++y) {
          for (std::size_t x = 0; x < cfg.img; ++x) {
            const double px = double(x), py = double(y);
            std::uint8_t c = kBackground;
            if (h.lv.inside(px, py)) {
              c = kLV;
            } else if (epi.inside(px, py)) {
              c = kMyo;
            } else if (h.rv.inside(px, py)) {
              c = kRV;
            }
            lab[y * cfg.img + x] = c;
            double val = look.tissue;
            for (std::size_t o = 0; o < look.organs.size(); ++o)
              if (look.organs[o].inside(px, py)) val = look.organ_levels[o];
            if (c == kLV) val = look.blood_lv;
            if (c == kMyo) val = look.myo;
            if (c == kRV) val = look.blood_rv;
            clean[y * cfg.img + x] = float(val);
          }
        }
        detail::gaussian_blur(clean, cfg.img, cfg.img, 0.7);
        const std::vector<float> tex = detail::smooth_noise(cfg.img, cfg.img, 1.5, rng);
        std::normal_distribution<float> pixel_noise(0.f, float(look.noise));
        float* im = v.image.data() + s * hw;
        for (std::size_t y = 0; y < cfg.img; ++y) {
          for (std::size_t x = 0; x < cfg.img; ++x) {
            const double u = double(x) / S - 0.5, w = double(y) / S - 0.5;
            const double bias = look.bias_x * u + look.bias_y * w + look.bias_q * (u * u + w * w);
            const std::size_t i = y * cfg.img + x;
            im[i] = clean[i] + float(look.texture * tex[i] + bias) + pixel_noise(rng);
          }
        }
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

struct SourceConfig {
  std::size_t n_volumes = 24;
  std::size_t slices = 8;
  std::size_t img = 64;
  std::uint64_t seed = 0;
};

// Pretraining distribution: 2-3 convex blobs, each clearly brighter or darker
// than a mid-grey textured background. labels hold the blob index (1..3);
// later blobs occlude earlier ones.
inline std::vector<Volume> generate_source_dataset(const SourceConfig& cfg) {
  using detail::uniform;
  const double S = double(cfg.img);
  const std::size_t hw = cfg.img * cfg.img;
  std::vector<Volume> out;
  for (std::size_t vi = 0; vi < cfg.n_volumes; ++vi) {
    Rng rng(mix64(cfg.seed ^ mix64(0x50c0000 + vi)));
    Volume v;
    v.depth = cfg.slices;
    v.height = v.width = cfg.img;
    v.patient_id = static_cast<std::uint32_t>(vi);
    v.image.resize(v.voxels());
    v.labels.resize(v.voxels());
    for (std::size_t s = 0; s < cfg.slices; ++s) {
      const double bg = uniform(rng, 0.35, 0.55);
      const int n_blobs = std::uniform_int_distribution<int>(2, 3)(rng);
      std::vector<detail::Ellipse> blobs;
      std::vector<double> levels;
      for (int b = 0; b < n_blobs; ++b) {
        detail::Ellipse e{};
        for (int attempt = 0; attempt < 100; ++attempt) {
          const double a = uniform(rng, 0.08, 0.22) * S;
          e = {uniform(rng, 0.15, 0.85) * S, uniform(rng, 0.15, 0.85) * S, a, a * uniform(rng, 0.5, 1.0),
               uniform(rng, 0, std::numbers::pi)};
          if (e.within_frame(S, 1)) break;
        }
        blobs.push_back(e);
        const double contrast = uniform(rng, 0.3, 0.45);
        levels.push_back(rng() % 2 ? bg + contrast : bg - contrast);
      }
      std::uint8_t* lab = v.labels.data() + s * hw;
      std::vector<float> clean(hw);
      for (std::size_t y = 0; y < cfg.img; ++y) {
        for (std::size_t x = 0; x < cfg.img; ++x) {
          std::uint8_t c = 0;
          double val = bg;
          for (int b = 0; b < n_blobs; ++b) {
            if (blobs[b].inside(double(x), double(y))) {
              c = static_cast<std::uint8_t>(b + 1);
              val = levels[b];
            }
          }
          lab[y * cfg.img + x] = c;
          clean[y * cfg.img + x] = float(val);
        }
      }
      detail::gaussian_blur(clean, cfg.img, cfg.img, 0.6);
      const std::vector<float> tex = detail::smooth_noise(cfg.img, cfg.img, 1.5, rng);
      const double texture = uniform(rng, 0.02, 0.08);
      std::normal_distribution<float> pixel_noise(0.f, float(uniform(rng, 0.01, 0.03)));
      float* im = v.image.data() + s * hw;
      for (std::size_t i = 0; i < hw; ++i) im[i] = clean[i] + float(texture * tex[i]) + pixel_noise(rng);
    }
    out.push_back(std::move(v));
  }
  return out;
}

// Zero mean, unit variance over the whole volume.
inline Volume normalize_volume(Volume v) {
  if (v.image.empty()) throw DegenerateVolumeError("normalize_volume: empty volume");
  double mean = 0;
  for (float x : v.image) mean += x;
  mean /= double(v.image.size());
  double var = 0;
  for (float x : v.image) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / double(v.image.size()));
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
    throw DegenerateVolumeError("normalize_volume: zero intensity variance (patient " +
                                std::to_string(v.patient_id) + ")");
  }
  for (float& x : v.image) x = float((x - mean) / sd);
  return v;
}

// Slice i min-max rescaled to [0,1] and replicated to [3,H,W]. A constant
// slice maps to 0.5.
inline Tensor<float> slice_to_rgb(const Volume& v, std::size_t i) {
  if (i >= v.depth) {
    throw std::out_of_range("slice_to_rgb: slice " + std::to_string(i) + " of " + std::to_string(v.depth));
  }
  const std::size_t hw = v.slice_size();
  const float* src = v.image_slice(i);
  const auto [lo_it, hi_it] = std::minmax_element(src, src + hw);
  const float lo = *lo_it, range = *hi_it - *lo_it;
  Tensor<float> out({3, v.height, v.width});
  for (std::size_t k = 0; k < hw; ++k) {
    const float val = range > 0 ? std::clamp((src[k] - lo) / range, 0.f, 1.f) : 0.5f;
    out[k] = out[hw + k] = out[2 * hw + k] = val;
  }
  return out;
}

struct AugmentConfig {
  double p_noise = 0.5, noise_sigma = 0.03;
  double p_brightness = 0.5, brightness_delta = 0.1;  // additive, uniform in +-delta
  double p_rotation = 0.5, rotation_degrees = 15.0;   // uniform in +-degrees
  double p_elastic = 0.3, elastic_alpha = 2.0, elastic_sigma = 4.0;

  static AugmentConfig none() { return {0, 0.03, 0, 0.1, 0, 15.0, 0, 2.0, 4.0}; }

  void validate() const {
    for (double p : {p_noise, p_brightness, p_rotation, p_elastic}) {
      if (!(p >= 0 && p <= 1)) throw std::invalid_argument("augment: probabilities must be in [0,1]");
    }
    if (!(elastic_sigma > 0)) throw std::invalid_argument("augment: elastic sigma must be positive");
    if (noise_sigma < 0 || brightness_delta < 0 || rotation_degrees < 0 || elastic_alpha < 0) {
      throw std::invalid_argument("augment: magnitudes must be non-negative");
    }
  }
};

// One training sample: image [3,H,W], labels [H,W].
struct Sample {
  Tensor<float> image;
  std::vector<std::uint8_t> labels;
};

namespace detail {

// Resample image (bilinear, clamped) and labels (nearest, background outside)
// at source coordinates (sx, sy) given per output pixel.
inline void warp(Sample& s, const std::vector<double>& sx, const std::vector<double>& sy) {
  const std::size_t c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2), hw = h * w;
  Tensor<float> img({c, h, w});
  std::vector<std::uint8_t> lab(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const double x = std::clamp(sx[i], 0.0, double(w - 1)), y = std::clamp(sy[i], 0.0, double(h - 1));
    const std::size_t x0 = std::min(std::size_t(x), w - 1), y0 = std::min(std::size_t(y), h - 1);
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = x - double(x0), fy = y - double(y0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* src = s.image.data().data() + ch * hw;
      const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
      const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
      img[ch * hw + i] = float(top * (1 - fy) + bot * fy);
    }
    const long nx = std::lround(sx[i]), ny = std::lround(sy[i]);
    lab[i] = (nx < 0 || ny < 0 || nx >= long(w) || ny >= long(h)) ? kBackground : s.labels[ny * w + nx];
  }
  s.image = std::move(img);
  s.labels = std::move(lab);
}

}  // namespace detail

// Rotation about the image center by `degrees` (counter-clockwise in image
// coordinates).
inline Sample rotate_sample(Sample s, double degrees) {
  const std::size_t h = s.image.dim(1), w = s.image.dim(2);
  const double t = degrees * std::numbers::pi / 180.0, c = std::cos(t), sn = std::sin(t);
  const double cx = 0.5 * double(w - 1), cy = 0.5 * double(h - 1);
  std::vector<double> sx(h * w), sy(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = double(x) - cx, dy = double(y) - cy;
      sx[y * w + x] = cx + c * dx + sn * dy;
      sy[y * w + x] = cy - sn * dx + c * dy;
    }
  detail::warp(s, sx, sy);
  return s;
}

// Noise, brightness, rotation and elastic deformation, each applied with its
// own probability; a pure function of (inputs, cfg, seed).
inline Sample augment(Sample s, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t h = s.image.dim(1), w = s.image.dim(2);
  auto coin = [&](double p) { return p > 0 && detail::uniform(rng, 0, 1) < p; };
  if (coin(cfg.p_rotation)) {
    s = rotate_sample(std::move(s), detail::uniform(rng, -cfg.rotation_degrees, cfg.rotation_degrees));
  }
  if (coin(cfg.p_elastic)) {
    std::vector<float> dx = detail::smooth_noise(h, w, cfg.elastic_sigma, rng);
    std::vector<float> dy = detail::smooth_noise(h, w, cfg.elastic_sigma, rng);
    std::vector<double> sx(h * w), sy(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        sx[y * w + x] = double(x) + cfg.elastic_alpha * dx[y * w + x];
        sy[y * w + x] = double(y) + cfg.elastic_alpha * dy[y * w + x];
      }
    detail::warp(s, sx, sy);
  }
  if (coin(cfg.p_brightness)) {
    const float delta = float(detail::uniform(rng, -cfg.brightness_delta, cfg.brightness_delta));
    for (auto& v : s.image.data()) v += delta;
  }
  if (coin(cfg.p_noise)) {
    std::normal_distribution<float> n(0.f, float(cfg.noise_sigma));
    for (auto& v : s.image.data()) v += n(rng);
  }
  return s;
}

enum class Partition : std::uint8_t { train, val, test };

struct SplitSpec {
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> train, val, test;  // patient ids, in shuffled order

  Partition partition_of(std::uint32_t id) const {
    if (std::find(train.begin(), train.end(), id) != train.end()) return Partition::train;
    if (std::find(val.begin(), val.end(), id) != val.end()) return Partition::val;
    if (std::find(test.begin(), test.end(), id) != test.end()) return Partition::test;
    throw std::out_of_range("split: unknown patient " + std::to_string(id));
  }
};

// Seeded shuffle, then contiguous cuts at rounded ratio boundaries. Val and
// test get at least one patient each.
inline SplitSpec split_patients(std::vector<std::uint32_t> ids, std::array<double, 3> ratios = {70, 15, 15},
                                std::uint64_t seed = 0) {
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw std::invalid_argument("split: duplicate patient id");
  if (ids.size() < 3) throw std::invalid_argument("split: need at least 3 patients, got " + std::to_string(ids.size()));
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (!(ratios[0] > 0 && ratios[1] > 0 && ratios[2] > 0)) throw std::invalid_argument("split: ratios must be positive");
  Rng rng(mix64(seed));
  std::shuffle(ids.begin(), ids.end(), rng);
  const double n = double(ids.size());
  std::size_t n_val = std::max<std::size_t>(1, std::size_t(std::lround(n * ratios[1] / total)));
  std::size_t n_test = std::max<std::size_t>(1, std::size_t(std::lround(n * ratios[2] / total)));
  while (n_val + n_test >= ids.size()) (n_val > n_test ? n_val : n_test)--;
  SplitSpec s;
  s.seed = seed;
  const std::size_t n_train = ids.size() - n_val - n_test;
  s.train.assign(ids.begin(), ids.begin() + n_train);
  s.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  s.test.assign(ids.begin() + n_train + n_val, ids.end());
  return s;
}

// Volumes of the listed patients, in list order (a patient's volumes stay in
// dataset order).
inline std::vector<Volume> select_patients(const std::vector<Volume>& all, const std::vector<std::uint32_t>& ids) {
  std::vector<Volume> out;
  for (auto id : ids)
    for (const auto& v : all)
      if (v.patient_id == id) out.push_back(v);
  return out;
}

// --- SVOL ---------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

inline std::string encode_svol(const Volume& v) {
  v.validate(255);
  static_assert(std::numeric_limits<float>::is_iec559);
  std::string out = "SVOL";
  out.push_back(char(0x01));
  detail::put_u32(out, std::uint32_t(v.depth));
  detail::put_u32(out, std::uint32_t(v.height));
  detail::put_u32(out, std::uint32_t(v.width));
  for (float f : v.image) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  out.append(reinterpret_cast<const char*>(v.labels.data()), v.labels.size());
  detail::put_u32(out, v.patient_id);
  return out;
}

inline Volume decode_svol(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 5 || std::memcmp(p, "SVOL", 4) != 0) throw FormatError("svol: bad magic");
  if (p[4] != 0x01) throw FormatError("svol: unsupported version " + std::to_string(int(p[4])));
  if (bytes.size() < 17) throw TruncatedError("svol: truncated header");
  Volume v;
  v.depth = detail::get_u32(p + 5);
  v.height = detail::get_u32(p + 9);
  v.width = detail::get_u32(p + 13);
  // 64-bit product of three u32 cannot overflow past 2^96; cap at 2^31 voxels.
  const unsigned __int128 voxels = (unsigned __int128)v.depth * v.height * v.width;
  if (voxels == 0 || voxels > (unsigned __int128)(1u << 31)) {
    throw FormatError("svol: extents " + std::to_string(v.depth) + "x" + std::to_string(v.height) + "x" +
                      std::to_string(v.width) + " out of range");
  }
  const std::size_t n = std::size_t(voxels);
  const std::size_t expected = 17 + 5 * n + 4;
  if (bytes.size() != expected) {
    throw TruncatedError("svol: header declares " + std::to_string(expected) + " bytes, file has " +
                         std::to_string(bytes.size()));
  }
  v.image.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail::get_u32(p + 17 + 4 * i);
    std::memcpy(&v.image[i], &bits, 4);
  }
  v.labels.assign(p + 17 + 4 * n, p + 17 + 5 * n);
  v.patient_id = detail::get_u32(p + 17 + 5 * n);
  return v;
}

inline void write_svol(const Volume& v, const std::filesystem::path& path) { detail::write_file(path, encode_svol(v)); }

inline Volume read_svol(const std::filesystem::path& path) {
  try {
    return decode_svol(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// --- PNG debug export -----------------------------------------------------

namespace detail {

inline void put_u32_be(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void png_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32_be(out, std::uint32_t(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_u32_be(out, std::uint32_t(crc32(0, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size()))));
}

// 8-bit PNG, grayscale (color type 0) or paletted (type 3).
inline std::string encode_png(const std::vector<std::uint8_t>& pixels, std::size_t h, std::size_t w,
                              const std::vector<std::array<std::uint8_t, 3>>* palette) {
  std::string raw;
  for (std::size_t y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.append(reinterpret_cast<const char*>(pixels.data() + y * w), w);
  }
  uLongf len = compressBound(uLong(raw.size()));
  std::string z(len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &len, reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()),
                Z_BEST_COMPRESSION) != Z_OK) {
    throw std::runtime_error("png: deflate failed");
  }
  z.resize(len);
  std::string png("\x89PNG\r\n\x1a\n", 8), ihdr;
  put_u32_be(ihdr, std::uint32_t(w));
  put_u32_be(ihdr, std::uint32_t(h));
  ihdr += {char(8), char(palette ? 3 : 0), char(0), char(0), char(0)};
  png_chunk(png, "IHDR", ihdr);
  if (palette) {
    std::string plte;
    for (const auto& c : *palette) plte += {char(c[0]), char(c[1]), char(c[2])};
    png_chunk(png, "PLTE", plte);
  }
  png_chunk(png, "IDAT", z);
  png_chunk(png, "IEND", "");
  return png;
}

}  // namespace detail

// Writes <stem>_image.png (min-max scaled gray) and <stem>_labels.png
// (paletted) for slice i.
inline void export_slice_png(const Volume& v, std::size_t i, const std::filesystem::path& stem) {
  const Tensor<float> rgb = slice_to_rgb(v, i);
  std::vector<std::uint8_t> gray(v.slice_size());
  for (std::size_t k = 0; k < gray.size(); ++k) gray[k] = std::uint8_t(std::lround(rgb[k] * 255.f));
  const std::vector<std::array<std::uint8_t, 3>> palette = {{0, 0, 0}, {220, 50, 50}, {50, 200, 80}, {60, 90, 230}};
  std::vector<std::uint8_t> lab(v.label_slice(i), v.label_slice(i) + v.slice_size());
  for (auto& l : lab) l = std::min<std::uint8_t>(l, 3);
  detail::write_file(stem.string() + "_image.png", detail::encode_png(gray, v.height, v.width, nullptr));
  detail::write_file(stem.string() + "_labels.png", detail::encode_png(lab, v.height, v.width, &palette));
}

}  // namespace autosam
