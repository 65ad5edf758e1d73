#pragma once

// Small ViT image encoder standing in for SAM's frozen image encoder.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "autosam/nn.hpp"

namespace autosam {

enum class ScaleTag { tiny, small, base };

inline std::string to_string(ScaleTag tag) {
  switch (tag) {
    case ScaleTag::tiny: return "tiny";
    case ScaleTag::small: return "small";
    case ScaleTag::base: return "base";
  }
  return "?";
}

inline ScaleTag parse_scale_tag(const std::string& s) {
  if (s == "tiny") return ScaleTag::tiny;
  if (s == "small") return ScaleTag::small;
  if (s == "base") return ScaleTag::base;
  throw std::invalid_argument("unknown scale tag '" + s + "' (expected tiny, small or base)");
}

struct EncoderConfig {
  std::size_t img = 64;
  std::size_t patch = 8;
  std::size_t dim = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t window = 8;  // in patches; equal to grid() means global attention
  std::size_t mlp_ratio = 4;
  ScaleTag scale = ScaleTag::tiny;

  std::size_t grid() const { return img / patch; }

  static EncoderConfig for_scale(ScaleTag tag) {
    EncoderConfig c;
    c.scale = tag;
    switch (tag) {
      case ScaleTag::tiny: c.dim = 32; c.depth = 4; break;
      case ScaleTag::small: c.dim = 64; c.depth = 6; break;
      case ScaleTag::base: c.dim = 128; c.depth = 8; break;
    }
    return c;
  }

  void validate() const {
    if (patch == 0 || img % patch != 0) throw DimensionError("encoder: img must be divisible by patch");
    if (heads == 0 || dim % heads != 0) throw DimensionError("encoder: dim must be divisible by heads");
    if (window == 0 || grid() % window != 0) throw DimensionError("encoder: grid side must be divisible by window");
    // Heads need dim/8 mask channels and a 4-way sinusoidal split.
    if (dim % 8 != 0) throw DimensionError("encoder: dim must be a multiple of 8");
    if (depth == 0) throw DimensionError("encoder: depth must be positive");
  }
};

// Encoder output grid [N, dim, G, G].
template <typename T>
struct ImageEmbedding {
  Tensor<T> grid;

  std::size_t batch() const { return grid.dim(0); }
  std::size_t dim() const { return grid.dim(1); }
  std::size_t side() const { return grid.dim(2); }

  // Sample n as a [G*G, dim] sequence.
  Tensor<T> sequence(std::size_t n) const { return map_to_sequence(slice(grid, 0, n, n + 1)); }
};

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t g = cfg_.grid();
    patch_ = Conv2d<T>(3, cfg_.dim, cfg_.patch, cfg_.patch, 0, rng);
    pos_ = uniform_param<T>({g * g, cfg_.dim}, 0.02, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      Block b;
      b.norm1 = LayerNorm<T>(cfg_.dim);
      b.attn = Attention<T>(cfg_.dim, cfg_.dim, cfg_.heads, rng);
      b.norm2 = LayerNorm<T>(cfg_.dim);
      b.mlp = Mlp<T>({cfg_.dim, cfg_.dim * cfg_.mlp_ratio, cfg_.dim}, Activation::gelu, rng);
      blocks_.push_back(std::move(b));
    }
    neck_ = Linear<T>(cfg_.dim, cfg_.dim, rng);
    neck_norm_ = LayerNorm<T>(cfg_.dim);
  }

  const EncoderConfig& config() const { return cfg_; }

  // [N,3,img,img] -> [N, G*G, dim]: non-overlapping patch projection plus the
  // learned positional table.
  Tensor<T> patch_embed(const Tensor<T>& image) const {
    check_image(image);
    const Tensor<T> maps = patch_(image);
    const std::size_t g = cfg_.grid();
    std::vector<Tensor<T>> seqs;
    for (std::size_t n = 0; n < image.dim(0); ++n) {
      Tensor<T> seq = add(map_to_sequence(slice(maps, 0, n, n + 1)), pos_);
      seqs.push_back(reshape(seq, {1, g * g, cfg_.dim}));
    }
    return concat(seqs, 0);
  }

  ImageEmbedding<T> forward(const Tensor<T>& image) const {
    const Tensor<T> tokens = patch_embed(image);
    const std::size_t g = cfg_.grid(), len = g * g;
    std::vector<Tensor<T>> maps;
    for (std::size_t n = 0; n < image.dim(0); ++n) {
      Tensor<T> x = reshape(slice(tokens, 0, n, n + 1), {len, cfg_.dim});
      for (const Block& b : blocks_) x = block_forward(b, x);
      x = neck_norm_(neck_(x));
      maps.push_back(sequence_to_map(x, g, g));
    }
    return {concat(maps, 0)};
  }

  // Frozen parameters never require gradients, so no graph is recorded through
  // the encoder and the optimizer skips them.
  void set_frozen(bool frozen) {
    frozen_ = frozen;
    set_trainable(parameters(), !frozen);
  }
  bool frozen() const { return frozen_; }

  // Route window == grid through the partitioned path as well (testing hook).
  void set_force_windowed(bool on) { force_windowed_ = on; }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    patch_.collect("encoder.patch.", out);
    out.emplace_back("encoder.pos", pos_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "encoder.blocks." + std::to_string(i) + ".";
      blocks_[i].norm1.collect(p + "norm1.", out);
      blocks_[i].attn.collect(p + "attn.", out);
      blocks_[i].norm2.collect(p + "norm2.", out);
      blocks_[i].mlp.collect(p + "mlp.", out);
    }
    neck_.collect("encoder.neck.", out);
    neck_norm_.collect("encoder.neck_norm.", out);
    return out;
  }

 private:
  struct Block {
    LayerNorm<T> norm1;
    Attention<T> attn;
    LayerNorm<T> norm2;
    Mlp<T> mlp;
  };

  void check_image(const Tensor<T>& image) const {
    if (image.ndim() != 4 || image.dim(1) != 3 || image.dim(2) != cfg_.img || image.dim(3) != cfg_.img) {
      throw DimensionError("encoder: expected image [N,3," + std::to_string(cfg_.img) + "," +
                           std::to_string(cfg_.img) + "], got " + to_string(image.shape()));
    }
  }

  Tensor<T> attend(const Tensor<T>& x, const Block& b) const {
    const std::size_t g = cfg_.grid(), win = cfg_.window;
    if (win == g && !force_windowed_) return b.attn(x, x, x);
    // Partition into win x win windows (raster order), attend within each,
    // then scatter back to raster order.
    std::vector<std::size_t> order, inverse(g * g);
    for (std::size_t wy = 0; wy < g / win; ++wy)
      for (std::size_t wx = 0; wx < g / win; ++wx)
        for (std::size_t y = 0; y < win; ++y)
          for (std::size_t xx = 0; xx < win; ++xx) order.push_back((wy * win + y) * g + wx * win + xx);
    for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
    const Tensor<T> grouped = gather_rows(x, order);
    const std::size_t per = win * win;
    std::vector<Tensor<T>> outs;
    for (std::size_t w = 0; w < order.size() / per; ++w) {
      Tensor<T> part = slice(grouped, 0, w * per, (w + 1) * per);
      outs.push_back(b.attn(part, part, part));
    }
    return gather_rows(concat(outs, 0), inverse);
  }

  Tensor<T> block_forward(const Block& b, Tensor<T> x) const {
    x = add(x, attend(b.norm1(x), b));
    return add(x, b.mlp(b.norm2(x)));
  }

  EncoderConfig cfg_;
  Conv2d<T> patch_;
  Tensor<T> pos_;
  std::vector<Block> blocks_;
  Linear<T> neck_;
  LayerNorm<T> neck_norm_;
  bool frozen_ = false;
  bool force_windowed_ = false;
};

}  // namespace autosam
