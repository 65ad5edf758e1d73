#pragma once

// Prediction heads over an ImageEmbedding.
//
//   AutoSamHead      SAM-style mask decoder without prompt tokens; one
//                    independent token group per output channel.
//   CnnHead          k conv stages, the last two upscaling 2x each.
//   LinearHead       two transposed convs and two 1x1 convs.
//   PromptedDecoder  the same mask decoder fed box-prompt tokens; used for
//                    source pretraining and as the zero-shot baseline.
//
// Prompt-free heads emit C+1 channels: channel 0 is background, channel c is
// foreground class c.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autosam/encoder.hpp"
#include "autosam/mask.hpp"
#include "autosam/nn.hpp"

namespace autosam {

enum class HeadKind { autosam, cnn, linear, prompted };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::autosam: return "autosam";
    case HeadKind::cnn: return "cnn";
    case HeadKind::linear: return "linear";
    case HeadKind::prompted: return "prompted";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "autosam") return HeadKind::autosam;
  if (s == "cnn") return HeadKind::cnn;
  if (s == "linear") return HeadKind::linear;
  if (s == "prompted") return HeadKind::prompted;
  throw std::invalid_argument("unknown head '" + s + "' (expected autosam, cnn or linear)");
}

struct HeadConfig {
  HeadKind kind = HeadKind::autosam;
  std::size_t num_classes = 3;  // foreground classes C
  std::size_t cnn_depth = 4;    // k
  std::size_t twoway_layers = 2;
  std::size_t attn_heads = 4;

  std::size_t channels() const { return num_classes + 1; }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("head: num_classes must be >= 1");
    if (kind == HeadKind::cnn && cnn_depth < 2) {
      throw std::invalid_argument("head: cnn_depth must be >= 2, got " + std::to_string(cnn_depth));
    }
    if (twoway_layers < 1) throw std::invalid_argument("head: twoway_layers must be >= 1");
  }
};

template <typename T>
struct MaskLogits {
  Tensor<T> logits;  // [N, channels, img, img]
};

class NoForegroundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inclusive pixel bounds, as scanned from a mask.
struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool operator==(const PixelBox&) const = default;
};

// Continuous pixel-edge coordinates; a pixel (x,y) covers [x,x+1)x[y,y+1).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

inline Box to_edges(const PixelBox& b) {
  return {double(b.x0), double(b.y0), double(b.x1 + 1), double(b.y1 + 1)};
}

// Tight bounding box of the nonzero pixels.
inline PixelBox box_from_mask(const BinaryMask& mask) {
  PixelBox b{int(mask.width), int(mask.height), -1, -1};
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      b.x0 = std::min(b.x0, int(x));
      b.y0 = std::min(b.y0, int(y));
      b.x1 = std::max(b.x1, int(x));
      b.y1 = std::max(b.y1, int(y));
    }
  }
  if (b.x1 < 0) throw NoForegroundError("box_from_mask: mask has no foreground");
  return b;
}

// Fixed sinusoidal code of a point with coordinates normalized to [0,1].
// Layout: [sin(w x), cos(w x), sin(w y), cos(w y)], w_k = pi (k+1).
template <typename T>
void sinusoidal_encoding(double x, double y, std::size_t dim, T* out) {
  const std::size_t nf = dim / 4;
  for (std::size_t k = 0; k < nf; ++k) {
    const double w = std::numbers::pi * static_cast<double>(k + 1);
    out[k] = static_cast<T>(std::sin(w * x));
    out[nf + k] = static_cast<T>(std::cos(w * x));
    out[2 * nf + k] = static_cast<T>(std::sin(w * y));
    out[3 * nf + k] = static_cast<T>(std::cos(w * y));
  }
}

// Positional code of every grid cell centre, raster order: [G*G, dim].
template <typename T>
Tensor<T> grid_positional_encoding(std::size_t side, std::size_t dim) {
  Tensor<T> pe({side * side, dim});
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j)
      sinusoidal_encoding<T>((j + 0.5) / double(side), (i + 0.5) / double(side), dim,
                             pe.data().data() + (i * side + j) * dim);
  return pe;
}

// Token block for one decoder group. Sequence order is fixed:
// [iou, fg, bg, (prompts)].
template <typename T>
struct AuxiliaryEmbeddings {
  Tensor<T> iou_token;      // [1, dim]
  Tensor<T> fg_mask_token;  // [1, dim]
  Tensor<T> bg_mask_token;  // [1, dim]
  std::optional<Tensor<T>> prompt_tokens;  // [P, dim]

  static AuxiliaryEmbeddings random(std::size_t dim, Rng& rng) {
    return {uniform_param<T>({1, dim}, 1.0, rng), uniform_param<T>({1, dim}, 1.0, rng),
            uniform_param<T>({1, dim}, 1.0, rng), std::nullopt};
  }

  Tensor<T> sequence() const {
    std::vector<Tensor<T>> parts{iou_token, fg_mask_token, bg_mask_token};
    if (prompt_tokens) parts.push_back(*prompt_tokens);
    return concat(parts, 0);
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + "iou_token", iou_token);
    out.emplace_back(prefix + "fg_mask_token", fg_mask_token);
    out.emplace_back(prefix + "bg_mask_token", bg_mask_token);
  }
};

// Alternating token/image attention. Per layer: token self-attention, tokens
// attend to the grid, token MLP, grid attends to tokens; each followed by a
// residual add and layer norm. A final token-to-grid attention closes the
// stack. Positional codes are re-added to queries and keys at every
// attention.
template <typename T>
class TwoWayTransformer {
 public:
  TwoWayTransformer() = default;
  TwoWayTransformer(std::size_t dim, std::size_t layers, std::size_t heads, Rng& rng) {
    const std::size_t inner = dim / 2;
    for (std::size_t i = 0; i < layers; ++i) {
      Layer l;
      l.self_attn = Attention<T>(dim, dim, heads, rng);
      l.norm1 = LayerNorm<T>(dim);
      l.token_to_image = Attention<T>(dim, inner, heads, rng);
      l.norm2 = LayerNorm<T>(dim);
      l.mlp = Mlp<T>({dim, dim, dim}, Activation::relu, rng);
      l.norm3 = LayerNorm<T>(dim);
      l.image_to_token = Attention<T>(dim, inner, heads, rng);
      l.norm4 = LayerNorm<T>(dim);
      layers_.push_back(std::move(l));
    }
    final_attn_ = Attention<T>(dim, inner, heads, rng);
    final_norm_ = LayerNorm<T>(dim);
  }

  // tokens[T,dim], grid[L,dim], grid_pe[L,dim] -> (tokens', grid').
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& tokens, const Tensor<T>& grid,
                                          const Tensor<T>& grid_pe) const {
    if (tokens.ndim() != 2 || grid.ndim() != 2 || tokens.dim(1) != grid.dim(1) || grid.shape() != grid_pe.shape()) {
      throw DimensionError("two_way_attention: token width must equal embedding width (" +
                           to_string(tokens.shape()) + " vs " + to_string(grid.shape()) + ")");
    }
    const Tensor<T>& token_pe = tokens;
    Tensor<T> q = tokens;
    Tensor<T> k = grid;
    for (const Layer& l : layers_) {
      Tensor<T> qp = add(q, token_pe);
      q = l.norm1(add(q, l.self_attn(qp, qp, q)));
      qp = add(q, token_pe);
      Tensor<T> kp = add(k, grid_pe);
      q = l.norm2(add(q, l.token_to_image(qp, kp, k)));
      q = l.norm3(add(q, l.mlp(q)));
      qp = add(q, token_pe);
      k = l.norm4(add(k, l.image_to_token(kp, qp, q)));
    }
    const Tensor<T> qp = add(q, token_pe);
    const Tensor<T> kp = add(k, grid_pe);
    q = final_norm_(add(q, final_attn_(qp, kp, k)));
    return {q, k};
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = prefix + "layers." + std::to_string(i) + ".";
      layers_[i].self_attn.collect(p + "self_attn.", out);
      layers_[i].norm1.collect(p + "norm1.", out);
      layers_[i].token_to_image.collect(p + "token_to_image.", out);
      layers_[i].norm2.collect(p + "norm2.", out);
      layers_[i].mlp.collect(p + "mlp.", out);
      layers_[i].norm3.collect(p + "norm3.", out);
      layers_[i].image_to_token.collect(p + "image_to_token.", out);
      layers_[i].norm4.collect(p + "norm4.", out);
    }
    final_attn_.collect(prefix + "final_attn.", out);
    final_norm_.collect(prefix + "final_norm.", out);
  }

 private:
  struct Layer {
    Attention<T> self_attn;
    LayerNorm<T> norm1;
    Attention<T> token_to_image;
    LayerNorm<T> norm2;
    Mlp<T> mlp;
    LayerNorm<T> norm3;
    Attention<T> image_to_token;
    LayerNorm<T> norm4;
  };

  std::vector<Layer> layers_;
  Attention<T> final_attn_;
  LayerNorm<T> final_norm_;
};

// Weights shared by every group of a SAM-style mask decoder.
template <typename T>
class MaskDecoderCore {
 public:
  struct GroupOutput {
    Tensor<T> mask;  // [1, 1, 4G, 4G]
    Tensor<T> iou;   // [1, 1]
  };

  MaskDecoderCore() = default;
  MaskDecoderCore(std::size_t dim, std::size_t side, const HeadConfig& cfg, Rng& rng)
      : dim_(dim), side_(side),
        transformer_(dim, cfg.twoway_layers, cfg.attn_heads, rng),
        up1_(dim, dim / 4, 2, 2, rng),
        up2_(dim / 4, dim / 8, 2, 2, rng),
        hyper_({dim, dim, dim, dim / 8}, Activation::relu, rng),
        iou_head_({dim, dim, 1}, Activation::relu, rng),
        grid_pe_(grid_positional_encoding<T>(side, dim)) {}

  std::size_t dim() const { return dim_; }
  std::size_t side() const { return side_; }

  GroupOutput run_group(const Tensor<T>& grid_seq, const Tensor<T>& tokens) const {
    auto [tok, keys] = transformer_.forward(tokens, grid_seq, grid_pe_);
    const Tensor<T> map = sequence_to_map(keys, side_, side_);
    const Tensor<T> up = gelu(up2_(gelu(up1_(map))));
    const std::size_t c = up.dim(1), hw = up.dim(2) * up.dim(3);
    // The foreground mask token (row 1) picks the mask via a channel dot product.
    const Tensor<T> weights = hyper_(slice(tok, 0, 1, 2));
    const Tensor<T> mask = matmul(weights, reshape(up, {c, hw}));
    return {reshape(mask, {1, 1, up.dim(2), up.dim(3)}), iou_head_(slice(tok, 0, 0, 1))};
  }

  const TwoWayTransformer<T>& transformer() const { return transformer_; }
  const Tensor<T>& grid_pe() const { return grid_pe_; }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    transformer_.collect(prefix + "transformer.", out);
    up1_.collect(prefix + "upscale1.", out);
    up2_.collect(prefix + "upscale2.", out);
    hyper_.collect(prefix + "mask_mlp.", out);
    iou_head_.collect(prefix + "iou_mlp.", out);
  }

 private:
  std::size_t dim_ = 0, side_ = 0;
  TwoWayTransformer<T> transformer_;
  ConvTranspose2d<T> up1_, up2_;
  Mlp<T> hyper_;
  Mlp<T> iou_head_;
  Tensor<T> grid_pe_;
};

// Interface of the heads that take nothing but the image embedding.
template <typename T>
class PromptFreeHead {
 public:
  virtual ~PromptFreeHead() = default;
  virtual HeadKind kind() const = 0;
  virtual MaskLogits<T> forward(const ImageEmbedding<T>& embedding) const = 0;
  virtual NamedParams<T> parameters() const = 0;
};

namespace detail {

template <typename T>
void copy_values(const Tensor<T>& src, Tensor<T>& dst) {
  if (src.shape() != dst.shape()) {
    throw DimensionError("weight copy: shape " + to_string(src.shape()) + " vs " + to_string(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

}  // namespace detail

template <typename T>
class PromptedDecoder;

template <typename T>
class AutoSamHead final : public PromptFreeHead<T> {
 public:
  AutoSamHead(const HeadConfig& cfg, const EncoderConfig& enc, Rng& rng)
      : cfg_(cfg), img_(enc.img), core_(enc.dim, enc.grid(), cfg, rng) {
    cfg_.validate();
    for (std::size_t g = 0; g < cfg_.channels(); ++g) groups_.push_back(AuxiliaryEmbeddings<T>::random(enc.dim, rng));
  }

  HeadKind kind() const override { return HeadKind::autosam; }

  MaskLogits<T> forward(const ImageEmbedding<T>& embedding) const override {
    return forward_groups(std::vector<ImageEmbedding<T>>(groups_.size(), embedding));
  }

  // One embedding copy per group; groups never read each other's copy.
  MaskLogits<T> forward_groups(const std::vector<ImageEmbedding<T>>& copies) const {
    if (copies.size() != groups_.size()) throw DimensionError("autosam: need one embedding copy per group");
    std::vector<Tensor<T>> per_sample;
    for (std::size_t n = 0; n < copies.front().batch(); ++n) {
      std::vector<Tensor<T>> maps;
      for (std::size_t g = 0; g < groups_.size(); ++g)
        maps.push_back(core_.run_group(copies[g].sequence(n), groups_[g].sequence()).mask);
      per_sample.push_back(concat(maps, 1));
    }
    return {bilinear_resize(concat(per_sample, 0), img_, img_)};
  }

  // Group g alone: [N, 1, img, img].
  MaskLogits<T> single_group_forward(const ImageEmbedding<T>& embedding, std::size_t g) const {
    std::vector<Tensor<T>> per_sample;
    for (std::size_t n = 0; n < embedding.batch(); ++n)
      per_sample.push_back(core_.run_group(embedding.sequence(n), groups_.at(g).sequence()).mask);
    return {bilinear_resize(concat(per_sample, 0), img_, img_)};
  }

  // Confidence outputs of the IoU tokens, [N, C+1]. Not trained.
  Tensor<T> iou_predictions(const ImageEmbedding<T>& embedding) const {
    NoGradGuard no_grad;
    std::vector<Tensor<T>> rows;
    for (std::size_t n = 0; n < embedding.batch(); ++n) {
      std::vector<Tensor<T>> cols;
      for (const auto& grp : groups_) cols.push_back(core_.run_group(embedding.sequence(n), grp.sequence()).iou);
      rows.push_back(concat(cols, 1));
    }
    return concat(rows, 0);
  }

  // Start from a pretrained prompted decoder: shared weights are copied and
  // every group receives the decoder's output tokens.
  void load_decoder_weights(const PromptedDecoder<T>& decoder);

  const HeadConfig& config() const { return cfg_; }
  std::size_t groups() const { return groups_.size(); }

  NamedParams<T> parameters() const override {
    NamedParams<T> out;
    core_.collect("head.decoder.", out);
    for (std::size_t g = 0; g < groups_.size(); ++g) groups_[g].collect("head.groups." + std::to_string(g) + ".", out);
    return out;
  }

 private:
  HeadConfig cfg_;
  std::size_t img_;
  MaskDecoderCore<T> core_;
  std::vector<AuxiliaryEmbeddings<T>> groups_;
};

// k stages of (3x3 conv, act, second layer, act). The last two stages use a
// stride-2 transposed conv as the second layer, the others a second 3x3 conv,
// so the map is always upscaled exactly 4x. A 1x1 conv emits C+1 channels.
template <typename T>
class CnnHead final : public PromptFreeHead<T> {
 public:
  CnnHead(const HeadConfig& cfg, const EncoderConfig& enc, Rng& rng) : cfg_(cfg), img_(enc.img) {
    cfg_.validate();
    if (cfg_.cnn_depth < 2) throw std::invalid_argument("cnn head: depth must be >= 2");
    std::size_t cin = enc.dim;
    for (std::size_t s = 0; s < cfg_.cnn_depth; ++s) {
      const std::size_t cout = stage_channels(enc.dim, s);
      Stage st;
      st.conv = Conv2d<T>(cin, cout, 3, 1, 1, rng, kReluGain);
      st.upsample = s + 2 >= cfg_.cnn_depth;
      if (st.upsample) {
        st.up = ConvTranspose2d<T>(cout, cout, 2, 2, rng, kReluGain);
      } else {
        st.conv2 = Conv2d<T>(cout, cout, 3, 1, 1, rng, kReluGain);
      }
      stages_.push_back(std::move(st));
      cin = cout;
    }
    classifier_ = Conv2d<T>(cin, cfg_.channels(), 1, 1, 0, rng);
  }

  // Each channel to zero mean, unit variance over the grid: the embedding's
  // per-channel offsets are large next to its spatial variation.
  static Tensor<T> standardize_channels(const Tensor<T>& grid) {
    const std::size_t n = grid.dim(0), c = grid.dim(1), hw = grid.dim(2) * grid.dim(3);
    const Tensor<T> ones({hw}, T(1)), zeros({hw});
    return reshape(layernorm(reshape(grid, {n * c, hw}), ones, zeros, T(1e-5)), grid.shape());
  }

  // Halving schedule from the embedding width with a floor of 16.
  static std::size_t stage_channels(std::size_t dim, std::size_t stage) {
    return std::max<std::size_t>(16, dim >> stage);
  }

  HeadKind kind() const override { return HeadKind::cnn; }

  // Feature map before the final resize: [N, C+1, 4G, 4G].
  Tensor<T> features(const ImageEmbedding<T>& embedding) const {
    Tensor<T> x = standardize_channels(embedding.grid);
    for (const Stage& st : stages_) {
      x = relu(st.conv(x));
      x = relu(st.upsample ? st.up(x) : st.conv2(x));
    }
    return classifier_(x);
  }

  MaskLogits<T> forward(const ImageEmbedding<T>& embedding) const override {
    return {bilinear_resize(features(embedding), img_, img_)};
  }

  NamedParams<T> parameters() const override {
    NamedParams<T> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string p = "head.stages." + std::to_string(s) + ".";
      stages_[s].conv.collect(p + "conv.", out);
      if (stages_[s].upsample) {
        stages_[s].up.collect(p + "up.", out);
      } else {
        stages_[s].conv2.collect(p + "conv2.", out);
      }
    }
    classifier_.collect("head.classifier.", out);
    return out;
  }

 private:
  struct Stage {
    Conv2d<T> conv;
    bool upsample = false;
    ConvTranspose2d<T> up;
    Conv2d<T> conv2;
  };

  static constexpr double kReluGain = 2.449489742783178;  // sqrt(6)

  HeadConfig cfg_;
  std::size_t img_;
  std::vector<Stage> stages_;
  Conv2d<T> classifier_;
};

// Two stride-2 transposed convs, then two 1x1 convs with one activation.
template <typename T>
class LinearHead final : public PromptFreeHead<T> {
 public:
  LinearHead(const HeadConfig& cfg, const EncoderConfig& enc, Rng& rng) : cfg_(cfg), img_(enc.img) {
    cfg_.validate();
    const std::size_t c = std::max<std::size_t>(16, enc.dim / 2);
    up1_ = ConvTranspose2d<T>(enc.dim, c, 2, 2, rng);
    up2_ = ConvTranspose2d<T>(c, c, 2, 2, rng);
    fc1_ = Conv2d<T>(c, c, 1, 1, 0, rng);
    fc2_ = Conv2d<T>(c, cfg_.channels(), 1, 1, 0, rng);
  }

  HeadKind kind() const override { return HeadKind::linear; }

  MaskLogits<T> forward(const ImageEmbedding<T>& embedding) const override {
    const Tensor<T> x = up2_(up1_(embedding.grid));
    return {bilinear_resize(fc2_(relu(fc1_(x))), img_, img_)};
  }

  NamedParams<T> parameters() const override {
    NamedParams<T> out;
    up1_.collect("head.upscale1.", out);
    up2_.collect("head.upscale2.", out);
    fc1_.collect("head.pointwise1.", out);
    fc2_.collect("head.pointwise2.", out);
    return out;
  }

 private:
  HeadConfig cfg_;
  std::size_t img_;
  ConvTranspose2d<T> up1_, up2_;
  Conv2d<T> fc1_, fc2_;
};

// SAM-style promptable decoder: one group whose token sequence carries two
// box-corner prompt tokens. Emits a single foreground logit map.
template <typename T>
class PromptedDecoder {
 public:
  PromptedDecoder(const HeadConfig& cfg, const EncoderConfig& enc, Rng& rng)
      : img_(enc.img), dim_(enc.dim), core_(enc.dim, enc.grid(), cfg, rng),
        tokens_(AuxiliaryEmbeddings<T>::random(enc.dim, rng)),
        corner_type_(uniform_param<T>({2, enc.dim}, 1.0, rng)) {}

  // Corner a is encoded as top-left, corner b as bottom-right; coordinates in
  // pixels.
  Tensor<T> encode_corners(double ax, double ay, double bx, double by) const {
    Tensor<T> pe({2, dim_});
    sinusoidal_encoding<T>(ax / img_, ay / img_, dim_, pe.data().data());
    sinusoidal_encoding<T>(bx / img_, by / img_, dim_, pe.data().data() + dim_);
    return add(pe, corner_type_);
  }

  Tensor<T> encode_box_prompt(const Box& box) const {
    const double lim = static_cast<double>(img_);
    if (!(box.x0 < box.x1 && box.y0 < box.y1)) throw std::invalid_argument("box prompt: degenerate box");
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > lim || box.y1 > lim) {
      throw std::invalid_argument("box prompt: box outside the image");
    }
    return encode_corners(box.x0, box.y0, box.x1, box.y1);
  }

  // One [2,dim] prompt per sample -> [N, 1, img, img] foreground logits.
  MaskLogits<T> forward(const ImageEmbedding<T>& embedding, const std::vector<Tensor<T>>& prompts) const {
    if (prompts.size() != embedding.batch()) throw DimensionError("prompted decoder: one prompt per sample");
    std::vector<Tensor<T>> maps;
    for (std::size_t n = 0; n < embedding.batch(); ++n) {
      if (prompts[n].ndim() != 2 || prompts[n].dim(0) != 2 || prompts[n].dim(1) != dim_) {
        throw DimensionError("prompted decoder: prompt must be [2," + std::to_string(dim_) + "]");
      }
      AuxiliaryEmbeddings<T> aux = tokens_;
      aux.prompt_tokens = prompts[n];
      maps.push_back(core_.run_group(embedding.sequence(n), aux.sequence()).mask);
    }
    return {bilinear_resize(concat(maps, 0), img_, img_)};
  }

  const MaskDecoderCore<T>& core() const { return core_; }
  const AuxiliaryEmbeddings<T>& tokens() const { return tokens_; }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    core_.collect("head.decoder.", out);
    tokens_.collect("head.tokens.", out);
    out.emplace_back("head.prompt_encoder.corner_type", corner_type_);
    return out;
  }

 private:
  std::size_t img_, dim_;
  MaskDecoderCore<T> core_;
  AuxiliaryEmbeddings<T> tokens_;
  Tensor<T> corner_type_;
};

template <typename T>
void AutoSamHead<T>::load_decoder_weights(const PromptedDecoder<T>& decoder) {
  NamedParams<T> src, dst;
  decoder.core().collect("", src);
  core_.collect("", dst);
  if (src.size() != dst.size()) throw DimensionError("autosam: decoder layout mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first) throw DimensionError("autosam: decoder layout mismatch at " + src[i].first);
    detail::copy_values(src[i].second, dst[i].second);
  }
  for (auto& grp : groups_) {
    detail::copy_values(decoder.tokens().iou_token, grp.iou_token);
    detail::copy_values(decoder.tokens().fg_mask_token, grp.fg_mask_token);
    detail::copy_values(decoder.tokens().bg_mask_token, grp.bg_mask_token);
  }
}

template <typename T>
std::unique_ptr<PromptFreeHead<T>> make_head(const HeadConfig& cfg, const EncoderConfig& enc, Rng& rng) {
  switch (cfg.kind) {
    case HeadKind::autosam: return std::make_unique<AutoSamHead<T>>(cfg, enc, rng);
    case HeadKind::cnn: return std::make_unique<CnnHead<T>>(cfg, enc, rng);
    case HeadKind::linear: return std::make_unique<LinearHead<T>>(cfg, enc, rng);
    case HeadKind::prompted: break;
  }
  throw std::invalid_argument("make_head: the prompted decoder is not a prompt-free head");
}

}  // namespace autosam
