#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "autosam/heads.hpp"

namespace autosam {
namespace {

using TF = Tensor<float>;
using TD = Tensor<double>;

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double bound = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(u(rng));
  return t;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.img = 32;
  c.patch = 8;
  c.dim = 16;
  c.heads = 2;
  c.window = 4;
  return c;
}

HeadConfig head_config(HeadKind kind, std::size_t k = 4) {
  HeadConfig h;
  h.kind = kind;
  h.cnn_depth = k;
  h.attn_heads = 2;
  return h;
}

ImageEmbedding<float> random_embedding(const EncoderConfig& enc, std::size_t n, std::uint64_t seed) {
  return {random_tensor<float>({n, enc.dim, enc.grid(), enc.grid()}, seed)};
}

bool bitwise_equal(const TF& a, const TF& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

TEST(Heads, PromptFreeOutputExtents) {
  const EncoderConfig enc = small_encoder();
  for (HeadKind kind : {HeadKind::autosam, HeadKind::cnn, HeadKind::linear}) {
    Rng rng(1);
    auto head = make_head<float>(head_config(kind), enc, rng);
    EXPECT_EQ(head->kind(), kind);
    const TF out = head->forward(random_embedding(enc, 2, 2)).logits;
    EXPECT_EQ(out.shape(), (Shape{2, 4, 32, 32})) << to_string(kind);
    for (float v : out.data()) ASSERT_TRUE(std::isfinite(v));
  }
  Rng rng(1);
  EXPECT_THROW(make_head<float>(head_config(HeadKind::prompted), enc, rng), std::invalid_argument);
}

TEST(AutoSam, GroupsMatchSeparateSingleGroupForwardsBitwise) {
  const EncoderConfig enc = small_encoder();
  Rng rng(3);
  AutoSamHead<float> head(head_config(HeadKind::autosam), enc, rng);
  ASSERT_EQ(head.groups(), 4u);
  const ImageEmbedding<float> e = random_embedding(enc, 2, 4);
  const TF joint = head.forward(e).logits;
  std::vector<TF> parts;
  for (std::size_t g = 0; g < head.groups(); ++g) parts.push_back(head.single_group_forward(e, g).logits);
  EXPECT_TRUE(bitwise_equal(joint, concat(parts, 1)));
}

TEST(AutoSam, ZeroingOneGroupCopyChangesOnlyItsChannel) {
  const EncoderConfig enc = small_encoder();
  Rng rng(5);
  AutoSamHead<float> head(head_config(HeadKind::autosam), enc, rng);
  const ImageEmbedding<float> e = random_embedding(enc, 1, 6);
  const TF base = head.forward(e).logits;
  const std::size_t hw = 32 * 32;
  for (std::size_t j = 0; j < head.groups(); ++j) {
    std::vector<ImageEmbedding<float>> copies(head.groups(), e);
    copies[j] = {TF(e.grid.shape())};
    const TF out = head.forward_groups(copies).logits;
    for (std::size_t c = 0; c < head.groups(); ++c) {
      const bool same = std::equal(out.data().begin() + c * hw, out.data().begin() + (c + 1) * hw,
                                   base.data().begin() + c * hw);
      EXPECT_EQ(same, c != j) << "group " << j << " channel " << c;
    }
  }
}

TEST(AutoSam, NoPromptTokensInRegistry) {
  Rng rng(7);
  AutoSamHead<float> head(head_config(HeadKind::autosam), small_encoder(), rng);
  for (const auto& [name, p] : head.parameters()) EXPECT_EQ(name.find("prompt"), std::string::npos) << name;
  PromptedDecoder<float> dec(head_config(HeadKind::prompted), small_encoder(), rng);
  bool has_prompt = false;
  for (const auto& [name, p] : dec.parameters()) has_prompt |= name.find("prompt") != std::string::npos;
  EXPECT_TRUE(has_prompt);
}

TEST(AutoSam, LoadsPretrainedDecoderIntoEveryGroup) {
  const EncoderConfig enc = small_encoder();
  Rng rng(8);
  PromptedDecoder<float> dec(head_config(HeadKind::prompted), enc, rng);
  AutoSamHead<float> head(head_config(HeadKind::autosam), enc, rng);
  head.load_decoder_weights(dec);
  const ImageEmbedding<float> e = random_embedding(enc, 1, 9);
  const TF out = head.forward(e).logits;
  const std::size_t hw = 32 * 32;
  // Identical tokens in every group: all channels agree.
  for (std::size_t c = 1; c < head.groups(); ++c)
    EXPECT_TRUE(std::equal(out.data().begin(), out.data().begin() + hw, out.data().begin() + c * hw));
}

TEST(CnnHead, AlwaysUpscalesFourTimes) {
  const EncoderConfig enc = small_encoder();
  for (std::size_t k : {2u, 3u, 5u}) {
    Rng rng(10);
    CnnHead<float> head(head_config(HeadKind::cnn, k), enc, rng);
    EXPECT_EQ(head.features(random_embedding(enc, 1, 11)).shape(), (Shape{1, 4, 16, 16})) << "k=" << k;
  }
  Rng rng(10);
  EXPECT_THROW(CnnHead<float>(head_config(HeadKind::cnn, 1), enc, rng), std::invalid_argument);
}

TEST(Heads, ParameterCountOrdering) {
  const EncoderConfig enc;  // tiny defaults
  auto count = [&](HeadKind kind, std::size_t k = 4) {
    Rng rng(12);
    return parameter_count(make_head<float>(head_config(kind, k), enc, rng)->parameters());
  };
  for (std::size_t k = 2; k < 6; ++k) EXPECT_LT(count(HeadKind::cnn, k), count(HeadKind::cnn, k + 1));
  EXPECT_LT(count(HeadKind::linear), count(HeadKind::cnn, 2));
  Rng rng(12);
  const std::size_t encoder_params = parameter_count(ImageEncoder<float>(enc, rng).parameters());
  EXPECT_LT(2 * count(HeadKind::autosam), encoder_params);
}

TEST(TwoWay, ShapesPreservedAndWidthChecked) {
  Rng rng(13);
  TwoWayTransformer<double> tw(8, 2, 2, rng);
  const TD tokens = random_tensor<double>({3, 8}, 14), grid = random_tensor<double>({16, 8}, 15);
  const TD pe = grid_positional_encoding<double>(4, 8);
  auto [t, g] = tw.forward(tokens, grid, pe);
  EXPECT_EQ(t.shape(), tokens.shape());
  EXPECT_EQ(g.shape(), grid.shape());
  EXPECT_THROW(tw.forward(random_tensor<double>({3, 6}, 1), grid, pe), DimensionError);
}

TEST(TwoWay, GridPermutationEquivariance) {
  Rng rng(16);
  TwoWayTransformer<double> tw(8, 2, 2, rng);
  const TD tokens = random_tensor<double>({3, 8}, 17), grid = random_tensor<double>({16, 8}, 18);
  const TD pe = grid_positional_encoding<double>(4, 8);
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), Rng(19));
  auto [t0, g0] = tw.forward(tokens, grid, pe);
  auto [t1, g1] = tw.forward(tokens, gather_rows(grid, perm), gather_rows(pe, perm));
  for (std::size_t i = 0; i < t0.numel(); ++i) EXPECT_NEAR(t1[i], t0[i], 1e-12);
  const TD g0p = gather_rows(g0, perm);
  for (std::size_t i = 0; i < g0p.numel(); ++i) EXPECT_NEAR(g1[i], g0p[i], 1e-12);
}

TEST(BoxPrompt, DeterministicCornerTypedTokens) {
  Rng rng(20);
  PromptedDecoder<float> dec(head_config(HeadKind::prompted), small_encoder(), rng);
  const Box b{3, 4, 20, 25};
  const TF p1 = dec.encode_box_prompt(b), p2 = dec.encode_box_prompt(b);
  EXPECT_EQ(p1.shape(), (Shape{2, 16}));
  EXPECT_TRUE(bitwise_equal(p1, p2));
  const TF swapped = dec.encode_corners(20, 25, 3, 4);
  EXPECT_FALSE(bitwise_equal(p1, swapped));
  EXPECT_THROW(dec.encode_box_prompt({5, 5, 5, 9}), std::invalid_argument);
  EXPECT_THROW(dec.encode_box_prompt({-1, 0, 4, 4}), std::invalid_argument);
  EXPECT_THROW(dec.encode_box_prompt({0, 0, 4, 33}), std::invalid_argument);
}

TEST(BoxPrompt, PromptedDecoderEmitsOneChannel) {
  const EncoderConfig enc = small_encoder();
  Rng rng(21);
  PromptedDecoder<float> dec(head_config(HeadKind::prompted), enc, rng);
  const std::vector<TF> prompts{dec.encode_box_prompt({1, 1, 9, 9}), dec.encode_box_prompt({10, 2, 30, 12})};
  EXPECT_EQ(dec.forward(random_embedding(enc, 2, 22), prompts).logits.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_THROW(dec.forward(random_embedding(enc, 2, 22), {prompts[0]}), DimensionError);
}

TEST(BoxFromMask, SpecExamples) {
  BinaryMask m(10, 10);
  m.set(5, 7);
  EXPECT_EQ(box_from_mask(m), (PixelBox{7, 5, 7, 5}));
  BinaryMask full(6, 9);
  std::fill(full.bits.begin(), full.bits.end(), 1);
  EXPECT_EQ(box_from_mask(full), (PixelBox{0, 0, 8, 5}));
  EXPECT_THROW(box_from_mask(BinaryMask(4, 4)), NoForegroundError);
  const Box e = to_edges(PixelBox{7, 5, 7, 5});
  EXPECT_EQ(e.x1 - e.x0, 1.0);
}

TEST(BoxFromMask, RandomMasksMatchScan) {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + rng() % 20, w = 1 + rng() % 20;
    BinaryMask m(h, w);
    for (auto& b : m.bits) b = rng() % 7 == 0;
    if (m.empty()) m.set(rng() % h, rng() % w);
    int x0 = 1 << 20, y0 = 1 << 20, x1 = -1, y1 = -1;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (!m.bits[i]) continue;
      x0 = std::min(x0, int(i % w));
      x1 = std::max(x1, int(i % w));
      y0 = std::min(y0, int(i / w));
      y1 = std::max(y1, int(i / w));
    }
    EXPECT_EQ(box_from_mask(m), (PixelBox{x0, y0, x1, y1}));
  }
}

TEST(HeadConfig, Validation) {
  HeadConfig h;
  h.num_classes = 0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
  EXPECT_EQ(parse_head_kind("linear"), HeadKind::linear);
  EXPECT_THROW(parse_head_kind("mlp"), std::invalid_argument);
}

}  // namespace
}  // namespace autosam
