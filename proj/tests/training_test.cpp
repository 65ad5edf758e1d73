#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "autosam/training.hpp"

namespace autosam {
namespace {

using TD = Tensor<double>;
using TF = Tensor<float>;

TD logits_from(Shape shape, std::uint64_t seed, double bound = 2.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-bound, bound);
  TD t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

LabelMap labels_from(std::size_t n, std::size_t h, std::size_t w, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  LabelMap lm{{n, h, w}, {}};
  for (std::size_t i = 0; i < n * h * w; ++i) lm.values.push_back(std::uint8_t(rng() % classes));
  return lm;
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const TD z({2, 4, 3, 3});
  EXPECT_NEAR(cross_entropy(z, labels_from(2, 3, 3, 4, 1)).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveZero) {
  const LabelMap y = labels_from(1, 4, 4, 3, 2);
  TD z({1, 3, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) z[y.values[i] * 16 + i] = 60.0;
  EXPECT_LT(cross_entropy(z, y).item(), 1e-20);
  EXPECT_THROW(cross_entropy(TD({1, 2, 4, 4}), y), std::out_of_range);
  EXPECT_THROW(cross_entropy(TD({1, 3, 4, 5}), y), DimensionError);
}

TEST(SoftDice, OneHotPredictionIsPerfect) {
  const LabelMap y = labels_from(2, 4, 4, 4, 3);
  TD z({2, 4, 4, 4});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 16; ++i) z[(n * 4 + y.values[n * 16 + i]) * 16 + i] = 40.0;
  EXPECT_LT(soft_dice_loss(z, y).item(), 1e-4);
}

TEST(SoftDice, UniformTwoChannelMatchesDirectSum) {
  // Balanced 4x4 labels, p = 0.5 everywhere.
  LabelMap y{{1, 4, 4}, {}};
  for (std::size_t i = 0; i < 16; ++i) y.values.push_back(i % 2);
  const double s = 1e-5;
  double dice = 0;
  for (std::uint8_t c = 0; c < 2; ++c) {
    double inter = 0, psum = 0, ysum = 0;
    for (auto v : y.values) {
      psum += 0.5;
      ysum += v == c;
      inter += 0.5 * (v == c);
    }
    const double ch = (2 * inter + s) / (psum + ysum + s);
    EXPECT_NEAR(ch, 2 * (0.5 * 8) / (0.5 * 16 + 8), 1e-6);
    dice += ch / 2;
  }
  EXPECT_NEAR(soft_dice_loss(TD({1, 2, 4, 4}), y).item(), 1.0 - dice, 1e-15);
}

TEST(CombinedLoss, WeightsSelectAndAddTerms) {
  const TD z = logits_from({2, 4, 5, 5}, 4);
  const LabelMap y = labels_from(2, 5, 5, 4, 5);
  const double ce = cross_entropy(z, y).item(), dice = soft_dice_loss(z, y).item();
  EXPECT_EQ(combined_loss(z, y, 1.0, 0.0).item(), ce);
  EXPECT_EQ(combined_loss(z, y, 0.0, 1.0).item(), dice);
  EXPECT_NEAR(combined_loss(z, y, 1.0, 1.0).item(), ce + dice, 1e-12);
  EXPECT_GE(combined_loss(z, y, 1.0, 1.0).item(), 0.0);
  EXPECT_THROW(combined_loss(z, y, -1.0, 1.0), std::invalid_argument);
}

TEST(Adam, FirstStepMovesEachWeightByLr) {
  TD w({4}, 1.0);
  w.set_requires_grad(true);
  NamedParams<double> params{{"w", w}};
  backward(sum(mul(w, TD({4}, std::vector<double>{3.0, -0.5, 7.0, -2.0}))));
  AdamState<double> st;
  adam_step(params, st, 0.01, 0.5, 0.999, 1e-8);
  const double expect[] = {1 - 0.01, 1 + 0.01, 1 - 0.01, 1 + 0.01};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], expect[i], 1e-8);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  TD w({3}, std::vector<double>{0.1, 0.2, 0.3});
  w.set_requires_grad(true);
  NamedParams<double> params{{"w", w}};
  backward(sum(scale(w, 0.0)));
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) adam_step(params, st, 0.1, 0.5, 0.999, 1e-8);
  EXPECT_EQ(w[0], 0.1);
  EXPECT_EQ(w[1], 0.2);
  EXPECT_EQ(w[2], 0.3);
}

TEST(Adam, ConvergesOnQuadratic) {
  TD x({5}, 1.0);
  x.set_requires_grad(true);
  NamedParams<double> params{{"x", x}};
  AdamState<double> st;
  for (int i = 0; i < 100; ++i) {
    x.zero_grad();
    backward(sum(mul(x, x)));
    adam_step(params, st, 0.05, 0.5, 0.999, 1e-8);
  }
  for (double v : x.data()) EXPECT_LT(std::abs(v), 1e-2);
}

TEST(Adam, NeverTouchesFrozenParameters) {
  TD a({2}, 1.0), b({2}, 1.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  backward(sum(mul(a, b)));
  b.set_requires_grad(false);
  NamedParams<double> params{{"a", a}, {"b", b}};
  AdamState<double> st;
  adam_step(params, st, 0.1, 0.5, 0.999, 1e-8);
  EXPECT_NE(a[0], 1.0);
  EXPECT_EQ(b[0], 1.0);
  EXPECT_EQ(st.m.count("b"), 0u);
}

EncoderConfig toy_encoder() {
  EncoderConfig c;
  c.img = 32;
  c.patch = 8;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.window = 4;
  c.mlp_ratio = 2;
  return c;
}

HeadConfig toy_head(HeadKind kind) {
  HeadConfig h;
  h.kind = kind;
  h.twoway_layers = 1;
  h.attn_heads = 2;
  h.cnn_depth = 2;
  return h;
}

std::vector<Volume> toy_volumes(std::size_t patients, std::uint64_t seed) {
  return normalize_all(generate_phantom_dataset({patients, 3, 32, seed}));
}

std::vector<std::vector<float>> snapshot(const NamedParams<float>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, p] : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

TEST(Finetune, FrozenEncoderBytesUnchangedHeadChanged) {
  Rng rng(6);
  SegmentationModel<float> model(toy_encoder(), toy_head(HeadKind::autosam), rng);
  const auto vols = toy_volumes(1, 7);
  const TF images = volume_batch(vols[0], 0, 2);
  const LabelMap labels{{2, 32, 32}, {vols[0].labels.begin(), vols[0].labels.begin() + 2 * 1024}};
  const auto enc_before = snapshot(model.encoder->parameters());
  const auto head_before = snapshot(model.head->parameters());
  TrainConfig cfg;
  fit_batch(model, images, labels, 20, cfg);
  EXPECT_EQ(snapshot(model.encoder->parameters()), enc_before);
  EXPECT_NE(snapshot(model.head->parameters()), head_before);
}

TEST(Finetune, UnfrozenEncoderChanges) {
  Rng rng(8);
  SegmentationModel<float> model(toy_encoder(), toy_head(HeadKind::cnn), rng);
  const auto vols = toy_volumes(1, 9);
  const LabelMap labels{{1, 32, 32}, {vols[0].labels.begin(), vols[0].labels.begin() + 1024}};
  const auto before = snapshot(model.encoder->parameters());
  TrainConfig cfg;
  cfg.freeze_encoder = false;
  fit_batch(model, volume_batch(vols[0], 0, 1), labels, 1, cfg);
  EXPECT_NE(snapshot(model.encoder->parameters()), before);
}

TrainConfig toy_train_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 2;
  cfg.seed = seed;
  return cfg;
}

TEST(Train, SameSeedGivesIdenticalHistory) {
  const auto vols = toy_volumes(3, 10);
  const std::vector<Volume> train_vols(vols.begin(), vols.begin() + 4), val_vols(vols.begin() + 4, vols.end());
  auto run = [&](std::uint64_t seed) {
    Rng rng(11);
    SegmentationModel<float> model(toy_encoder(), toy_head(HeadKind::cnn), rng);
    return history_csv(train(model, train_vols, val_vols, toy_train_config(seed)).history);
  };
  const std::string a = run(1);
  EXPECT_EQ(a, run(1));
  EXPECT_NE(a, run(2));
}

TEST(Train, HistoryLengthAndBestCheckpointReplay) {
  const auto vols = toy_volumes(3, 12);
  const std::vector<Volume> train_vols(vols.begin(), vols.begin() + 4), val_vols(vols.begin() + 4, vols.end());
  Rng rng(13);
  SegmentationModel<float> model(toy_encoder(), toy_head(HeadKind::linear), rng);
  const TrainResult r = train(model, train_vols, val_vols, toy_train_config(3));
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.steps, 3u * 6u);
  EXPECT_GE(r.best_epoch, 1u);
  EXPECT_EQ(r.history[r.best_epoch - 1].val_dice_mean, r.best_val_dice);
  for (const auto& e : r.history) EXPECT_LE(e.val_dice_mean, r.best_val_dice);
  EXPECT_NEAR(evaluate_model(model, val_vols).mean_dice(), r.best_val_dice, 1e-6);

  // A fresh model loaded from the archive scores the same.
  Rng other(99);
  SegmentationModel<float> fresh(toy_encoder(), toy_head(HeadKind::linear), other);
  load_params(TensorArchive::decode(r.best.encode()), fresh.parameters());
  EXPECT_NEAR(evaluate_model(fresh, val_vols).mean_dice(), r.best_val_dice, 1e-6);
}

TEST(Train, RejectsEmptyInputs) {
  Rng rng(14);
  SegmentationModel<float> model(toy_encoder(), toy_head(HeadKind::linear), rng);
  const auto vols = toy_volumes(1, 15);
  EXPECT_THROW(train(model, {}, vols, toy_train_config(0)), std::invalid_argument);
  EXPECT_THROW(train(model, vols, {}, toy_train_config(0)), std::invalid_argument);
  TrainConfig bad = toy_train_config(0);
  bad.beta1 = 1.0;
  EXPECT_THROW(train(model, vols, vols, bad), std::invalid_argument);
}

TEST(Evaluate, PredictionMatchesLabelExtents) {
  Rng rng(16);
  SegmentationModel<float> model(toy_encoder(), toy_head(HeadKind::autosam), rng);
  const auto vols = toy_volumes(1, 17);
  EXPECT_EQ(predict_volume(model, vols[0]).size(), vols[0].labels.size());
  model.encoder->set_frozen(true);
  const auto cache = embed_volumes(model, vols);
  EXPECT_EQ(predict_volume(model, vols[0], &cache[0]), predict_volume(model, vols[0]));
}

TEST(Evaluate, ArgmaxPicksLargestChannel) {
  TF z({1, 3, 1, 2}, std::vector<float>{0, 5, 3, 0, 2, 9});
  EXPECT_EQ(argmax_labels(z), (std::vector<std::uint8_t>{1, 2}));
}

TEST(FewShot, TakesLeadingVolumes) {
  const auto vols = toy_volumes(3, 18);
  EXPECT_EQ(take_labeled(vols, 2).size(), 2u);
  EXPECT_EQ(take_labeled(vols, 2)[1], vols[1]);
  EXPECT_EQ(take_labeled(vols, 0).size(), vols.size());
  EXPECT_EQ(take_labeled(vols, 100).size(), vols.size());
}

}  // namespace
}  // namespace autosam
