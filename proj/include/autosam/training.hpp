#pragma once

// Adam, the frozen-encoder segmentation model and the finetuning loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "autosam/archive.hpp"
#include "autosam/data.hpp"
#include "autosam/encoder.hpp"
#include "autosam/heads.hpp"
#include "autosam/losses.hpp"
#include "autosam/metrics.hpp"

namespace autosam {

struct TrainConfig {
  double lr = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch = 4;
  std::size_t epochs = 120;
  double w_ce = 1.0;
  double w_dice = 1.0;
  bool dice_include_background = true;
  std::uint64_t seed = 0;
  bool freeze_encoder = true;
  std::size_t labeled_volumes = 0;  // 0 = every training volume
  AugmentConfig augment;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("train: betas in [0,1)");
    if (!(eps > 0)) throw std::invalid_argument("train: eps must be positive");
    if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    if (w_ce < 0 || w_dice < 0) throw std::invalid_argument("train: loss weights must be non-negative");
    augment.validate();
  }
};

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  std::uint64_t step = 0;
};

// Bias-corrected Adam over every parameter that requires grad and received
// one. Frozen parameters are never touched.
template <typename T>
void adam_step(const NamedParams<T>& params, AdamState<T>& st, double lr, double beta1, double beta2, double eps) {
  ++st.step;
  const double c1 = 1.0 - std::pow(beta1, double(st.step));
  const double c2 = 1.0 - std::pow(beta2, double(st.step));
  for (auto [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto [mit, fresh] = st.m.try_emplace(name, Tensor<T>(p.shape()));
    auto vit = st.v.try_emplace(name, Tensor<T>(p.shape())).first;
    if (mit->second.shape() != p.shape() || vit->second.shape() != p.shape()) {
      throw DimensionError("adam: state for " + name + " has shape " + to_string(mit->second.shape()) +
                           ", parameter has " + to_string(p.shape()));
    }
    auto w = p.data();
    auto g = p.grad();
    auto m = mit->second.data();
    auto v = vit->second.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = T(beta1 * m[i] + (1 - beta1) * gi);
      v[i] = T(beta2 * v[i] + (1 - beta2) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] = T(w[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

template <typename T>
void adam_step(const NamedParams<T>& params, AdamState<T>& st, const TrainConfig& cfg) {
  adam_step(params, st, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
}

template <typename T>
void store_adam(TensorArchive& a, const AdamState<T>& st) {
  for (const auto& [name, t] : st.m) a.put_tensor("optimizer.m." + name, t);
  for (const auto& [name, t] : st.v) a.put_tensor("optimizer.v." + name, t);
  a.put_scalar("optimizer.step", double(st.step));
}

// Encoder plus a prompt-free head.
template <typename T>
struct SegmentationModel {
  EncoderConfig enc_cfg;
  HeadConfig head_cfg;
  std::shared_ptr<ImageEncoder<T>> encoder;
  std::shared_ptr<PromptFreeHead<T>> head;

  SegmentationModel(const EncoderConfig& e, const HeadConfig& h, Rng& rng)
      : enc_cfg(e), head_cfg(h), encoder(std::make_shared<ImageEncoder<T>>(e, rng)),
        head(make_head<T>(h, e, rng)) {}

  SegmentationModel(const EncoderConfig& e, const HeadConfig& h, std::shared_ptr<ImageEncoder<T>> enc, Rng& rng)
      : enc_cfg(e), head_cfg(h), encoder(std::move(enc)), head(make_head<T>(h, e, rng)) {}

  NamedParams<T> parameters() const {
    NamedParams<T> out = encoder->parameters();
    for (auto& p : head->parameters()) out.push_back(p);
    return out;
  }

  // No graph is recorded through a frozen encoder.
  ImageEmbedding<T> embed(const Tensor<T>& images) const {
    if (encoder->frozen()) {
      NoGradGuard no_grad;
      ImageEmbedding<T> e = encoder->forward(images);
      e.grid = e.grid.detach();
      return e;
    }
    return encoder->forward(images);
  }

  Tensor<T> logits(const Tensor<T>& images) const { return head->forward(embed(images)).logits; }
};

// Per-pixel argmax over channels of [N,C,H,W] -> N*H*W labels.
template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(n * hw);
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (logits[(in * c + k) * hw + i] > logits[(in * c + best) * hw + i]) best = k;
      out[in * hw + i] = std::uint8_t(best);
    }
  }
  return out;
}

// Stacks slices [first, last) of a normalized volume into an RGB batch.
inline Tensor<float> volume_batch(const Volume& v, std::size_t first, std::size_t last) {
  std::vector<Tensor<float>> parts;
  for (std::size_t s = first; s < last; ++s) parts.push_back(reshape(slice_to_rgb(v, s), {1, 3, v.height, v.width}));
  return concat(parts, 0);
}

// Frozen-encoder embeddings of every slice of each volume, computed once.
template <typename T>
std::vector<ImageEmbedding<T>> embed_volumes(const SegmentationModel<T>& model, const std::vector<Volume>& vols) {
  std::vector<ImageEmbedding<T>> out;
  NoGradGuard no_grad;
  for (const auto& v : vols) out.push_back(model.embed(volume_batch(v, 0, v.depth)));
  return out;
}

// Predicted label volume for a normalized volume (or its cached embedding).
template <typename T>
std::vector<std::uint8_t> predict_volume(const SegmentationModel<T>& model, const Volume& v,
                                         const ImageEmbedding<T>* cached = nullptr) {
  NoGradGuard no_grad;
  if (cached) return argmax_labels(model.head->forward(*cached).logits);
  std::vector<std::uint8_t> out;
  for (std::size_t s = 0; s < v.depth; s += 8) {
    const auto part = argmax_labels(model.logits(volume_batch(v, s, std::min(v.depth, s + 8))));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <typename T>
VolumeMetrics evaluate_volume(const SegmentationModel<T>& model, const Volume& v,
                              const ImageEmbedding<T>* cached = nullptr, AssdMode mode = AssdMode::slice2d) {
  return score_volume(predict_volume(model, v, cached), v, mode);
}

template <typename T>
RunMetrics evaluate_model(const SegmentationModel<T>& model, const std::vector<Volume>& vols,
                          AssdMode mode = AssdMode::slice2d) {
  RunMetrics r;
  for (const auto& v : vols) r.volumes.push_back(evaluate_volume(model, v, static_cast<const ImageEmbedding<T>*>(nullptr), mode));
  return r;
}

inline std::vector<Volume> normalize_all(const std::vector<Volume>& vols) {
  std::vector<Volume> out;
  for (const auto& v : vols) out.push_back(normalize_volume(v));
  return out;
}

// First `n` volumes (0 = all). Callers order volumes by split patient order.
inline std::vector<Volume> take_labeled(const std::vector<Volume>& vols, std::size_t n) {
  if (n == 0 || n >= vols.size()) return vols;
  return {vols.begin(), vols.begin() + std::ptrdiff_t(n)};
}

struct SliceRef {
  std::size_t volume, slice;
};

// Augmented mini-batch of slices; sample i of the batch uses its own seed.
inline std::pair<Tensor<float>, LabelMap> make_batch(const std::vector<Volume>& vols, const std::vector<SliceRef>& refs,
                                                     const AugmentConfig& aug, const std::vector<std::uint64_t>& seeds) {
  std::vector<Tensor<float>> images;
  const std::size_t h = vols[refs.front().volume].height, w = vols[refs.front().volume].width;
  LabelMap labels{{refs.size(), h, w}, {}};
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const Volume& v = vols[refs[i].volume];
    Sample s{slice_to_rgb(v, refs[i].slice), {v.label_slice(refs[i].slice), v.label_slice(refs[i].slice) + h * w}};
    s = augment(std::move(s), aug, seeds[i]);
    images.push_back(reshape(s.image, {1, 3, h, w}));
    labels.values.insert(labels.values.end(), s.labels.begin(), s.labels.end());
  }
  return {concat(images, 0), std::move(labels)};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_dice_mean = 0;
  std::vector<double> val_dice;  // per foreground class
};

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,train_loss,val_dice_mean,val_dice_RV,val_dice_Myo,val_dice_LV\n";
  for (const auto& r : history) {
    os << r.epoch << "," << r.train_loss << "," << r.val_dice_mean;
    for (double d : r.val_dice) os << "," << d;
    os << "\n";
  }
  return os.str();
}

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val_dice = -1;
  std::size_t best_epoch = 0;
  TensorArchive best;  // parameters and optimizer state at the best validation epoch
  std::size_t steps = 0;
};

// Mean foreground Dice over volumes and classes.
inline std::pair<double, std::vector<double>> validation_dice(const RunMetrics& r) {
  const auto per_class = r.class_dice();
  return {r.mean_dice(), per_class};
}

// Finetunes `model` on normalized training volumes, selecting the epoch with
// the best mean foreground validation Dice. The model ends holding the best
// parameters.
inline TrainResult train(SegmentationModel<float>& model, const std::vector<Volume>& train_vols,
                         const std::vector<Volume>& val_vols, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  std::vector<SliceRef> refs;
  for (std::size_t v = 0; v < train_vols.size(); ++v)
    for (std::size_t s = 0; s < train_vols[v].depth; ++s) refs.push_back({v, s});
  if (refs.empty()) throw std::invalid_argument("train: empty training set");
  if (val_vols.empty()) throw std::invalid_argument("train: empty validation set");

  model.encoder->set_frozen(cfg.freeze_encoder);
  const NamedParams<float> params = model.parameters();
  AdamState<float> adam;
  std::vector<ImageEmbedding<float>> val_cache;
  if (cfg.freeze_encoder) val_cache = embed_volumes(model, val_vols);

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(refs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(sample_seed(cfg.seed, epoch, ~std::uint64_t{0}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      std::vector<SliceRef> batch_refs;
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch); ++i) {
        batch_refs.push_back(refs[order[i]]);
        seeds.push_back(sample_seed(cfg.seed, epoch, order[i]));
      }
      auto [images, labels] = make_batch(train_vols, batch_refs, cfg.augment, seeds);
      zero_grads(params);
      const Tensor<float> loss = combined_loss(model.logits(images), labels, float(cfg.w_ce), float(cfg.w_dice),
                                               cfg.dice_include_background);
      backward(loss);
      adam_step(params, adam, cfg);
      loss_sum += loss.item();
      ++batches;
      ++result.steps;
    }
    RunMetrics val;
    for (std::size_t v = 0; v < val_vols.size(); ++v)
      val.volumes.push_back(evaluate_volume(model, val_vols[v], val_cache.empty() ? nullptr : &val_cache[v]));
    EpochRecord rec{epoch + 1, loss_sum / double(batches), val.mean_dice(), val.class_dice()};
    if (rec.val_dice_mean > result.best_val_dice) {
      result.best_val_dice = rec.val_dice_mean;
      result.best_epoch = rec.epoch;
      result.best = TensorArchive{};
      store_params(result.best, params);
      store_adam(result.best, adam);
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  load_params(result.best, params);
  return result;
}

// Soft foreground Dice: 1 - soft dice loss without the background channel.
template <typename T>
double soft_foreground_dice(const Tensor<T>& logits, const LabelMap& labels) {
  NoGradGuard no_grad;
  return 1.0 - double(soft_dice_loss(logits, labels, false).item());
}

// Repeated steps on one fixed batch (no augmentation). Returns the loss of
// every step.
template <typename T>
std::vector<double> fit_batch(SegmentationModel<T>& model, const Tensor<T>& images, const LabelMap& labels,
                              std::size_t steps, const TrainConfig& cfg) {
  model.encoder->set_frozen(cfg.freeze_encoder);
  const NamedParams<T> params = model.parameters();
  AdamState<T> adam;
  std::vector<double> losses;
  ImageEmbedding<T> cached;
  if (cfg.freeze_encoder) cached = model.embed(images);
  for (std::size_t i = 0; i < steps; ++i) {
    zero_grads(params);
    const ImageEmbedding<T> e = cfg.freeze_encoder ? cached : model.embed(images);
    const Tensor<T> loss =
        combined_loss(model.head->forward(e).logits, labels, T(cfg.w_ce), T(cfg.w_dice), cfg.dice_include_background);
    backward(loss);
    adam_step(params, adam, cfg);
    losses.push_back(double(loss.item()));
  }
  return losses;
}

}  // namespace autosam
