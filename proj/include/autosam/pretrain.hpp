#pragma once

// Supervised pretraining of encoder + prompted decoder on the source blob
// distribution, and the zero-shot box-prompt baseline on target volumes.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "autosam/archive.hpp"
#include "autosam/training.hpp"

namespace autosam {

class PretrainFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainConfig {
  EncoderConfig encoder;
  HeadConfig decoder;  // twoway_layers / attn_heads of the prompted decoder
  SourceConfig source{64, 8, 64, 0};
  std::size_t max_steps = 4000;
  std::size_t eval_every = 250;
  std::size_t batch = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double target_dice = 0.85;
  std::size_t val_volumes = 4;  // held-out source volumes
  std::uint64_t seed = 0;
};

// One prompted example: slice of a volume plus the blob id it asks for.
struct PromptedExample {
  std::size_t volume, slice;
  std::uint8_t target;
};

struct PretrainedSam {
  std::shared_ptr<ImageEncoder<float>> encoder;
  std::shared_ptr<PromptedDecoder<float>> decoder;
  double source_val_dice = 0;
  std::size_t steps = 0;

  NamedParams<float> parameters() const {
    NamedParams<float> out = encoder->parameters();
    for (auto& p : decoder->parameters()) out.push_back(p);
    return out;
  }
};

inline PretrainedSam make_pretrained_shell(const EncoderConfig& enc, const HeadConfig& dec, std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x5a11));
  PretrainedSam s;
  s.encoder = std::make_shared<ImageEncoder<float>>(enc, rng);
  HeadConfig d = dec;
  d.kind = HeadKind::prompted;
  s.decoder = std::make_shared<PromptedDecoder<float>>(d, enc, rng);
  return s;
}

inline std::vector<PromptedExample> prompted_examples(const std::vector<Volume>& vols) {
  std::vector<PromptedExample> out;
  for (std::size_t v = 0; v < vols.size(); ++v) {
    for (std::size_t s = 0; s < vols[v].depth; ++s) {
      for (std::uint8_t id = 1; id <= 3; ++id) {
        const BinaryMask m = BinaryMask::from_labels(vols[v].label_slice(s), vols[v].height, vols[v].width, id);
        if (m.count() >= 4) out.push_back({v, s, id});
      }
    }
  }
  return out;
}

// Foreground logits [N,1,H,W] for the given examples.
inline Tensor<float> prompted_logits(const PretrainedSam& sam, const std::vector<Volume>& vols,
                                     const std::vector<PromptedExample>& ex, const ImageEmbedding<float>& emb) {
  std::vector<Tensor<float>> prompts;
  for (const auto& e : ex) {
    const Volume& v = vols[e.volume];
    const BinaryMask m = BinaryMask::from_labels(v.label_slice(e.slice), v.height, v.width, e.target);
    prompts.push_back(sam.decoder->encode_box_prompt(to_edges(box_from_mask(m))));
  }
  return sam.decoder->forward(emb, prompts).logits;
}

inline Tensor<float> example_images(const std::vector<Volume>& vols, const std::vector<PromptedExample>& ex) {
  std::vector<Tensor<float>> parts;
  for (const auto& e : ex) parts.push_back(volume_batch(vols[e.volume], e.slice, e.slice + 1));
  return concat(parts, 0);
}

inline LabelMap example_labels(const std::vector<Volume>& vols, const std::vector<PromptedExample>& ex) {
  const std::size_t h = vols.front().height, w = vols.front().width;
  LabelMap lm{{ex.size(), h, w}, {}};
  for (const auto& e : ex) {
    const std::uint8_t* l = vols[e.volume].label_slice(e.slice);
    for (std::size_t i = 0; i < h * w; ++i) lm.values.push_back(l[i] == e.target ? 1 : 0);
  }
  return lm;
}

// Binary logits l as the two-channel [0, l], whose softmax is (1-s(l), s(l)).
inline Tensor<float> two_channel(const Tensor<float>& fg) {
  return concat(std::vector<Tensor<float>>{Tensor<float>(fg.shape()), fg}, 1);
}

// Mean per-example Dice of (logit > 0) against the prompted blob.
inline double prompted_dice(const PretrainedSam& sam, const std::vector<Volume>& vols,
                            const std::vector<PromptedExample>& ex) {
  NoGradGuard no_grad;
  double total = 0;
  for (std::size_t b = 0; b < ex.size(); b += 16) {
    const std::vector<PromptedExample> part(ex.begin() + std::ptrdiff_t(b),
                                            ex.begin() + std::ptrdiff_t(std::min(ex.size(), b + 16)));
    const ImageEmbedding<float> emb = sam.encoder->forward(example_images(vols, part));
    const Tensor<float> logits = prompted_logits(sam, vols, part, emb);
    const LabelMap gt = example_labels(vols, part);
    const std::size_t hw = logits.dim(2) * logits.dim(3);
    for (std::size_t i = 0; i < part.size(); ++i) {
      BinaryMask p(logits.dim(2), logits.dim(3)), g(logits.dim(2), logits.dim(3));
      for (std::size_t k = 0; k < hw; ++k) {
        p.bits[k] = logits[i * hw + k] > 0 ? 1 : 0;
        g.bits[k] = gt.values[i * hw + k];
      }
      total += dice_score(p, g);
    }
  }
  return total / double(ex.size());
}

struct PretrainData {
  std::vector<Volume> train, val;
};

inline PretrainData pretrain_data(const PretrainConfig& cfg) {
  SourceConfig sc = cfg.source;
  sc.img = cfg.encoder.img;
  sc.seed = cfg.seed;
  const std::vector<Volume> all = normalize_all(generate_source_dataset(sc));
  if (all.size() <= cfg.val_volumes) throw std::invalid_argument("pretrain: not enough source volumes");
  PretrainData d;
  d.train.assign(all.begin(), all.end() - std::ptrdiff_t(cfg.val_volumes));
  d.val.assign(all.end() - std::ptrdiff_t(cfg.val_volumes), all.end());
  return d;
}

// Trains encoder + prompted decoder with ground-truth box prompts until the
// held-out source Dice reaches cfg.target_dice (checked every eval_every
// steps). Throws PretrainFailure if the step budget runs out first.
inline PretrainedSam pretrain_source(const PretrainConfig& cfg,
                                     const std::function<void(std::size_t, double, double)>& on_eval = {}) {
  const PretrainData data = pretrain_data(cfg);
  const auto train_ex = prompted_examples(data.train);
  const auto val_ex = prompted_examples(data.val);
  if (train_ex.empty() || val_ex.empty()) throw std::runtime_error("pretrain: no usable source examples");

  PretrainedSam sam = make_pretrained_shell(cfg.encoder, cfg.decoder, cfg.seed);
  sam.encoder->set_frozen(false);
  const NamedParams<float> params = sam.parameters();
  AdamState<float> adam;
  Rng rng(mix64(cfg.seed ^ 0x9e7));
  std::uniform_int_distribution<std::size_t> pick(0, train_ex.size() - 1);
  double running = 0;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<PromptedExample> batch;
    for (std::size_t i = 0; i < cfg.batch; ++i) batch.push_back(train_ex[pick(rng)]);
    zero_grads(params);
    const ImageEmbedding<float> emb = sam.encoder->forward(example_images(data.train, batch));
    const Tensor<float> logits = two_channel(prompted_logits(sam, data.train, batch, emb));
    const Tensor<float> loss = combined_loss(logits, example_labels(data.train, batch), 1.f, 1.f, false);
    backward(loss);
    adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, 1e-8);
    running = step == 1 ? loss.item() : 0.95 * running + 0.05 * loss.item();
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double d = prompted_dice(sam, data.val, val_ex);
      if (on_eval) on_eval(step, running, d);
      if (d >= cfg.target_dice) {
        sam.source_val_dice = d;
        sam.steps = step;
        sam.encoder->set_frozen(true);
        return sam;
      }
    }
  }
  throw PretrainFailure("pretrain: source validation Dice stayed below " + std::to_string(cfg.target_dice) +
                        " after " + std::to_string(cfg.max_steps) + " steps");
}

inline TensorArchive pretrained_archive(const PretrainedSam& sam, const std::string& config_text) {
  TensorArchive a;
  store_params(a, sam.parameters());
  a.put_text("meta.config", config_text);
  a.put_scalar("meta.source_val_dice", sam.source_val_dice);
  a.put_scalar("meta.steps", double(sam.steps));
  return a;
}

inline PretrainedSam load_pretrained(const TensorArchive& a, const EncoderConfig& enc, const HeadConfig& dec) {
  PretrainedSam sam = make_pretrained_shell(enc, dec, 0);
  load_params(a, sam.parameters());
  sam.source_val_dice = a.scalar("meta.source_val_dice");
  sam.steps = std::size_t(a.scalar("meta.steps"));
  sam.encoder->set_frozen(true);
  return sam;
}

// How per-class box predictions are merged where they overlap: highest
// positive logit wins, or the later class in label order wins.
enum class OverlapRule { logit_priority, class_order };

// Zero-shot box baseline on one normalized target volume: each class present
// in a slice gets its ground-truth box; pixels with no positive logit stay
// background.
inline std::vector<std::uint8_t> zeroshot_predict(const PretrainedSam& sam, const Volume& v,
                                                  OverlapRule rule = OverlapRule::logit_priority,
                                                  std::size_t num_classes = kNumForeground) {
  NoGradGuard no_grad;
  const std::size_t hw = v.slice_size();
  std::vector<std::uint8_t> pred(v.voxels(), kBackground);
  for (std::size_t s = 0; s < v.depth; ++s) {
    std::vector<Tensor<float>> prompts;
    std::vector<std::uint8_t> classes;
    for (std::size_t c = 1; c <= num_classes; ++c) {
      const BinaryMask m = BinaryMask::from_labels(v.label_slice(s), v.height, v.width, std::uint8_t(c));
      if (m.empty()) continue;
      const Box box = to_edges(box_from_mask(m));
      prompts.push_back(sam.decoder->encode_box_prompt(box));
      classes.push_back(std::uint8_t(c));
    }
    if (prompts.empty()) continue;
    const ImageEmbedding<float> one = sam.encoder->forward(volume_batch(v, s, s + 1));
    ImageEmbedding<float> emb{concat(std::vector<Tensor<float>>(prompts.size(), one.grid), 0)};
    const Tensor<float> logits = sam.decoder->forward(emb, prompts).logits;
    for (std::size_t i = 0; i < hw; ++i) {
      float best = 0;
      for (std::size_t k = 0; k < classes.size(); ++k) {
        const float l = logits[k * hw + i];
        if (l > 0 && (l > best || rule == OverlapRule::class_order)) {
          best = l;
          pred[s * hw + i] = classes[k];
        }
      }
    }
  }
  return pred;
}

inline RunMetrics evaluate_zeroshot(const PretrainedSam& sam, const std::vector<Volume>& vols,
                                    OverlapRule rule = OverlapRule::logit_priority,
                                    AssdMode mode = AssdMode::slice2d) {
  RunMetrics r;
  for (const auto& v : vols) r.volumes.push_back(score_volume(zeroshot_predict(sam, v, rule), v, mode));
  return r;
}

}  // namespace autosam
