#pragma once

// Experiment recipes: the method comparison table, the CNN depth and encoder
// scale ablations, and the labeled-volume curve.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "autosam/archive.hpp"
#include "autosam/config.hpp"
#include "autosam/pretrain.hpp"
#include "autosam/training.hpp"

namespace autosam {

enum class Method { zeroshot, autosam, autosam_ft_all, cnn, linear, scratch };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::zeroshot: return "SAM (box)";
    case Method::autosam: return "AutoSAM";
    case Method::autosam_ft_all: return "AutoSAM (ft all)";
    case Method::cnn: return "Encoder + CNN";
    case Method::linear: return "Encoder + LN";
    case Method::scratch: return "Scratch (Encoder + CNN)";
  }
  return "?";
}

// Normalized volumes of one patient split. Train volumes follow the shuffled
// patient order, so the first n are the few-shot subset.
struct SplitData {
  SplitSpec split;
  std::vector<Volume> train, val, test;
};

inline SplitData make_split(const std::vector<Volume>& dataset, std::uint64_t seed) {
  std::vector<std::uint32_t> ids;
  for (const auto& v : dataset)
    if (std::find(ids.begin(), ids.end(), v.patient_id) == ids.end()) ids.push_back(v.patient_id);
  SplitData d;
  d.split = split_patients(ids, {70, 15, 15}, seed);
  d.train = normalize_all(select_patients(dataset, d.split.train));
  d.val = normalize_all(select_patients(dataset, d.split.val));
  d.test = normalize_all(select_patients(dataset, d.split.test));
  return d;
}

inline std::vector<Volume> load_dataset(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) return generate_phantom_dataset(cfg.data);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(cfg.data_dir))
    if (e.path().extension() == ".svol") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .svol files in " + cfg.data_dir);
  std::vector<Volume> out;
  for (const auto& f : files) out.push_back(read_svol(f));
  return out;
}

inline std::filesystem::path default_pretrained_path(const RunConfig& cfg) {
  return std::filesystem::path(cfg.out) / ("pretrain-" + to_string(cfg.scale)) / "pretrained.tarc";
}

// Loads the pretrained checkpoint for cfg's encoder, pretraining (and saving
// it) first when absent.
inline PretrainedSam obtain_pretrained(RunConfig cfg, const std::function<void(const std::string&)>& log = {}) {
  cfg.finalize();
  const std::filesystem::path path = cfg.pretrained.empty() ? default_pretrained_path(cfg) : std::filesystem::path(cfg.pretrained);
  if (std::filesystem::exists(path)) return load_pretrained(TensorArchive::load(path), cfg.encoder, cfg.pretrain.decoder);
  if (log) log("pretraining " + to_string(cfg.scale) + " encoder -> " + path.string());
  PretrainedSam sam = pretrain_source(cfg.pretrain, [&](std::size_t step, double loss, double dice) {
    if (log) {
      std::ostringstream os;
      os << "  step " << step << " loss " << loss << " source val dice " << dice;
      log(os.str());
    }
  });
  std::filesystem::create_directories(path.parent_path());
  pretrained_archive(sam, config_snapshot(cfg)).save(path);
  return sam;
}

// Copy of the pretrained encoder weights in a fresh encoder.
inline std::shared_ptr<ImageEncoder<float>> clone_encoder(const PretrainedSam& sam, const EncoderConfig& enc) {
  Rng rng(0);
  auto e = std::make_shared<ImageEncoder<float>>(enc, rng);
  TensorArchive a;
  store_params(a, sam.encoder->parameters());
  load_params(a, e->parameters());
  return e;
}

// Encoder plus head for one run: a copy of the pretrained encoder, or a random
// one when `sam` is null. AutoSAM heads start from the pretrained decoder.
inline SegmentationModel<float> build_model(const HeadConfig& hc, const EncoderConfig& enc, const PretrainedSam* sam,
                                            std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0xbead));
  if (!sam) return SegmentationModel<float>(enc, hc, rng);
  SegmentationModel<float> model(enc, hc, clone_encoder(*sam, enc), rng);
  if (hc.kind == HeadKind::autosam) static_cast<AutoSamHead<float>&>(*model.head).load_decoder_weights(*sam->decoder);
  return model;
}

inline HeadKind method_head(Method m) {
  switch (m) {
    case Method::autosam:
    case Method::autosam_ft_all: return HeadKind::autosam;
    case Method::cnn:
    case Method::scratch: return HeadKind::cnn;
    case Method::linear: return HeadKind::linear;
    case Method::zeroshot: break;
  }
  throw std::invalid_argument("zero-shot has no trainable model");
}

// Model for a finetuned method. Scratch gets a random encoder.
inline SegmentationModel<float> build_model(Method m, const PretrainedSam& sam, const RunConfig& cfg,
                                            std::uint64_t seed) {
  HeadConfig hc = cfg.head;
  hc.kind = method_head(m);
  return build_model(hc, cfg.encoder, m == Method::scratch ? nullptr : &sam, seed);
}

// Seed of the training run on one split, shared by `train` and the sweeps.
inline std::uint64_t run_seed(const RunConfig& cfg, std::uint64_t split_seed) {
  return mix64(cfg.train.seed ^ mix64(split_seed + 1));
}

inline TrainConfig method_train_config(Method m, const RunConfig& cfg, std::size_t labeled, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.labeled_volumes = labeled;
  tc.seed = seed;
  tc.freeze_encoder = !(m == Method::autosam_ft_all || m == Method::scratch);
  return tc;
}

struct MethodRun {
  RunMetrics test;
  std::optional<TrainResult> training;
};

// Trains (unless zero-shot) on one split and scores the test volumes.
inline MethodRun run_method(Method m, const PretrainedSam& sam, const SplitData& split, const RunConfig& cfg,
                            std::size_t labeled) {
  MethodRun out;
  if (m == Method::zeroshot) {
    out.test = evaluate_zeroshot(sam, split.test, cfg.overlap, cfg.assd_mode);
  } else {
    const std::uint64_t seed = run_seed(cfg, split.split.seed);
    SegmentationModel<float> model = build_model(m, sam, cfg, seed);
    const TrainConfig tc = method_train_config(m, cfg, labeled, seed);
    out.training = train(model, take_labeled(split.train, labeled), split.val, tc);
    out.test = evaluate_model(model, split.test, cfg.assd_mode);
  }
  out.test.split_seed = split.split.seed;
  return out;
}

struct ComparisonCell {
  Method method;
  std::size_t labeled;
  std::vector<RunMetrics> runs;  // one per split seed
};

using Logger = std::function<void(const std::string&)>;

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

// Every method x labeled count x split seed. Zero-shot runs once per seed.
inline std::vector<ComparisonCell> run_comparison(const RunConfig& cfg, const std::vector<Method>& methods,
                                                  const std::vector<std::size_t>& labeled_counts,
                                                  const PretrainedSam& sam, const std::vector<Volume>& dataset,
                                                  const Logger& log = {}) {
  std::vector<ComparisonCell> cells;
  for (Method m : methods) {
    const std::vector<std::size_t> counts = m == Method::zeroshot ? std::vector<std::size_t>{0} : labeled_counts;
    for (std::size_t n : counts) cells.push_back({m, n, {}});
  }
  for (std::uint64_t seed : cfg.split_seeds) {
    const SplitData split = make_split(dataset, seed);
    for (auto& cell : cells) {
      cell.runs.push_back(run_method(cell.method, sam, split, cfg, cell.labeled).test);
      if (log) {
        log("split " + std::to_string(seed) + " | " + method_name(cell.method) + " | labeled " +
            detail::labeled_text(cell.labeled) + " | test dice " + fmt(cell.runs.back().mean_dice()));
      }
    }
  }
  return cells;
}

inline MetricsReport comparison_report(const std::vector<ComparisonCell>& cells) {
  MetricsReport r;
  for (const auto& c : cells) {
    r.rows.push_back(aggregate(method_name(c.method), c.method == Method::zeroshot ? "unsup" : detail::labeled_text(c.labeled),
                               c.runs));
  }
  return r;
}

// CNN head depth sweep (frozen pretrained encoder).
inline std::string ablate_depth_csv(const RunConfig& cfg, const PretrainedSam& sam, const std::vector<Volume>& dataset,
                                    std::size_t labeled, const Logger& log = {}) {
  std::ostringstream os;
  os << "k,n_labeled,dice_avg,dice_avg_std,assd,assd_std,runs\n";
  for (std::size_t k : cfg.depths) {
    RunConfig c = cfg;
    c.head.cnn_depth = k;
    std::vector<RunMetrics> runs;
    for (std::uint64_t seed : cfg.split_seeds) runs.push_back(run_method(Method::cnn, sam, make_split(dataset, seed), c, labeled).test);
    const ReportRow row = aggregate("cnn k=" + std::to_string(k), detail::labeled_text(labeled), runs);
    if (log) log("k=" + std::to_string(k) + " dice " + row.dice_avg.format(100.0));
    os << k << "," << detail::labeled_text(labeled) << "," << row.dice_avg.mean << "," << row.dice_avg.std << ","
       << (row.assd.defined() ? fmt(row.assd.mean, 6) + "," + fmt(row.assd.std, 6) : std::string("-,-")) << ","
       << row.runs << "\n";
  }
  return os.str();
}

// Encoder scale sweep: AutoSAM and CNN head on each pretrained encoder size.
inline std::string ablate_scale_csv(const RunConfig& cfg, const std::vector<Volume>& dataset, std::size_t labeled,
                                    const Logger& log = {}) {
  std::ostringstream os;
  os << "scale,encoder_params,method,n_labeled,dice_avg,dice_avg_std,assd,assd_std,runs\n";
  for (ScaleTag tag : cfg.scales) {
    RunConfig c = cfg;
    apply_setting(c, "scale", to_string(tag));
    c.pretrained.clear();
    c.finalize();
    const PretrainedSam sam = obtain_pretrained(c, log);
    const std::size_t enc_params = parameter_count(sam.encoder->parameters());
    for (Method m : {Method::autosam, Method::cnn}) {
      std::vector<RunMetrics> runs;
      for (std::uint64_t seed : cfg.split_seeds) runs.push_back(run_method(m, sam, make_split(dataset, seed), c, labeled).test);
      const ReportRow row = aggregate(method_name(m), detail::labeled_text(labeled), runs);
      if (log) log(to_string(tag) + " " + method_name(m) + " dice " + row.dice_avg.format(100.0));
      os << to_string(tag) << "," << enc_params << "," << method_name(m) << "," << detail::labeled_text(labeled) << ","
         << row.dice_avg.mean << "," << row.dice_avg.std << ","
         << (row.assd.defined() ? fmt(row.assd.mean, 6) + "," + fmt(row.assd.std, 6) : std::string("-,-")) << ","
         << row.runs << "\n";
    }
  }
  return os.str();
}

// Labeled-volume curve: one row per (method, n_labeled).
inline std::string curve_csv(const RunConfig& cfg, const PretrainedSam& sam, const std::vector<Volume>& dataset,
                             const Logger& log = {}) {
  const std::vector<Method> methods{Method::autosam, Method::cnn, Method::scratch};
  const auto cells = run_comparison(cfg, methods, cfg.curve_labeled, sam, dataset, log);
  std::ostringstream os;
  os << "method,n_labeled,dice_avg,dice_avg_std,assd,assd_std,runs\n";
  for (const auto& c : cells) {
    const ReportRow row = aggregate(method_name(c.method), detail::labeled_text(c.labeled), c.runs);
    os << row.method << "," << row.n_labeled << "," << row.dice_avg.mean << "," << row.dice_avg.std << ","
       << (row.assd.defined() ? fmt(row.assd.mean, 6) + "," + fmt(row.assd.std, 6) : std::string("-,-")) << ","
       << row.runs << "\n";
  }
  return os.str();
}

}  // namespace autosam
