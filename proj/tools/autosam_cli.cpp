// Command-line driver: dataset generation, pretraining, finetuning, evaluation
// and the experiment sweeps. Exit codes: 0 ok, 1 runtime failure, 2 usage
// error, 3 gradcheck violation.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "autosam/experiments.hpp"
#include "autosam/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace autosam;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2, kViolation = 3;

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> head, labeled, freeze, scale, out, name;
  std::optional<std::size_t> depth;
  std::string checkpoint;
};

RunConfig resolve(const Flags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : parse_config(f.config);
  for (const std::string& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), "--set");
  }
  if (f.seed) apply_setting(cfg, "seed", std::to_string(*f.seed), "--seed");
  if (f.head) apply_setting(cfg, "head", *f.head, "--head");
  if (f.labeled) apply_setting(cfg, "labeled", *f.labeled, "--labeled");
  if (f.freeze) apply_setting(cfg, "freeze_encoder", *f.freeze, "--freeze");
  if (f.depth) apply_setting(cfg, "cnn_depth", std::to_string(*f.depth), "--depth");
  if (f.scale) apply_setting(cfg, "scale", *f.scale, "--scale");
  if (f.out) apply_setting(cfg, "out", *f.out, "--out");
  if (f.name) apply_setting(cfg, "name", *f.name, "--name");
  try {
    cfg.finalize();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!cfg.data_dir.empty() && !fs::exists(cfg.data_dir)) throw ConfigError("data_dir '" + cfg.data_dir + "' does not exist");
  if (!cfg.pretrained.empty() && !fs::exists(cfg.pretrained)) {
    throw ConfigError("pretrained checkpoint '" + cfg.pretrained + "' does not exist");
  }
  return cfg;
}

// Result files are deterministic; wall-clock times go to log.txt only.
class RunDir {
 public:
  explicit RunDir(const fs::path& dir) : dir_(dir) {
    fs::create_directories(dir_);
    log_.open(dir_ / "log.txt", std::ios::app);
  }

  const fs::path& path() const { return dir_; }

  void write(const std::string& file, const std::string& text) const { detail::write_file(dir_ / file, text); }

  void log(const std::string& line) {
    const std::time_t now = std::time(nullptr);
    log_ << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ") << " " << line << std::endl;
    std::cout << line << std::endl;
  }

  Logger logger() {
    return [this](const std::string& s) { log(s); };
  }

 private:
  fs::path dir_;
  std::ofstream log_;
};

fs::path run_path(const RunConfig& cfg) { return fs::path(cfg.out) / cfg.name; }

json optional_json(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

json stat_json(const Stat& s) {
  if (!s.defined()) return json(nullptr);
  return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}, {"excluded", s.excluded}};
}

const char* kClassNames[] = {"RV", "Myo", "LV"};

json metrics_json(const RunMetrics& r) {
  json out{{"split_seed", r.split_seed}, {"dice_mean", r.mean_dice()}, {"assd_mean", optional_json(r.mean_assd())}};
  const auto dice = r.class_dice();
  for (std::size_t c = 0; c < dice.size(); ++c) out["dice"][c < 3 ? kClassNames[c] : std::to_string(c + 1)] = dice[c];
  for (const auto& v : r.volumes) {
    json vol{{"patient_id", v.patient_id}, {"dice", v.dice}};
    for (const auto& a : v.assd) vol["assd"].push_back(optional_json(a));
    out["volumes"].push_back(vol);
  }
  return out;
}

json report_json(const MetricsReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    json row{{"method", r.method}, {"n_labeled", r.n_labeled}, {"runs", r.runs}};
    for (std::size_t c = 0; c < r.dice.size(); ++c) row["dice"][c < 3 ? kClassNames[c] : std::to_string(c + 1)] = stat_json(r.dice[c]);
    row["dice_avg"] = stat_json(r.dice_avg);
    row["assd"] = stat_json(r.assd);
    rows.push_back(row);
  }
  return rows;
}

std::string labeled_text(std::size_t n) { return detail::labeled_text(n); }

// ---------------------------------------------------------------- commands

int cmd_gen_data(const RunConfig& cfg) {
  const fs::path dir = fs::path(cfg.out) / "data";
  fs::create_directories(dir / "png");
  const std::vector<Volume> vols = generate_phantom_dataset(cfg.data);
  std::size_t phase_of_patient = 0;
  std::uint32_t last = ~0u;
  for (const Volume& v : vols) {
    phase_of_patient = v.patient_id == last ? phase_of_patient + 1 : 0;
    last = v.patient_id;
    std::ostringstream stem;
    stem << "patient" << std::setw(3) << std::setfill('0') << v.patient_id << "_phase" << phase_of_patient;
    write_svol(v, dir / (stem.str() + ".svol"));
    export_slice_png(normalize_volume(v), v.depth / 2, dir / "png" / stem.str());
  }
  std::cout << "wrote " << vols.size() << " volumes (" << cfg.data.n_patients << " patients) to " << dir.string()
            << "\n";
  return kOk;
}

int cmd_pretrain(const RunConfig& cfg) {
  const fs::path path = cfg.pretrained.empty() ? default_pretrained_path(cfg) : fs::path(cfg.pretrained);
  RunDir run(path.parent_path());
  run.log("pretraining " + to_string(cfg.scale) + " encoder on " + std::to_string(cfg.pretrain.source.n_volumes) +
          " source volumes");
  const PretrainedSam sam = pretrain_source(cfg.pretrain, [&](std::size_t step, double loss, double dice) {
    run.log("step " + std::to_string(step) + " loss " + fmt(loss) + " source val dice " + fmt(dice));
  });
  pretrained_archive(sam, config_snapshot(cfg)).save(path);
  run.write("config.snapshot", config_snapshot(cfg));
  // Reload and re-measure: the checkpoint must reproduce its recorded Dice.
  const PretrainedSam back = load_pretrained(TensorArchive::load(path), cfg.encoder, cfg.pretrain.decoder);
  const PretrainData source = pretrain_data(cfg.pretrain);
  const double replay = prompted_dice(back, source.val, prompted_examples(source.val));
  json report{{"checkpoint", path.string()},
              {"scale", to_string(cfg.scale)},
              {"encoder_params", parameter_count(sam.encoder->parameters())},
              {"steps", sam.steps},
              {"source_val_dice", sam.source_val_dice},
              {"reloaded_source_val_dice", replay}};
  run.write("report.json", report.dump(2) + "\n");
  run.log("source val dice " + fmt(sam.source_val_dice, 6) + " after " + std::to_string(sam.steps) +
          " steps; reloaded " + fmt(replay, 6) + " -> " + path.string());
  return kOk;
}

SegmentationModel<float> model_for(const RunConfig& cfg, const PretrainedSam* sam, std::uint64_t seed) {
  if (cfg.head.kind == HeadKind::prompted) throw ConfigError("train: head must be autosam, cnn or linear");
  return build_model(cfg.head, cfg.encoder, sam, seed);
}

std::string method_label(const RunConfig& cfg) {
  if (cfg.random_encoder) return "Scratch (random encoder + " + to_string(cfg.head.kind) + ")";
  switch (cfg.head.kind) {
    case HeadKind::autosam: return cfg.train.freeze_encoder ? "AutoSAM" : "AutoSAM (ft all)";
    case HeadKind::cnn: return cfg.train.freeze_encoder ? "Encoder + CNN" : "Encoder + CNN (ft all)";
    case HeadKind::linear: return cfg.train.freeze_encoder ? "Encoder + LN" : "Encoder + LN (ft all)";
    case HeadKind::prompted: break;
  }
  return to_string(cfg.head.kind);
}

int cmd_train(const RunConfig& cfg) {
  RunDir run(run_path(cfg));
  const std::uint64_t split_seed = cfg.split_seeds.front();
  std::optional<PretrainedSam> sam;
  if (!cfg.random_encoder) sam = obtain_pretrained(cfg, run.logger());
  const SplitData split = make_split(load_dataset(cfg), split_seed);
  const std::uint64_t seed = run_seed(cfg, split_seed);
  SegmentationModel<float> model = model_for(cfg, sam ? &*sam : nullptr, seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  const std::vector<Volume> labeled = take_labeled(split.train, tc.labeled_volumes);
  run.log(method_label(cfg) + ": " + std::to_string(labeled.size()) + " labeled volumes, split seed " +
          std::to_string(split_seed) + ", " + std::to_string(tc.epochs) + " epochs");
  run.write("config.snapshot", config_snapshot(cfg));
  const TrainResult result = train(model, labeled, split.val, tc, [&](const EpochRecord& r) {
    if (r.epoch % 10 == 0 || r.epoch == tc.epochs)
      run.log("epoch " + std::to_string(r.epoch) + " loss " + fmt(r.train_loss) + " val dice " + fmt(r.val_dice_mean));
  });
  run.write("history.csv", history_csv(result.history));

  TensorArchive best = result.best;
  best.put_text("meta.config", config_snapshot(cfg));
  best.put_scalar("meta.best_val_dice", result.best_val_dice);
  best.put_scalar("meta.best_epoch", double(result.best_epoch));
  best.save(run.path() / "best.tarc");

  const RunMetrics test = evaluate_model(model, split.test, cfg.assd_mode);
  json report{{"method", method_label(cfg)},
              {"head", to_string(cfg.head.kind)},
              {"n_labeled", labeled_text(tc.labeled_volumes)},
              {"labeled_volumes", labeled.size()},
              {"freeze_encoder", tc.freeze_encoder},
              {"encoder_init", cfg.random_encoder ? "random" : "pretrained"},
              {"split_seed", split_seed},
              {"steps", result.steps},
              {"best_epoch", result.best_epoch},
              {"best_val_dice", result.best_val_dice},
              {"encoder_params", parameter_count(model.encoder->parameters())},
              {"head_params", parameter_count(model.head->parameters())},
              {"test", metrics_json(test)}};
  run.write("report.json", report.dump(2) + "\n");
  MetricsReport table;
  table.rows.push_back(aggregate(method_label(cfg), labeled_text(tc.labeled_volumes), {test}));
  std::cout << table.to_text();
  run.log("best val dice " + fmt(result.best_val_dice, 6) + " at epoch " + std::to_string(result.best_epoch) +
          "; test dice " + fmt(test.mean_dice()));
  return kOk;
}

// Scores a saved run on its test split. Model, data and split come from the
// checkpoint's config snapshot; the checkpoint itself is only read.
int cmd_eval(const RunConfig& cli_cfg, const std::string& checkpoint) {
  const fs::path path = checkpoint.empty() ? run_path(cli_cfg) / "best.tarc" : fs::path(checkpoint);
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path.string() + "' does not exist");
  const TensorArchive arc = TensorArchive::load(path);
  RunConfig cfg = parse_config_text(arc.text("meta.config"), path.string() + ":meta.config");
  cfg.finalize();
  Rng rng(0);
  SegmentationModel<float> model(cfg.encoder, cfg.head, rng);
  load_params(arc, model.parameters());
  model.encoder->set_frozen(true);

  const std::uint64_t split_seed = cfg.split_seeds.front();
  const SplitData split = make_split(load_dataset(cfg), split_seed);
  const RunMetrics val = evaluate_model(model, split.val, cfg.assd_mode);
  const RunMetrics test = evaluate_model(model, split.test, cfg.assd_mode);
  const double recorded = arc.scalar("meta.best_val_dice");
  MetricsReport table;
  table.rows.push_back(aggregate(method_label(cfg), labeled_text(cfg.train.labeled_volumes), {test}));
  json report{{"checkpoint", path.string()},
              {"method", method_label(cfg)},
              {"n_labeled", labeled_text(cfg.train.labeled_volumes)},
              {"recorded_val_dice", recorded},
              {"val_dice", val.mean_dice()},
              {"val_dice_abs_diff", std::abs(val.mean_dice() - recorded)},
              {"test", metrics_json(test)},
              {"table", report_json(table)}};
  const fs::path out_dir = checkpoint.empty() ? run_path(cli_cfg) : run_path(cli_cfg) / "eval";
  fs::create_directories(out_dir);
  detail::write_file(out_dir / "eval.json", report.dump(2) + "\n");
  detail::write_file(out_dir / "eval.csv", table.to_csv());
  std::cout << table.to_text();
  std::cout << "val dice " << fmt(val.mean_dice(), 6) << " (recorded " << fmt(recorded, 6) << ")\n";
  return kOk;
}

int cmd_zeroshot(const RunConfig& cfg) {
  RunDir run(run_path(cfg));
  const PretrainedSam sam = obtain_pretrained(cfg, run.logger());
  const std::vector<Volume> dataset = load_dataset(cfg);
  std::vector<RunMetrics> runs;
  for (std::uint64_t seed : cfg.split_seeds) {
    runs.push_back(evaluate_zeroshot(sam, make_split(dataset, seed).test, cfg.overlap, cfg.assd_mode));
    runs.back().split_seed = seed;
    run.log("split " + std::to_string(seed) + " | SAM (box) | test dice " + fmt(runs.back().mean_dice()));
  }
  MetricsReport table;
  table.rows.push_back(aggregate(method_name(Method::zeroshot), "unsup", runs));
  json per_split = json::array();
  for (const auto& r : runs) per_split.push_back(metrics_json(r));
  const double target = table.rows.front().dice_avg.mean;
  json report{{"source_val_dice", sam.source_val_dice},
              {"target_dice", target},
              {"domain_gap", sam.source_val_dice - target},
              {"table", report_json(table)},
              {"splits", per_split}};
  run.write("config.snapshot", config_snapshot(cfg));
  run.write("zeroshot.csv", table.to_csv());
  run.write("report.json", report.dump(2) + "\n");
  std::cout << table.to_text();
  return kOk;
}

int cmd_gradcheck() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<GradcheckResult> results = run_gradcheck_suite();
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "ok   " : "FAIL ") << std::left << std::setw(28) << r.name << " max rel error "
              << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << " ("
              << r.elements << " elements)\n";
    ok &= r.pass;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << results.size() << " checks, " << (ok ? "all within tolerance" : "VIOLATIONS") << ", "
            << fmt(secs, 1) << " s\n";
  return ok ? kOk : kViolation;
}

std::vector<std::size_t> sweep_labeled(const RunConfig& cfg, const Flags& f) {
  return f.labeled ? std::vector<std::size_t>{cfg.train.labeled_volumes} : cfg.table_labeled;
}

// Concatenates per-labeled-count CSVs under one header.
std::string merge_csv(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += i == 0 ? parts[i] : parts[i].substr(parts[i].find('\n') + 1);
  return out;
}

int cmd_ablate_depth(const RunConfig& cfg, const Flags& f) {
  RunDir run(run_path(cfg));
  const PretrainedSam sam = obtain_pretrained(cfg, run.logger());
  const std::vector<Volume> dataset = load_dataset(cfg);
  std::vector<std::string> parts;
  for (std::size_t n : sweep_labeled(cfg, f)) parts.push_back(ablate_depth_csv(cfg, sam, dataset, n, run.logger()));
  run.write("config.snapshot", config_snapshot(cfg));
  run.write("ablate_depth.csv", merge_csv(parts));
  std::cout << merge_csv(parts);
  return kOk;
}

int cmd_ablate_scale(const RunConfig& cfg, const Flags& f) {
  RunDir run(run_path(cfg));
  const std::vector<Volume> dataset = load_dataset(cfg);
  std::vector<std::string> parts;
  for (std::size_t n : sweep_labeled(cfg, f)) parts.push_back(ablate_scale_csv(cfg, dataset, n, run.logger()));
  run.write("config.snapshot", config_snapshot(cfg));
  run.write("ablate_scale.csv", merge_csv(parts));
  std::cout << merge_csv(parts);
  return kOk;
}

int cmd_curve(const RunConfig& cfg) {
  RunDir run(run_path(cfg));
  const PretrainedSam sam = obtain_pretrained(cfg, run.logger());
  const std::string csv = curve_csv(cfg, sam, load_dataset(cfg), run.logger());
  run.write("config.snapshot", config_snapshot(cfg));
  run.write("curve.csv", csv);
  std::cout << csv;
  return kOk;
}

int cmd_compare(const RunConfig& cfg, const Flags& f) {
  RunDir run(run_path(cfg));
  const PretrainedSam sam = obtain_pretrained(cfg, run.logger());
  const std::vector<Method> methods{Method::zeroshot, Method::autosam, Method::autosam_ft_all,
                                    Method::cnn,      Method::linear,  Method::scratch};
  const auto cells = run_comparison(cfg, methods, sweep_labeled(cfg, f), sam, load_dataset(cfg), run.logger());
  const MetricsReport table = comparison_report(cells);
  run.write("config.snapshot", config_snapshot(cfg));
  run.write("table.csv", table.to_csv());
  run.write("table.txt", table.to_text());
  run.write("report.json", report_json(table).dump(2) + "\n");
  std::cout << table.to_text();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-free SAM heads on a synthetic cardiac phantom", "autosam_cli"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", f.sets, "override any config key (key=value, repeatable)");
  app.add_option("--seed", f.seed, "training seed");
  app.add_option("--head", f.head, "prediction head")->check(CLI::IsMember({"autosam", "cnn", "linear"}));
  app.add_option("--labeled", f.labeled, "labeled training volumes (N or all)");
  app.add_option("--freeze", f.freeze, "freeze the encoder")->check(CLI::IsMember({"true", "false"}));
  app.add_option("--depth", f.depth, "CNN head stages k");
  app.add_option("--scale", f.scale, "encoder size")->check(CLI::IsMember({"tiny", "small", "base"}));
  app.add_option("--out", f.out, "output root");
  app.add_option("--name", f.name, "run name (results go to <out>/<name>)");

  app.add_subcommand("gen-data", "write the phantom dataset as SVOL files plus PNG previews");
  app.add_subcommand("pretrain", "pretrain encoder and prompted decoder on the source blobs");
  app.add_subcommand("train", "finetune a head on the labeled training volumes of the first split seed");
  auto* eval = app.add_subcommand("eval", "score a saved checkpoint on its test split");
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint path (default <out>/<name>/best.tarc)");
  app.add_subcommand("zeroshot", "box-prompted baseline without finetuning");
  app.add_subcommand("gradcheck", "finite-difference audit of every differentiable op");
  app.add_subcommand("ablate-depth", "CNN head depth sweep");
  app.add_subcommand("ablate-scale", "encoder size sweep");
  app.add_subcommand("curve", "labeled-volume curve");
  app.add_subcommand("compare", "every method on every split seed (method table)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.exit(e) == 0) return kOk;
    std::cerr << "\n" << app.help();
    return kUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "gradcheck") return cmd_gradcheck();
    const RunConfig cfg = resolve(f);
    if (cmd == "gen-data") return cmd_gen_data(cfg);
    if (cmd == "pretrain") return cmd_pretrain(cfg);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "eval") return cmd_eval(cfg, f.checkpoint);
    if (cmd == "zeroshot") return cmd_zeroshot(cfg);
    if (cmd == "ablate-depth") return cmd_ablate_depth(cfg, f);
    if (cmd == "ablate-scale") return cmd_ablate_scale(cfg, f);
    if (cmd == "curve") return cmd_curve(cfg);
    if (cmd == "compare") return cmd_compare(cfg, f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  std::cerr << app.help();
  return kUsage;
}
