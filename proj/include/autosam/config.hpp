#pragma once

// Flat `key = value` run configuration. `#` starts a comment; keys may not
// repeat; unknown keys are rejected. The same key table serves CLI overrides
// and the config snapshot written next to every run.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "autosam/pretrain.hpp"
#include "autosam/training.hpp"

namespace autosam {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string name = "run";
  std::string out = "runs";
  std::string data_dir;     // SVOL dataset written by gen-data; empty = generate in memory
  std::string pretrained;   // pretrained checkpoint; empty = <out>/pretrain-<scale>/pretrained.tarc
  PhantomConfig data{20, 8, 64, 7};
  ScaleTag scale = ScaleTag::tiny;
  EncoderConfig encoder = EncoderConfig::for_scale(ScaleTag::tiny);
  HeadConfig head;
  TrainConfig train;
  PretrainConfig pretrain;
  std::vector<std::uint64_t> split_seeds{0, 1, 2, 3};
  std::vector<std::size_t> table_labeled{1};
  std::vector<std::size_t> curve_labeled{1, 2, 5, 10, 0};  // 0 = all
  std::vector<std::size_t> depths{2, 3, 4, 5};
  std::vector<ScaleTag> scales{ScaleTag::tiny, ScaleTag::small, ScaleTag::base};
  OverlapRule overlap = OverlapRule::logit_priority;
  bool random_encoder = false;  // `train` from a random encoder instead of the pretrained one
  AssdMode assd_mode = AssdMode::slice2d;

  // Keeps dependent configs in sync (image size, pretrain architecture).
  void finalize() {
    encoder.img = data.img;
    pretrain.encoder = encoder;
    pretrain.decoder = head;
    pretrain.decoder.kind = HeadKind::prompted;
    pretrain.seed = train.seed;
    encoder.validate();
    head.validate();
    train.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (is.fail() || !is.eof()) throw std::invalid_argument("expected a number");
  if constexpr (std::is_unsigned_v<T>) {
    if (v.find('-') != std::string::npos) throw std::invalid_argument("expected a non-negative integer");
  }
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected true or false");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& v, F&& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(one(trim(item)));
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
  return out;
}

inline std::size_t parse_labeled(const std::string& v) { return v == "all" ? 0 : parse_number<std::size_t>(v); }

inline std::string labeled_text(std::size_t n) { return n == 0 ? "all" : std::to_string(n); }

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct KeySpec {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// clang-format off
inline const std::vector<std::pair<std::string, KeySpec>>& key_table() {
  using R = RunConfig;
  using S = const std::string&;
  auto u = [](S v) { return parse_number<std::size_t>(v); };
  auto d = [](S v) { return parse_number<double>(v); };
  auto s = [](std::size_t x) { return std::to_string(x); };
  static const std::vector<std::pair<std::string, KeySpec>> table = {
    {"name", {[](R& c, S v) { c.name = v; }, [](const R& c) { return c.name; }}},
    {"out", {[](R& c, S v) { c.out = v; }, [](const R& c) { return c.out; }}},
    {"data_dir", {[](R& c, S v) { c.data_dir = v; }, [](const R& c) { return c.data_dir; }}},
    {"pretrained", {[](R& c, S v) { c.pretrained = v; }, [](const R& c) { return c.pretrained; }}},
    {"seed", {[](R& c, S v) { c.train.seed = parse_number<std::uint64_t>(v); }, [](const R& c) { return std::to_string(c.train.seed); }}},
    {"patients", {[u](R& c, S v) { c.data.n_patients = u(v); }, [s](const R& c) { return s(c.data.n_patients); }}},
    {"slices", {[u](R& c, S v) { c.data.slices = u(v); }, [s](const R& c) { return s(c.data.slices); }}},
    {"img", {[u](R& c, S v) { c.data.img = u(v); }, [s](const R& c) { return s(c.data.img); }}},
    {"data_seed", {[](R& c, S v) { c.data.seed = parse_number<std::uint64_t>(v); }, [](const R& c) { return std::to_string(c.data.seed); }}},
    {"scale", {[](R& c, S v) {
                 c.scale = parse_scale_tag(v);
                 const EncoderConfig e = EncoderConfig::for_scale(c.scale);
                 c.encoder.dim = e.dim;
                 c.encoder.depth = e.depth;
               }, [](const R& c) { return to_string(c.scale); }}},
    {"patch", {[u](R& c, S v) { c.encoder.patch = u(v); }, [s](const R& c) { return s(c.encoder.patch); }}},
    {"dim", {[u](R& c, S v) { c.encoder.dim = u(v); }, [s](const R& c) { return s(c.encoder.dim); }}},
    {"depth", {[u](R& c, S v) { c.encoder.depth = u(v); }, [s](const R& c) { return s(c.encoder.depth); }}},
    {"heads", {[u](R& c, S v) { c.encoder.heads = u(v); }, [s](const R& c) { return s(c.encoder.heads); }}},
    {"window", {[u](R& c, S v) { c.encoder.window = u(v); }, [s](const R& c) { return s(c.encoder.window); }}},
    {"mlp_ratio", {[u](R& c, S v) { c.encoder.mlp_ratio = u(v); }, [s](const R& c) { return s(c.encoder.mlp_ratio); }}},
    {"head", {[](R& c, S v) { c.head.kind = parse_head_kind(v); }, [](const R& c) { return to_string(c.head.kind); }}},
    {"num_classes", {[u](R& c, S v) { c.head.num_classes = u(v); }, [s](const R& c) { return s(c.head.num_classes); }}},
    {"cnn_depth", {[u](R& c, S v) { c.head.cnn_depth = u(v); }, [s](const R& c) { return s(c.head.cnn_depth); }}},
    {"twoway_layers", {[u](R& c, S v) { c.head.twoway_layers = u(v); }, [s](const R& c) { return s(c.head.twoway_layers); }}},
    {"attn_heads", {[u](R& c, S v) { c.head.attn_heads = u(v); }, [s](const R& c) { return s(c.head.attn_heads); }}},
    {"lr", {[d](R& c, S v) { c.train.lr = d(v); }, [](const R& c) { return num(c.train.lr); }}},
    {"beta1", {[d](R& c, S v) { c.train.beta1 = d(v); }, [](const R& c) { return num(c.train.beta1); }}},
    {"beta2", {[d](R& c, S v) { c.train.beta2 = d(v); }, [](const R& c) { return num(c.train.beta2); }}},
    {"eps", {[d](R& c, S v) { c.train.eps = d(v); }, [](const R& c) { return num(c.train.eps); }}},
    {"batch", {[u](R& c, S v) { c.train.batch = u(v); }, [s](const R& c) { return s(c.train.batch); }}},
    {"epochs", {[u](R& c, S v) { c.train.epochs = u(v); }, [s](const R& c) { return s(c.train.epochs); }}},
    {"w_ce", {[d](R& c, S v) { c.train.w_ce = d(v); }, [](const R& c) { return num(c.train.w_ce); }}},
    {"w_dice", {[d](R& c, S v) { c.train.w_dice = d(v); }, [](const R& c) { return num(c.train.w_dice); }}},
    {"dice_include_background", {[](R& c, S v) { c.train.dice_include_background = parse_bool(v); }, [](const R& c) { return std::string(c.train.dice_include_background ? "true" : "false"); }}},
    {"freeze_encoder", {[](R& c, S v) { c.train.freeze_encoder = parse_bool(v); }, [](const R& c) { return std::string(c.train.freeze_encoder ? "true" : "false"); }}},
    {"labeled", {[](R& c, S v) { c.train.labeled_volumes = parse_labeled(v); }, [](const R& c) { return labeled_text(c.train.labeled_volumes); }}},
    {"p_noise", {[d](R& c, S v) { c.train.augment.p_noise = d(v); }, [](const R& c) { return num(c.train.augment.p_noise); }}},
    {"noise_sigma", {[d](R& c, S v) { c.train.augment.noise_sigma = d(v); }, [](const R& c) { return num(c.train.augment.noise_sigma); }}},
    {"p_brightness", {[d](R& c, S v) { c.train.augment.p_brightness = d(v); }, [](const R& c) { return num(c.train.augment.p_brightness); }}},
    {"brightness_delta", {[d](R& c, S v) { c.train.augment.brightness_delta = d(v); }, [](const R& c) { return num(c.train.augment.brightness_delta); }}},
    {"p_rotation", {[d](R& c, S v) { c.train.augment.p_rotation = d(v); }, [](const R& c) { return num(c.train.augment.p_rotation); }}},
    {"rotation_degrees", {[d](R& c, S v) { c.train.augment.rotation_degrees = d(v); }, [](const R& c) { return num(c.train.augment.rotation_degrees); }}},
    {"p_elastic", {[d](R& c, S v) { c.train.augment.p_elastic = d(v); }, [](const R& c) { return num(c.train.augment.p_elastic); }}},
    {"elastic_alpha", {[d](R& c, S v) { c.train.augment.elastic_alpha = d(v); }, [](const R& c) { return num(c.train.augment.elastic_alpha); }}},
    {"elastic_sigma", {[d](R& c, S v) { c.train.augment.elastic_sigma = d(v); }, [](const R& c) { return num(c.train.augment.elastic_sigma); }}},
    {"pretrain_steps", {[u](R& c, S v) { c.pretrain.max_steps = u(v); }, [s](const R& c) { return s(c.pretrain.max_steps); }}},
    {"pretrain_eval_every", {[u](R& c, S v) { c.pretrain.eval_every = u(v); }, [s](const R& c) { return s(c.pretrain.eval_every); }}},
    {"pretrain_batch", {[u](R& c, S v) { c.pretrain.batch = u(v); }, [s](const R& c) { return s(c.pretrain.batch); }}},
    {"pretrain_lr", {[d](R& c, S v) { c.pretrain.lr = d(v); }, [](const R& c) { return num(c.pretrain.lr); }}},
    {"pretrain_target_dice", {[d](R& c, S v) { c.pretrain.target_dice = d(v); }, [](const R& c) { return num(c.pretrain.target_dice); }}},
    {"source_volumes", {[u](R& c, S v) { c.pretrain.source.n_volumes = u(v); }, [s](const R& c) { return s(c.pretrain.source.n_volumes); }}},
    {"split_seeds", {[](R& c, S v) { c.split_seeds = parse_list<std::uint64_t>(v, [](S x) { return parse_number<std::uint64_t>(x); }); },
                     [](const R& c) { return join<std::uint64_t>(c.split_seeds, [](const std::uint64_t& x) { return std::to_string(x); }); }}},
    {"table_labeled", {[](R& c, S v) { c.table_labeled = parse_list<std::size_t>(v, parse_labeled); },
                       [](const R& c) { return join<std::size_t>(c.table_labeled, labeled_text); }}},
    {"curve_labeled", {[](R& c, S v) { c.curve_labeled = parse_list<std::size_t>(v, parse_labeled); },
                       [](const R& c) { return join<std::size_t>(c.curve_labeled, labeled_text); }}},
    {"depths", {[u](R& c, S v) { c.depths = parse_list<std::size_t>(v, u); },
                [](const R& c) { return join<std::size_t>(c.depths, [](const std::size_t& x) { return std::to_string(x); }); }}},
    {"scales", {[](R& c, S v) { c.scales = parse_list<ScaleTag>(v, parse_scale_tag); },
                [](const R& c) { return join<ScaleTag>(c.scales, [](const ScaleTag& x) { return to_string(x); }); }}},
    {"zeroshot_overlap", {[](R& c, S v) {
                            if (v == "logit") c.overlap = OverlapRule::logit_priority;
                            else if (v == "class_order") c.overlap = OverlapRule::class_order;
                            else throw std::invalid_argument("expected logit or class_order");
                          }, [](const R& c) { return std::string(c.overlap == OverlapRule::logit_priority ? "logit" : "class_order"); }}},
    {"encoder_init", {[](R& c, S v) {
                        if (v == "pretrained") c.random_encoder = false;
                        else if (v == "random") c.random_encoder = true;
                        else throw std::invalid_argument("expected pretrained or random");
                      }, [](const R& c) { return std::string(c.random_encoder ? "random" : "pretrained"); }}},
    {"assd_mode", {[](R& c, S v) {
                     if (v == "2d") c.assd_mode = AssdMode::slice2d;
                     else if (v == "3d") c.assd_mode = AssdMode::volume3d;
                     else throw std::invalid_argument("expected 2d or 3d");
                   }, [](const R& c) { return std::string(c.assd_mode == AssdMode::slice2d ? "2d" : "3d"); }}},
  };
  return table;
}
// clang-format on

inline const KeySpec* find_key(const std::string& key) {
  for (const auto& [k, spec] : key_table())
    if (k == key) return &spec;
  return nullptr;
}

}  // namespace detail

// Sets one key; `where` prefixes error messages (e.g. "cfg.txt:3").
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value,
                          const std::string& where = "override") {
  const detail::KeySpec* spec = detail::find_key(key);
  if (!spec) throw ConfigError(where + ": unknown key '" + key + "'");
  try {
    spec->set(cfg, value);
  } catch (const std::exception& e) {
    throw ConfigError(where + ": bad value for '" + key + "' ('" + value + "'): " + e.what());
  }
}

inline RunConfig parse_config_text(const std::string& text, const std::string& source = "<config>") {
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key");
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(where + ": duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")");
    }
    seen[key] = lineno;
    apply_setting(cfg, key, value, where);
  }
  return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_config_text(ss.str(), path.string());
  if (!cfg.pretrained.empty() && !std::filesystem::exists(cfg.pretrained)) {
    throw ConfigError(path.string() + ": pretrained checkpoint '" + cfg.pretrained + "' does not exist");
  }
  if (!cfg.data_dir.empty() && !std::filesystem::exists(cfg.data_dir)) {
    throw ConfigError(path.string() + ": data_dir '" + cfg.data_dir + "' does not exist");
  }
  return cfg;
}

// Every key with its current value; parses back to an equal config.
inline std::string config_snapshot(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, spec] : detail::key_table()) out += key + " = " + spec.get(cfg) + "\n";
  return out;
}

}  // namespace autosam
