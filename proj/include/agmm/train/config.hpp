#pragma once

// Training configuration and its flat `key = value` text form.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/loss/objectives.hpp"
#include "agmm/model/seg_model.hpp"
#include "agmm/synth/scene.hpp"
#include "agmm/synth/weak_labels.hpp"

namespace agmm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class OptimizerKind { sgd_momentum, adam };
enum class ContrastVariant { pixel, centers };
enum class PseudoLabelSource { gmm, label_assignment, none };
enum class ContrastPairs { weak, oem };
enum class SelfTarget { normalized, raw };
enum class Precision { f32, f64 };

struct TrainConfig {
  // data
  SceneSpec scene{};
  std::size_t train_scenes = 100;
  std::size_t heldout_scenes = 64;
  std::uint64_t data_seed = 1;
  std::string corpus;  // empty: generate in memory from data_seed
  Modality modality = Modality::point;
  WeakLabelArgs weak{};

  // model
  ModelShape model{};

  // objective
  LossWeights weights{};
  bool stop_grad_G = false;
  ContrastVariant contrast = ContrastVariant::pixel;
  ContrastPairs contrast_pairs = ContrastPairs::weak;
  PseudoLabelSource pseudo_source = PseudoLabelSource::gmm;
  SelfTarget self_target = SelfTarget::normalized;  // G as the L_self target: per-pixel normalised or raw

  // online EM
  bool oem_enabled = true;
  int oem_iters = 1;
  double min_conf = 0.5;
  bool soft_m_step = false;

  // CAM seeds (image-level modality)
  double tau_fg = 0.55;
  double tau_bg = 0.35;
  bool cam_cache_per_epoch = false;

  // optimisation
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double lr = 0.05;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 2.0;  // global gradient-norm cap, 0 = off
  double ema = 0.99;       // decay of the evaluated weight average, 0 = evaluate raw weights
  int steps = 2000;
  int batch = 4;
  int eval_interval = 50;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;

  std::string out_dir = "runs/out";

  void validate() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !(is >> std::ws).eof()) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class E>
struct EnumName {
  E value;
  const char* name;
};

template <class E, std::size_t N>
E parse_enum(const std::string& key, const std::string& v, const EnumName<E> (&table)[N]) {
  for (const auto& e : table)
    if (v == e.name) return e.value;
  std::string allowed;
  for (const auto& e : table) allowed += std::string(allowed.empty() ? "" : ", ") + e.name;
  throw ConfigError("bad value for " + key + ": '" + v + "' (expected one of " + allowed + ")");
}

template <class E, std::size_t N>
std::string enum_name(E v, const EnumName<E> (&table)[N]) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

inline constexpr EnumName<OptimizerKind> kOptimizers[] = {{OptimizerKind::sgd_momentum, "sgd_momentum"},
                                                          {OptimizerKind::adam, "adam"}};
inline constexpr EnumName<ContrastVariant> kContrasts[] = {{ContrastVariant::pixel, "pixel"},
                                                           {ContrastVariant::centers, "centers"}};
inline constexpr EnumName<ContrastPairs> kPairs[] = {{ContrastPairs::weak, "weak"}, {ContrastPairs::oem, "oem"}};
inline constexpr EnumName<SelfTarget> kSelfTargets[] = {{SelfTarget::normalized, "normalized"}, {SelfTarget::raw, "raw"}};
inline constexpr EnumName<PseudoLabelSource> kSources[] = {{PseudoLabelSource::gmm, "gmm"},
                                                           {PseudoLabelSource::label_assignment, "label_assignment"},
                                                           {PseudoLabelSource::none, "none"}};
inline constexpr EnumName<Precision> kPrecisions[] = {{Precision::f32, "f32"}, {Precision::f64, "f64"}};

struct ConfigKey {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define AGMM_NUM_KEY(name, field, type)                                              \
  ConfigKey {                                                                        \
    name, [](const TrainConfig& c) { return to_text(c.field); },                     \
        [](TrainConfig& c, const std::string& v) { c.field = parse_number<type>(name, v); } \
  }
#define AGMM_BOOL_KEY(name, field)                                                   \
  ConfigKey {                                                                        \
    name, [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); }, \
        [](TrainConfig& c, const std::string& v) { c.field = parse_bool(name, v); }  \
  }
#define AGMM_ENUM_KEY(name, field, table)                                            \
  ConfigKey {                                                                        \
    name, [](const TrainConfig& c) { return enum_name(c.field, table); },            \
        [](TrainConfig& c, const std::string& v) { c.field = parse_enum(name, v, table); } \
  }

inline std::string to_text(double v) { return fmt_double(v); }
inline std::string to_text(int v) { return std::to_string(v); }
inline std::string to_text(std::size_t v) { return std::to_string(v); }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      AGMM_NUM_KEY("data.height", scene.height, std::size_t),
      AGMM_NUM_KEY("data.width", scene.width, std::size_t),
      AGMM_NUM_KEY("data.classes", scene.class_count, int),
      AGMM_NUM_KEY("data.shapes", scene.n_shapes, int),
      AGMM_NUM_KEY("data.noise", scene.color_noise_std, double),
      AGMM_NUM_KEY("data.texture", scene.texture_amp, double),
      AGMM_NUM_KEY("data.train_scenes", train_scenes, std::size_t),
      AGMM_NUM_KEY("data.heldout_scenes", heldout_scenes, std::size_t),
      AGMM_NUM_KEY("data.seed", data_seed, std::uint64_t),
      ConfigKey{"data.corpus", [](const TrainConfig& c) { return c.corpus; },
                [](TrainConfig& c, const std::string& v) { c.corpus = v; }},
      ConfigKey{"weak.modality", [](const TrainConfig& c) { return std::string(modality_name(c.modality)); },
                [](TrainConfig& c, const std::string& v) {
                  try {
                    c.modality = parse_modality(v);
                  } catch (const std::invalid_argument& e) {
                    throw ConfigError(std::string("weak.modality: ") + e.what());
                  }
                }},
      AGMM_NUM_KEY("weak.clicks", weak.clicks_per_class, int),
      AGMM_NUM_KEY("weak.stroke_len", weak.stroke_len, int),
      AGMM_NUM_KEY("weak.block_ratio", weak.block_ratio, double),
      AGMM_NUM_KEY("weak.block_size", weak.block_size, int),
      AGMM_BOOL_KEY("weak.center_biased", weak.center_biased_points),
      ConfigKey{"model.widths",
                [](const TrainConfig& c) {
                  std::string s;
                  for (auto w : c.model.backbone_widths) s += (s.empty() ? "" : ",") + std::to_string(w);
                  return s;
                },
                [](TrainConfig& c, const std::string& v) {
                  std::vector<std::size_t> ws;
                  std::stringstream ss(v);
                  std::string tok;
                  while (std::getline(ss, tok, ',')) ws.push_back(parse_number<std::size_t>("model.widths", trim(tok)));
                  if (ws.empty()) throw ConfigError("model.widths must list at least one width");
                  c.model.backbone_widths = ws;
                }},
      AGMM_NUM_KEY("model.gmm_channels", model.gmm_channels, std::size_t),
      AGMM_NUM_KEY("loss.lambda_seg", weights.lambda_seg, double),
      AGMM_NUM_KEY("loss.lambda_g", weights.lambda_G, double),
      AGMM_NUM_KEY("loss.lambda_s", weights.lambda_s, double),
      AGMM_NUM_KEY("loss.lambda_w", weights.lambda_w, double),
      AGMM_NUM_KEY("loss.lambda_c", weights.lambda_c, double),
      AGMM_NUM_KEY("loss.lambda_cls", weights.lambda_cls, double),
      AGMM_BOOL_KEY("loss.stop_grad_g", stop_grad_G),
      AGMM_ENUM_KEY("loss.contrast", contrast, kContrasts),
      AGMM_ENUM_KEY("loss.contrast_pairs", contrast_pairs, kPairs),
      AGMM_ENUM_KEY("loss.pseudo_source", pseudo_source, kSources),
      AGMM_ENUM_KEY("loss.self_target", self_target, kSelfTargets),
      AGMM_BOOL_KEY("oem.enabled", oem_enabled),
      AGMM_NUM_KEY("oem.iters", oem_iters, int),
      AGMM_NUM_KEY("oem.min_conf", min_conf, double),
      AGMM_BOOL_KEY("oem.soft", soft_m_step),
      AGMM_NUM_KEY("cam.tau_fg", tau_fg, double),
      AGMM_NUM_KEY("cam.tau_bg", tau_bg, double),
      AGMM_BOOL_KEY("cam.cache_per_epoch", cam_cache_per_epoch),
      AGMM_ENUM_KEY("optim.kind", optimizer, kOptimizers),
      AGMM_NUM_KEY("optim.lr", lr, double),
      AGMM_NUM_KEY("optim.momentum", momentum, double),
      AGMM_NUM_KEY("optim.beta1", beta1, double),
      AGMM_NUM_KEY("optim.beta2", beta2, double),
      AGMM_NUM_KEY("optim.clip_norm", clip_norm, double),
      AGMM_NUM_KEY("optim.ema", ema, double),
      AGMM_NUM_KEY("train.steps", steps, int),
      AGMM_NUM_KEY("train.batch", batch, int),
      AGMM_NUM_KEY("train.eval_interval", eval_interval, int),
      AGMM_NUM_KEY("train.seed", seed, std::uint64_t),
      AGMM_ENUM_KEY("train.precision", precision, kPrecisions),
      ConfigKey{"out.dir", [](const TrainConfig& c) { return c.out_dir; },
                [](TrainConfig& c, const std::string& v) { c.out_dir = v; }},
  };
  return keys;
}

#undef AGMM_NUM_KEY
#undef AGMM_BOOL_KEY
#undef AGMM_ENUM_KEY

}  // namespace detail

/// Sets one key; unknown keys are rejected by name.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (key == k.key) return k.set(cfg, value);
  throw ConfigError("unknown config key: " + key);
}

inline std::string get_config_value(const TrainConfig& cfg, const std::string& key) {
  for (const auto& k : detail::config_keys())
    if (key == k.key) return k.get(cfg);
  throw ConfigError("unknown config key: " + key);
}

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> out;
  for (const auto& k : detail::config_keys()) out.push_back(k.key);
  return out;
}

/// Applies `key = value` lines on top of `cfg`. Blank lines and `#` comments
/// are skipped; `source` names the input in error messages.
inline void apply_config_text(TrainConfig& cfg, const std::string& text, const std::string& source = "config") {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline TrainConfig parse_config(const std::string& text, const std::string& source = "config") {
  TrainConfig cfg;
  apply_config_text(cfg, text, source);
  cfg.validate();
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path);
}

/// Every key with its resolved value, in table order.
inline std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.key) + " = " + k.get(cfg) + "\n";
  return out;
}

inline void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (steps < 1) fail("train.steps must be >= 1");
  if (batch < 1) fail("train.batch must be >= 1");
  if (eval_interval < 1) fail("train.eval_interval must be >= 1");
  if (!(lr > 0)) fail("optim.lr must be > 0");
  if (momentum < 0 || momentum >= 1) fail("optim.momentum must be in [0,1)");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) fail("optim.beta1/beta2 must be in [0,1)");
  if (!(clip_norm >= 0)) fail("optim.clip_norm must be >= 0");
  if (!(ema >= 0 && ema < 1)) fail("optim.ema must be in [0,1)");
  if (oem_iters < 1) fail("oem.iters must be >= 1");
  if (min_conf < 0 || min_conf >= 1) fail("oem.min_conf must be in [0,1)");
  if (!(0 < tau_bg && tau_bg < tau_fg && tau_fg < 1)) fail("cam thresholds need 0 < tau_bg < tau_fg < 1");
  if (scene.height < 16 || scene.width < 16) fail("data.height/width must be >= 16");
  if (scene.class_count < 2 || scene.class_count > 254) fail("data.classes must be in [2, 254]");
  if (scene.n_shapes < 1 || scene.n_shapes > scene.class_count - 1) fail("data.shapes must be in [1, classes-1]");
  if (train_scenes < 1 || heldout_scenes < 1) fail("data.train_scenes and data.heldout_scenes must be >= 1");
  if (model.gmm_channels < 1 || model.gmm_channels > model.backbone_channels())
    fail("model.gmm_channels must be in [1, last backbone width]");
  if (weak.clicks_per_class < 1) fail("weak.clicks must be >= 1");
  if (weak.stroke_len < 2) fail("weak.stroke_len must be >= 2");
  if (!(weak.block_ratio > 0 && weak.block_ratio <= 1)) fail("weak.block_ratio must be in (0,1]");
  if (weak.block_size < 1) fail("weak.block_size must be >= 1");
  try {
    weights.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

}  // namespace agmm
