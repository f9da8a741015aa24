// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ddistill/convnet.hpp"
#include "ddistill/denoiser.hpp"
#include "ddistill/error.hpp"
#include "ddistill/sampler.hpp"
#include "ddistill/schedule.hpp"
#include "ddistill/trainer.hpp"

namespace ddistill {

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return build_schedule(kind, steps, beta_start, beta_end); }
  bool operator==(const ScheduleConfig&) const = default;
};

struct DistillConfig {
  int ipc = 10;
  double seconds = 0.0;  // > 0 selects the wall-clock budget
};

struct EvalConfig {
  int seeds = 3;
  int fid_samples = 500;
  int baseline_epochs = 0;      // 0 → classifier.epochs
  int baseline_batch_size = 0;  // 0 → classifier.batch_size
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline long long parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long r = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return r;
}

inline double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double r = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return r;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true|false, got '" + v + "'");
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Binding between a config key and a struct member.
struct ConfigField {
  std::string key;
  std::string doc;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

using FieldList = std::vector<ConfigField>;

namespace detail {

template <class I>
ConfigField bind_int(std::string key, I& ref, std::string doc) {
  return {key, std::move(doc), [&ref, key](const std::string& v) { ref = static_cast<I>(parse_int(key, v)); },
          [&ref] { return std::to_string(ref); }};
}

inline ConfigField bind_real(std::string key, double& ref, std::string doc) {
  return {key, std::move(doc), [&ref, key](const std::string& v) { ref = parse_real(key, v); },
          [&ref] { return format_real(ref); }};
}

inline ConfigField bind_bool(std::string key, bool& ref, std::string doc) {
  return {key, std::move(doc), [&ref, key](const std::string& v) { ref = parse_bool(key, v); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

template <class E, class Parse, class Print>
ConfigField bind_enum(std::string key, E& ref, std::string doc, Parse parse, Print print) {
  return {key, std::move(doc), [&ref, parse](const std::string& v) { ref = parse(v); },
          [&ref, print] { return print(ref); }};
}

}  // namespace detail

inline FieldList config_fields(DenoiserConfig& c) {
  using namespace detail;
  return {
      bind_int("model.layers", c.layers, "transformer blocks"),
      bind_int("model.hidden", c.hidden, "token width"),
      bind_int("model.mlp", c.mlp, "MLP hidden width"),
      bind_int("model.heads", c.heads, "attention heads"),
      bind_int("model.patch", c.patch, "patch size in pixels"),
      bind_int("model.height", c.height, "image height"),
      bind_int("model.width", c.width, "image width"),
      bind_int("model.channels", c.channels, "image channels"),
      bind_int("model.num_classes", c.num_classes, "number of classes"),
      bind_int("model.max_steps", c.max_steps, "largest timestep the time embedding accepts"),
      bind_enum("model.skip", c.skip, "long-skip merge: add|concat", parse_skip_mode,
                [](SkipMode m) { return to_string(m); }),
  };
}

inline FieldList config_fields(ScheduleConfig& c) {
  using namespace detail;
  return {
      bind_enum("schedule.kind", c.kind, "linear|cosine", parse_schedule_kind,
                [](ScheduleKind k) { return to_string(k); }),
      bind_int("schedule.steps", c.steps, "diffusion steps T"),
      bind_real("schedule.beta_start", c.beta_start, "first beta (linear)"),
      bind_real("schedule.beta_end", c.beta_end, "last beta (linear)"),
  };
}

inline FieldList config_fields(TrainConfig& c) {
  using namespace detail;
  return {
      bind_real("train.lr", c.lr, "AdamW learning rate"),
      bind_real("train.weight_decay", c.weight_decay, "decoupled weight decay"),
      bind_real("train.beta1", c.beta1, "AdamW beta1"),
      bind_real("train.beta2", c.beta2, "AdamW beta2"),
      bind_real("train.adam_eps", c.adam_eps, "AdamW epsilon"),
      bind_int("train.batch_size", c.batch_size, "images per micro-batch"),
      bind_int("train.grad_accum", c.grad_accum, "micro-batches per update"),
      bind_int("train.iterations", c.iterations, "total optimizer updates"),
      bind_int("train.fid_every", c.fid_every, "FID evaluation period"),
      bind_int("train.checkpoint_every", c.checkpoint_every, "checkpoint period (0 = final only)"),
      bind_int("train.log_every", c.log_every, "loss logging period"),
      bind_int("train.seed", c.seed, "root seed"),
      bind_bool("train.ema", c.ema, "keep an exponential moving average of weights"),
      bind_real("train.ema_decay", c.ema_decay, "EMA decay"),
      bind_real("train.label_dropout", c.label_dropout, "probability of dropping the label"),
  };
}

inline FieldList config_fields(SamplerConfig& c) {
  using namespace detail;
  return {
      bind_enum("sample.method", c.method, "ancestral|fast-ode", parse_sample_method,
                [](SampleMethod m) { return to_string(m); }),
      bind_int("sample.steps", c.steps, "solver steps (fast-ode)"),
      bind_int("sample.order", c.order, "solver order 1|2"),
      bind_enum("sample.variance", c.variance, "ancestral variance: beta|beta-tilde|zero", parse_variance_mode,
                [](VarianceMode v) { return to_string(v); }),
      bind_real("sample.guidance", c.guidance, "classifier-free guidance weight"),
      bind_int("sample.seed", c.seed, "root seed"),
      bind_bool("sample.clip", c.clip, "clip predicted x0 to [-1,1]"),
      bind_int("sample.batch", c.batch, "images per network call"),
      bind_int("sample.workers", c.workers, "generation threads"),
  };
}

inline FieldList config_fields(DistillConfig& c) {
  using namespace detail;
  return {
      bind_int("distill.ipc", c.ipc, "images per class"),
      bind_real("distill.seconds", c.seconds, "wall-clock budget; > 0 overrides ipc"),
  };
}

inline FieldList config_fields(ConvNetConfig& c) {
  using namespace detail;
  return {
      bind_int("classifier.blocks", c.blocks, "conv blocks"),
      bind_int("classifier.width", c.width, "channels per block"),
      bind_int("classifier.kernel", c.kernel, "kernel size"),
      bind_int("classifier.groups", c.groups, "norm groups (0 = instance)"),
      bind_int("classifier.channels", c.channels, "input channels"),
      bind_int("classifier.height", c.height, "input height"),
      bind_int("classifier.width_px", c.width_px, "input width"),
      bind_int("classifier.num_classes", c.num_classes, "number of classes"),
      bind_int("classifier.epochs", c.epochs, "training epochs"),
      bind_int("classifier.batch_size", c.batch_size, "SGD batch size"),
      bind_real("classifier.lr", c.lr, "peak learning rate"),
      bind_real("classifier.momentum", c.momentum, "SGD momentum"),
      bind_real("classifier.weight_decay", c.weight_decay, "L2 coefficient"),
      bind_bool("classifier.augment", c.augment, "random crop and flip"),
  };
}

inline FieldList config_fields(EvalConfig& c) {
  using namespace detail;
  return {
      bind_int("eval.seeds", c.seeds, "classifier seeds per evaluation"),
      bind_int("eval.fid_samples", c.fid_samples, "generated images per FID evaluation"),
      bind_int("eval.baseline_epochs", c.baseline_epochs, "epochs for the real-data baseline (0 = classifier.epochs)"),
      bind_int("eval.baseline_batch_size", c.baseline_batch_size, "batch size for the baseline (0 = classifier.batch_size)"),
  };
}

/// Every documented key with its description, in documentation order.
inline std::vector<std::pair<std::string, std::string>> known_config_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  DenoiserConfig m;
  ScheduleConfig s;
  TrainConfig t;
  SamplerConfig p;
  DistillConfig d;
  ConvNetConfig c;
  EvalConfig e;
  const FieldList lists[] = {config_fields(m), config_fields(s), config_fields(t), config_fields(p),
                             config_fields(d), config_fields(c), config_fields(e)};
  for (const auto& l : lists)
    for (const auto& f : l) out.emplace_back(f.key, f.doc);
  out.emplace_back("model.preset", "small|mid|tiny; applied before other model keys");
  return out;
}

/// Flat `section.key = value` settings. Blank lines and `#` comments are
/// ignored; unknown keys are rejected.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& source = "<config>") {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = source + ":" + std::to_string(lineno) + ": ";
      if (eq == std::string::npos) throw ConfigError(where + "expected 'section.key = value'");
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (key.find('.') == std::string::npos) throw ConfigError(where + "key '" + key + "' lacks a section");
      try {
        cfg.set(key, value);
      } catch (const ConfigError& e) {
        throw ConfigError(where + e.what());
      }
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    if (!is_known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const { return values_.at(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Copies every present key into the bound fields.
  void apply(const FieldList& fields) const {
    for (const auto& f : fields) {
      auto it = values_.find(f.key);
      if (it != values_.end()) f.set(it->second);
    }
  }

  static bool is_known(const std::string& key) {
    static const auto keys = [] {
      std::map<std::string, bool> m;
      for (const auto& [k, d] : known_config_keys()) m[k] = true;
      return m;
    }();
    return keys.count(key) != 0;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline std::string to_config_text(const FieldList& fields) {
  std::string out;
  for (const auto& f : fields) out += f.key + " = " + f.get() + "\n";
  return out;
}

template <class Cfg>
std::string to_config_text(Cfg c) {
  return to_config_text(config_fields(c));
}

template <class Cfg>
Cfg from_config_text(const std::string& text, Cfg base = {}) {
  ConfigFile::parse(text).apply(config_fields(base));
  return base;
}

/// Denoiser settings from a file: preset geometry first, then explicit keys.
inline DenoiserConfig denoiser_config(const ConfigFile& f, int image_size, int channels, int num_classes,
                                      const std::string& default_preset = "small") {
  const std::string preset = f.has("model.preset") ? f.get("model.preset") : default_preset;
  DenoiserConfig c = DenoiserConfig::preset(preset, image_size, channels, num_classes);
  f.apply(config_fields(c));
  c.validate();
  return c;
}

/// Path from DD_CONFIG when no explicit path is given.
inline std::string config_path(const std::string& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  const char* env = std::getenv("DD_CONFIG");
  return env ? std::string(env) : std::string();
}

}  // namespace ddistill
