#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/eval.hpp"

namespace crcnet::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { string, integer, real, boolean, choice, real_list, fold };

struct KeySpec {
  std::string name;
  Kind kind;
  std::string default_value;
  std::vector<std::string> choices;  // for Kind::choice
};

inline const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"name", Kind::string, "default", {}},
      {"runs_dir", Kind::string, "runs", {}},
      {"data", Kind::string, "data", {}},
      {"categories", Kind::integer, "12", {}},
      {"per_class", Kind::integer, "40", {}},
      {"size", Kind::integer, "48", {}},
      {"data_seed", Kind::integer, "7", {}},
      {"num_folds", Kind::integer, "4", {}},
      {"fold", Kind::fold, "all", {}},
      {"learning_rate", Kind::real, "0.0025", {}},
      {"momentum", Kind::real, "0.9", {}},
      {"lr_decay_epoch", Kind::integer, "0", {}},
      {"lr_decay_factor", Kind::real, "0.1", {}},
      {"epochs", Kind::integer, "30", {}},
      {"episodes_per_epoch", Kind::integer, "200", {}},
      {"lambda_sub", Kind::real, "0.1", {}},
      {"seed", Kind::integer, "1", {}},
      {"augment_crop", Kind::boolean, "true", {}},
      {"augment_scale", Kind::boolean, "true", {}},
      {"augment_flip", Kind::boolean, "true", {}},
      {"channels", Kind::integer, "32", {}},
      {"stage_depth", Kind::integer, "1", {}},
      {"refine_iterations", Kind::integer, "10", {}},
      {"sample_refine_iterations", Kind::boolean, "true", {}},
      {"detach_refine_cache", Kind::boolean, "true", {}},
      {"activation", Kind::choice, "sigmoid", {"sigmoid", "relu", "softmax"}},
      {"masking", Kind::choice, "multiplicative", {"multiplicative", "strict"}},
      {"use_cross_reference", Kind::boolean, "true", {}},
      {"use_global", Kind::boolean, "true", {}},
      {"use_local", Kind::boolean, "true", {}},
      {"multi_level", Kind::boolean, "true", {}},
      {"k", Kind::integer, "1", {}},
      {"mode", Kind::choice, "single", {"single", "fusion", "finetune", "finetune_fusion"}},
      {"scales", Kind::real_list, "1", {}},
      {"refine_iters", Kind::string, "auto", {}},
      {"annotation", Kind::choice, "mask", {"mask", "bbox"}},
      {"box_mode", Kind::choice, "single", {"single", "per_component"}},
      {"episodes", Kind::integer, "200", {}},
      {"eval_seed", Kind::integer, "1234", {}},
      {"finetune_steps", Kind::integer, "100", {}},
      {"finetune_lr", Kind::real, "0.00025", {}},
      {"finetune_self_pairs", Kind::boolean, "false", {}},
      {"eval_out", Kind::string, "eval.csv", {}},
      {"iteration_curve", Kind::boolean, "false", {}},
      {"axis", Kind::string, "", {}},
  };
  return specs;
}

inline const KeySpec* find_spec(const std::string& key) {
  for (const auto& s : key_specs())
    if (s.name == key) return &s;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(trim(item));
  return parts;
}

template <typename T>
bool parse_number(const std::string& text, T& out) {
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end && !text.empty();
}

/// Effective run configuration: defaults overlaid by a config file, then by
/// command-line overrides. Unknown keys and malformed values are rejected.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& s : key_specs()) values_[s.name] = s.default_value;
  }

  static RunConfig from_text(const std::string& text, const std::string& origin = "<config>") {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
      }
      try {
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
      }
    }
    return cfg;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    const KeySpec* spec = find_spec(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    validate(*spec, value);
    values_[key] = value;
  }

  /// Applies "key=value" overrides.
  void apply(const std::vector<std::string>& assignments) {
    for (const auto& a : assignments) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
      set(trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  std::int64_t integer(const std::string& key) const {
    std::int64_t v = 0;
    parse_number(str(key), v);
    return v;
  }
  std::size_t count(const std::string& key) const {
    const std::int64_t v = integer(key);
    if (v < 0) throw ConfigError("config key '" + key + "' must not be negative");
    return static_cast<std::size_t>(v);
  }
  double real(const std::string& key) const { return std::stod(str(key)); }
  bool flag(const std::string& key) const { return str(key) == "true"; }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& p : split(str(key), ',')) out.push_back(std::stod(p));
    return out;
  }

  /// Fold indices selected by `fold` ("all" or a comma list).
  std::vector<std::size_t> folds() const {
    const std::size_t n = count("num_folds");
    std::vector<std::size_t> out;
    if (str("fold") == "all") {
      for (std::size_t f = 0; f < n; ++f) out.push_back(f);
      return out;
    }
    for (const auto& p : split(str("fold"), ',')) {
      std::size_t f = 0;
      parse_number(p, f);
      if (f >= n) {
        throw ConfigError("fold " + p + " out of range for " + std::to_string(n) + " folds (valid: 0-" +
                          std::to_string(n - 1) + " or all)");
      }
      out.push_back(f);
    }
    return out;
  }

  /// Every key with its effective value, one `key = value` line each, in
  /// declaration order.
  std::string echo() const {
    std::string out;
    for (const auto& s : key_specs()) out += s.name + " = " + values_.at(s.name) + "\n";
    return out;
  }

  std::filesystem::path run_dir() const { return std::filesystem::path(str("runs_dir")) / str("name"); }

  training::TrainConfig train_config() const {
    training::TrainConfig tc;
    tc.learning_rate = real("learning_rate");
    tc.momentum = real("momentum");
    tc.lr_decay_epoch = count("lr_decay_epoch");
    tc.lr_decay_factor = real("lr_decay_factor");
    tc.epochs = count("epochs");
    tc.episodes_per_epoch = count("episodes_per_epoch");
    tc.lambda_sub = real("lambda_sub");
    tc.seed = static_cast<std::uint64_t>(integer("seed"));
    tc.augmentation.crop = flag("augment_crop");
    tc.augmentation.scale = flag("augment_scale");
    tc.augmentation.flip = flag("augment_flip");
    tc.sample_refine_iterations = flag("sample_refine_iterations");
    tc.detach_refine_cache = flag("detach_refine_cache");
    tc.model = model_config();
    return tc;
  }

  model::ModelConfig model_config() const {
    model::ModelConfig m;
    m.channels = count("channels");
    m.refine_iterations = count("refine_iterations");
    m.stage_depth = count("stage_depth");
    const std::string& act = str("activation");
    m.gate = act == "relu" ? model::GateActivation::relu
             : act == "softmax" ? model::GateActivation::softmax
                                : model::GateActivation::sigmoid;
    m.masking = str("masking") == "strict" ? model::MaskingMode::strict : model::MaskingMode::multiplicative;
    m.use_cross_reference = flag("use_cross_reference");
    m.use_global = flag("use_global");
    m.use_local = flag("use_local");
    m.multi_level = flag("multi_level");
    return m;
  }

  eval::EvalSettings eval_settings() const {
    eval::EvalSettings s;
    s.k = count("k");
    s.mode = eval::parse_kshot_mode(str("mode"));
    s.scales = reals("scales");
    if (str("refine_iters") != "auto") s.refine_iterations = static_cast<std::size_t>(std::stoul(str("refine_iters")));
    s.annotation = eval::parse_annotation(str("annotation"));
    s.box_mode = str("box_mode") == "per_component" ? data::BoxMode::per_component : data::BoxMode::single;
    s.episodes = count("episodes");
    s.seed = static_cast<std::uint64_t>(integer("eval_seed"));
    s.finetune.steps = count("finetune_steps");
    s.finetune.learning_rate = real("finetune_lr");
    s.finetune.include_self_pairs = flag("finetune_self_pairs");
    s.finetune.lambda_sub = real("lambda_sub");
    s.finetune.sample_refine_iterations = flag("sample_refine_iterations");
    s.finetune.detach_refine_cache = flag("detach_refine_cache");
    s.record_iterations = flag("iteration_curve");
    return s;
  }

 private:
  static void validate(const KeySpec& spec, const std::string& value) {
    auto fail = [&](const std::string& what) {
      throw ConfigError("bad value '" + value + "' for " + spec.name + ": " + what);
    };
    switch (spec.kind) {
      case Kind::string:
        if (spec.name == "refine_iters" && value != "auto") {
          std::size_t n = 0;
          if (!parse_number(value, n) || n == 0) fail("expected auto or a positive integer");
        }
        break;
      case Kind::integer: {
        std::int64_t v = 0;
        if (!parse_number(value, v) || v < 0) fail("expected a non-negative integer");
        break;
      }
      case Kind::real: {
        double v = 0;
        if (!parse_number(value, v)) fail("expected a number");
        break;
      }
      case Kind::boolean:
        if (value != "true" && value != "false") fail("expected true or false");
        break;
      case Kind::choice:
        if (std::find(spec.choices.begin(), spec.choices.end(), value) == spec.choices.end()) {
          fail("expected one of " + eval::join(spec.choices));
        }
        break;
      case Kind::real_list:
        for (const auto& p : split(value, ',')) {
          double v = 0;
          if (!parse_number(p, v) || !(v > 0)) fail("expected comma-separated positive numbers");
        }
        break;
      case Kind::fold:
        if (value != "all") {
          for (const auto& p : split(value, ',')) {
            std::size_t v = 0;
            if (!parse_number(p, v)) fail("expected all or comma-separated fold indices");
          }
        }
        break;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace crcnet::config
