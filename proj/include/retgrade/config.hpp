#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "retgrade/error.hpp"
#include "retgrade/model.hpp"
#include "retgrade/pipeline.hpp"
#include "retgrade/train.hpp"

namespace retgrade {

// Experiment configuration: `key = value` lines, '#' starts a comment.
// Unknown keys are rejected; values are range-checked when the typed views
// (preprocess(), model(), train()) are built.
class ExperimentConfig {
public:
  static const std::set<std::string> &known_keys() {
    static const std::set<std::string> keys{
        // data
        "train_manifest", "val_manifest", "test_manifest", "out_dir", "val_fraction", "holdout_fraction",
        "val_domain",
        // preprocessing
        "crop_threshold", "bg_sigma_frac", "bg_alpha", "bg_beta", "bg_gamma", "clahe_clip", "clahe_tiles_x",
        "clahe_tiles_y", "reference_image", "reference_domain", "input_mean", "input_std",
        // model
        "branch0_size", "branch0_channels", "branch0_feature_dim", "branch3_size", "branch3_channels",
        "branch3_feature_dim", "fusion_dim", "gate_hidden",
        // training
        "lr", "beta1", "beta2", "eps", "epochs", "batch_size", "seed", "steps_per_epoch", "weight_exponent",
        "aug_hflip", "aug_brightness", "aug_contrast", "aug_gamma_lo", "aug_gamma_hi", "debug_nonfinite_step"};
    return keys;
  }

  ExperimentConfig() = default;

  static ExperimentConfig parse(const std::string &text, const std::string &origin = "config") {
    ExperimentConfig c;
    std::size_t lineno = 0, pos = 0;
    while (pos <= text.size()) {
      const auto nl = text.find('\n', pos);
      std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos)
        line.erase(hash);
      line = trim(line);
      if (line.empty())
        continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError(lineno, origin + ": expected key = value");
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const InvalidInput &e) {
        throw ParseError(lineno, origin + ": " + e.what());
      }
    }
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw IoError("cannot open config " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ExperimentConfig c = parse(text, path.string());
    c.base_dir_ = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return c;
  }

  void set(const std::string &key, const std::string &value) {
    if (!known_keys().count(key))
      throw InvalidInput("unknown config key '" + key + "'");
    kv_[key] = value;
  }

  bool has(const std::string &key) const { return kv_.count(key) != 0; }

  void require(std::initializer_list<const char *> keys) const {
    for (const char *k : keys)
      if (!has(k))
        throw InvalidInput(std::string("missing required config key '") + k + "'");
  }

  std::string str(const std::string &key, const std::string &fallback = {}) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  // Relative paths resolve against the config file's directory.
  std::filesystem::path path(const std::string &key) const {
    const std::filesystem::path p(str(key));
    return p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p;
  }

  std::vector<std::filesystem::path> paths(const std::string &key) const {
    std::vector<std::filesystem::path> out;
    for (const auto &tok : split(str(key), ',')) {
      const std::filesystem::path p(trim(tok));
      out.push_back(p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p);
    }
    return out;
  }

  double real(const std::string &key, double fallback, double lo, double hi) const {
    if (!has(key))
      return fallback;
    const std::string &s = kv_.at(key);
    char *end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0' || !std::isfinite(v))
      throw InvalidInput("config key '" + key + "': not a number: '" + s + "'");
    if (v < lo || v > hi)
      throw InvalidInput("config key '" + key + "' = " + s + " outside [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "]");
    return v;
  }

  long long integer(const std::string &key, long long fallback, long long lo, long long hi) const {
    if (!has(key))
      return fallback;
    const std::string &s = kv_.at(key);
    char *end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
      throw InvalidInput("config key '" + key + "': not an integer: '" + s + "'");
    if (v < lo || v > hi)
      throw InvalidInput("config key '" + key + "' = " + s + " outside [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "]");
    return v;
  }

  bool boolean(const std::string &key, bool fallback) const {
    if (!has(key))
      return fallback;
    const std::string &s = kv_.at(key);
    if (s == "1" || s == "true" || s == "yes" || s == "on")
      return true;
    if (s == "0" || s == "false" || s == "no" || s == "off")
      return false;
    throw InvalidInput("config key '" + key + "': not a boolean: '" + s + "'");
  }

  std::vector<std::size_t> sizes(const std::string &key, std::vector<std::size_t> fallback) const {
    if (!has(key))
      return fallback;
    std::vector<std::size_t> out;
    for (const auto &tok : split(kv_.at(key), ',')) {
      const std::string t = trim(tok);
      char *end = nullptr;
      const long long v = std::strtoll(t.c_str(), &end, 10);
      if (t.empty() || *end != '\0' || v < 1 || v > 4096)
        throw InvalidInput("config key '" + key + "': bad channel list '" + kv_.at(key) + "'");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  std::array<double, 3> triple(const std::string &key, std::array<double, 3> fallback, double lo, double hi) const {
    if (!has(key))
      return fallback;
    const auto toks = split(kv_.at(key), ',');
    if (toks.size() != 3)
      throw InvalidInput("config key '" + key + "': expected three comma-separated values");
    std::array<double, 3> v{};
    for (int i = 0; i < 3; ++i) {
      const std::string t = trim(toks[i]);
      char *end = nullptr;
      v[i] = std::strtod(t.c_str(), &end);
      if (t.empty() || *end != '\0' || v[i] < lo || v[i] > hi)
        throw InvalidInput("config key '" + key + "': bad value '" + t + "'");
    }
    return v;
  }

  PreprocessConfig preprocess() const {
    PreprocessConfig p;
    p.crop_threshold = static_cast<int>(integer("crop_threshold", 20, 0, 255));
    p.ben_graham.sigma_frac = real("bg_sigma_frac", 0.05, 1e-6, 0.5);
    p.ben_graham.alpha = real("bg_alpha", 4.0, -1e3, 1e3);
    p.ben_graham.beta = real("bg_beta", -4.0, -1e3, 1e3);
    p.ben_graham.gamma = real("bg_gamma", 128.0, -1e3, 1e3);
    p.clahe.clip_limit = real("clahe_clip", 2.0, 1.0, 1e6);
    p.clahe.tiles_x = static_cast<int>(integer("clahe_tiles_x", 8, 1, 256));
    p.clahe.tiles_y = static_cast<int>(integer("clahe_tiles_y", 8, 1, 256));
    p.branch0_size = static_cast<int>(integer("branch0_size", 224, 8, 4096));
    p.branch3_size = static_cast<int>(integer("branch3_size", 300, 8, 4096));
    p.norm.mean = triple("input_mean", p.norm.mean, -10.0, 10.0);
    p.norm.std = triple("input_std", p.norm.std, 1e-6, 10.0);
    return p;
  }

  ModelConfig model() const {
    ModelConfig m;
    const auto p = preprocess();
    m.branch0 = {static_cast<std::size_t>(p.branch0_size), sizes("branch0_channels", {16, 32, 64, 128}),
                 static_cast<std::size_t>(integer("branch0_feature_dim", 128, 1, 4096))};
    m.branch3 = {static_cast<std::size_t>(p.branch3_size), sizes("branch3_channels", {24, 48, 96, 160}),
                 static_cast<std::size_t>(integer("branch3_feature_dim", 160, 1, 4096))};
    m.fusion.dim = static_cast<std::size_t>(integer("fusion_dim", 128, 1, 4096));
    m.fusion.gate_hidden = boolean("gate_hidden", false);
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.lr = real("lr", 1e-4, 0.0, 10.0);
    t.beta1 = real("beta1", 0.9, 0.0, 0.999999);
    t.beta2 = real("beta2", 0.999, 0.0, 0.999999);
    t.eps = real("eps", 1e-8, 1e-300, 1.0);
    t.epochs = static_cast<int>(integer("epochs", 10, 1, 100000));
    t.batch_size = static_cast<std::size_t>(integer("batch_size", 16, 1, 65536));
    t.seed = static_cast<std::uint64_t>(integer("seed", 0, 0, INT64_MAX));
    t.steps_per_epoch = static_cast<std::size_t>(integer("steps_per_epoch", 0, 0, 100000000));
    t.weight_exponent = real("weight_exponent", 1.0, 0.0, 10.0);
    t.augment.hflip_prob = real("aug_hflip", 0.5, 0.0, 1.0);
    t.augment.brightness_delta_max = real("aug_brightness", 0.1, 0.0, 1.0);
    t.augment.contrast_delta_max = real("aug_contrast", 0.1, 0.0, 1.0);
    t.augment.gamma_lo = real("aug_gamma_lo", 0.9, 1e-3, 100.0);
    t.augment.gamma_hi = real("aug_gamma_hi", 1.1, 1e-3, 100.0);
    t.debug_nonfinite_step = static_cast<long>(integer("debug_nonfinite_step", -1, -1, INT32_MAX));
    t.validate();
    return t;
  }

private:
  static std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
      return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split(const std::string &s, char sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    for (;;) {
      const auto next = s.find(sep, pos);
      out.push_back(s.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      if (next == std::string::npos)
        return out;
      pos = next + 1;
    }
  }

  std::map<std::string, std::string> kv_;
  std::filesystem::path base_dir_;
};

} // namespace retgrade
