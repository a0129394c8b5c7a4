#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "promodet/harness/augment.hpp"
#include "promodet/harness/schedule.hpp"
#include "promodet/model.hpp"

namespace promodet::harness {

struct TrainConfig {
  std::string dataset = "synth:200:1";
  std::string eval_dataset;  // empty: evaluate on the training set
  int batch_size = 8;
  LrSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  bool deterministic = true;
  bool augment = true;
  AugmentOptions augment_options;
  int log_every = 10;
  std::string out_dir = "run";
};

struct Config {
  ModelConfig model;
  TrainConfig train;
};

// Flat "dotted.key = value" file, '#' starts a comment.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (kv.values_.count(key)) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + key + ": duplicate key");
      }
      kv.values_[key] = {value, lineno};
    }
    kv.origin_ = origin;
    return kv;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::pair<std::string, int>>& entries() const { return values_; }

  std::string where(const std::string& key) const {
    const auto it = values_.find(key);
    return origin_ + (it == values_.end() ? "" : ":" + std::to_string(it->second.second)) + ": " +
           key;
  }

  void get(const std::string& key, std::string& out) const {
    if (has(key)) out = values_.at(key).first;
  }
  void get(const std::string& key, bool& out) const {
    if (!has(key)) return;
    const std::string& v = values_.at(key).first;
    if (v == "true" || v == "1" || v == "on") {
      out = true;
    } else if (v == "false" || v == "0" || v == "off") {
      out = false;
    } else {
      throw ConfigError(where(key) + ": expected a boolean, got '" + v + "'");
    }
  }
  template <typename Num>
    requires std::is_arithmetic_v<Num>
  void get(const std::string& key, Num& out) const {
    if (!has(key)) return;
    const std::string& v = values_.at(key).first;
    std::istringstream in(v);
    Num n{};
    in >> n;
    if (in.fail() || !(in >> std::ws).eof()) {
      throw ConfigError(where(key) + ": expected a number, got '" + v + "'");
    }
    out = n;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::string origin_;
  std::map<std::string, std::pair<std::string, int>> values_;
};

namespace detail {

// One visitor drives both parsing and printing so the key set cannot drift.
template <typename Visit>
void visit_config(Config& c, Visit&& v) {
  auto& m = c.model;
  auto& t = c.train;
  std::string encoder = m.backbone.encoder_kind == EncoderKind::kTiny ? "tiny" : "vgg16-reduced";
  v("backbone.encoder", encoder);
  if (encoder == "tiny") {
    m.backbone.encoder_kind = EncoderKind::kTiny;
  } else if (encoder == "vgg16-reduced") {
    m.backbone.encoder_kind = EncoderKind::kVgg16Reduced;
  } else {
    throw ConfigError("backbone.encoder: expected tiny or vgg16-reduced, got '" + encoder + "'");
  }
  v("backbone.input_size", m.backbone.input_size);
  v("backbone.encoder_width", m.backbone.encoder_width);
  v("backbone.decoder_width", m.backbone.decoder_width);
  v("model.num_classes", m.num_classes);
  v("model.seed", m.seed);
  v("anchors.scale", m.anchor_scale);
  v("match.pos_iou", m.pos_iou);
  v("match.neg_iou", m.neg_iou);
  v("apm.enabled", m.apm.enabled);
  v("apm.scoring", m.apm.scoring);
  v("apm.adjustment", m.apm.adjustment);
  v("apm.head_depth", m.apm.head_depth);
  v("apm.max_negatives", m.apm.max_negatives);
  v("apm.theta", m.theta);
  for (int l = 0; l < kNumLevels; ++l) {
    std::string mode = to_string(m.fam.modes[l]);
    const std::string key = "fam.level" + std::to_string(l + 1) + ".mode";
    v(key, mode);
    try {
      m.fam.modes[l] = offset_mode_from_string(mode);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  v("fam.detach", m.fam.detach);
  v("loss.ohem", m.ohem);
  v("loss.ohem_ratio", m.ohem_ratio);
  v("head.background_prior", m.background_prior);
  v("infer.conf_threshold", m.inference.conf_threshold);
  v("infer.nms_iou", m.inference.nms_iou);
  v("infer.nms_sigma", m.inference.nms_sigma);
  v("infer.max_detections", m.inference.max_detections);
  v("train.dataset", t.dataset);
  v("train.eval_dataset", t.eval_dataset);
  v("train.batch_size", t.batch_size);
  v("train.epochs", t.schedule.total_epochs);
  v("train.warmup_epochs", t.schedule.warmup_epochs);
  v("train.decay1_epoch", t.schedule.decay1_epoch);
  v("train.decay2_epoch", t.schedule.decay2_epoch);
  v("train.decay_factor", t.schedule.decay_factor);
  v("train.lr_floor", t.schedule.floor_lr);
  v("train.lr_peak", t.schedule.peak_lr);
  v("train.momentum", t.momentum);
  v("train.weight_decay", t.weight_decay);
  v("train.seed", t.seed);
  v("train.deterministic", t.deterministic);
  v("train.augment", t.augment);
  v("augment.flip_prob", t.augment_options.flip_prob);
  v("augment.expand_prob", t.augment_options.expand_prob);
  v("augment.max_expand", t.augment_options.max_expand);
  v("augment.crop", t.augment_options.crop);
  v("train.log_every", t.log_every);
  v("train.out_dir", t.out_dir);
}

template <typename V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
}

}  // namespace detail

inline Config parse_config(const std::string& text, const std::string& origin = "config") {
  const KeyValues kv = KeyValues::parse(text, origin);
  Config c;
  std::map<std::string, bool> known;
  detail::visit_config(c, [&](const std::string& key, auto& field) {
    known[key] = true;
    kv.get(key, field);
  });
  for (const auto& [key, _] : kv.entries()) {
    if (!known.count(key)) throw ConfigError(kv.where(key) + ": unknown key");
  }
  try {
    c.model.validate();
    if (c.train.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
    if (c.train.log_every < 1) throw ConfigError("train.log_every: must be >= 1");
    c.train.schedule.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

inline std::string to_text(Config c) {
  std::ostringstream os;
  detail::visit_config(c, [&](const std::string& key, auto& field) {
    os << key << " = " << detail::format_value(field) << "\n";
  });
  return os.str();
}

}  // namespace promodet::harness
