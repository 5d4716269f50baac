#pragma once

// Flat "dotted.key = value" experiment configuration. Every key has a
// default; unknown keys and unparsable values raise ConfigError naming the
// key. '#' starts a comment.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/heads.hpp"
#include "bmlab/minifpn.hpp"
#include "bmlab/rng.hpp"
#include "bmlab/synthdata.hpp"
#include "bmlab/train.hpp"

namespace bmlab {

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "runs/default";

  DatasetSpec train_data;  // count/seed/... shared with val except count and seed
  std::size_t val_count = 100;
  std::string train_path;  // when set, load instead of generating
  std::string val_path;

  BackboneConfig backbone;
  HeadConfig head;
  TrainConfig train;

  std::string checkpoint;  // eval/visualize input; empty means <out>/checkpoint.bin
  std::string ablate_matrix = "fusion";
  std::size_t ablate_seeds = 1;
  std::size_t viz_count = 4;

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(out) / "checkpoint.bin" : std::filesystem::path(checkpoint);
  }

  DatasetSpec val_data() const {
    DatasetSpec v = train_data;
    v.count = val_count;
    v.seed = train_data.seed + 1000003;  // disjoint scene stream
    return v;
  }

  std::uint64_t init_seed() const { return mix64(seed ^ 0x1ULL); }
  std::uint64_t sampling_seed() const { return mix64(seed ^ 0x2ULL); }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = sampling_seed();
    return t;
  }

  void validate() const {
    train_data.validate();
    backbone.validate();
    head.validate();
    train.validate();
    if (backbone.channels != head.channels) {
      throw ConfigError("head.channels (" + std::to_string(head.channels) + ") must equal backbone.channels (" +
                        std::to_string(backbone.channels) + ")");
    }
    if (head.num_classes < kNumShapeClasses) {
      throw ConfigError("head.num_classes must be at least " + std::to_string(kNumShapeClasses));
    }
    if (ablate_seeds == 0) throw ConfigError("ablate.seeds must be positive");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError("config key '" + key + "': invalid value '" + value + "' (" + why + ")");
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "expected unsigned integer");
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) bad_value(key, v, "expected number");
  return d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad_value(key, v, "expected true/false");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct KeySpec {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = [] {
    std::vector<KeySpec> k;
    auto sz = [&k](std::string key, auto member) {
      k.push_back({key, [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_size(key, v); },
                   [member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); }});
    };
    auto dbl = [&k](std::string key, auto member) {
      k.push_back({key, [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_double(key, v); },
                   [member](const ExperimentConfig& c) { return fmt_double(member(const_cast<ExperimentConfig&>(c))); }});
    };
    auto bln = [&k](std::string key, auto member) {
      k.push_back({key, [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
                   [member](const ExperimentConfig& c) {
                     return std::string(member(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
                   }});
    };
    auto str = [&k](std::string key, auto member) {
      k.push_back({key, [member](ExperimentConfig& c, const std::string& v) { member(c) = v; },
                   [member](const ExperimentConfig& c) { return member(const_cast<ExperimentConfig&>(c)); }});
    };

    k.push_back({"seed", [](ExperimentConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); }});
    str("out", [](ExperimentConfig& c) -> std::string& { return c.out; });

    sz("data.train_count", [](ExperimentConfig& c) -> std::size_t& { return c.train_data.count; });
    sz("data.val_count", [](ExperimentConfig& c) -> std::size_t& { return c.val_count; });
    sz("data.height", [](ExperimentConfig& c) -> std::size_t& { return c.train_data.height; });
    sz("data.width", [](ExperimentConfig& c) -> std::size_t& { return c.train_data.width; });
    k.push_back({"data.seed",
                 [](ExperimentConfig& c, const std::string& v) { c.train_data.seed = parse_u64("data.seed", v); },
                 [](const ExperimentConfig& c) { return std::to_string(c.train_data.seed); }});
    dbl("data.max_iou", [](ExperimentConfig& c) -> double& { return c.train_data.max_iou; });
    dbl("data.noise", [](ExperimentConfig& c) -> double& { return c.train_data.noise; });
    str("data.train_path", [](ExperimentConfig& c) -> std::string& { return c.train_path; });
    str("data.val_path", [](ExperimentConfig& c) -> std::string& { return c.val_path; });

    k.push_back({"backbone.stage_channels",
                 [](ExperimentConfig& c, const std::string& v) {
                   std::array<std::size_t, 4> out{};
                   std::stringstream ss(v);
                   std::string item;
                   std::size_t i = 0;
                   while (std::getline(ss, item, ',')) {
                     if (i >= 4) bad_value("backbone.stage_channels", v, "expected 4 comma-separated integers");
                     out[i++] = parse_size("backbone.stage_channels", trim(item));
                   }
                   if (i != 4) bad_value("backbone.stage_channels", v, "expected 4 comma-separated integers");
                   c.backbone.stage_channels = out;
                 },
                 [](const ExperimentConfig& c) {
                   const auto& s = c.backbone.stage_channels;
                   return std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) + "," +
                          std::to_string(s[3]);
                 }});
    sz("backbone.channels", [](ExperimentConfig& c) -> std::size_t& { return c.backbone.channels; });

    k.push_back({"head.variant",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "plain") c.head.variant = HeadVariant::Plain;
                   else if (v == "bmask") c.head.variant = HeadVariant::BMask;
                   else if (v == "lmh") c.head.variant = HeadVariant::Lmh;
                   else if (v == "sobel") c.head.variant = HeadVariant::Sobel;
                   else bad_value("head.variant", v, "expected plain|bmask|lmh|sobel");
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.head.variant)); }});
    sz("head.channels", [](ExperimentConfig& c) -> std::size_t& { return c.head.channels; });
    sz("head.num_classes", [](ExperimentConfig& c) -> std::size_t& { return c.head.num_classes; });
    bln("head.m2b_fusion", [](ExperimentConfig& c) -> bool& { return c.head.m2b_fusion; });
    bln("head.b2m_fusion", [](ExperimentConfig& c) -> bool& { return c.head.b2m_fusion; });
    k.push_back({"head.boundary_source",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "p2") c.head.boundary_source = BoundarySource::P2;
                   else if (v == "same") c.head.boundary_source = BoundarySource::SameAsMask;
                   else bad_value("head.boundary_source", v, "expected p2|same");
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.head.boundary_source)); }});
    sz("head.boundary_roi_size", [](ExperimentConfig& c) -> std::size_t& { return c.head.boundary_roi_size; });
    sz("head.mask_convs", [](ExperimentConfig& c) -> std::size_t& { return c.head.mask_convs; });
    sz("head.sampling", [](ExperimentConfig& c) -> std::size_t& { return c.head.sampling; });
    k.push_back({"head.loss.kind",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "bce") c.head.loss.kind = BoundaryLossKind::Bce;
                   else if (v == "weighted_bce") c.head.loss.kind = BoundaryLossKind::WeightedBce;
                   else if (v == "dice") c.head.loss.kind = BoundaryLossKind::Dice;
                   else if (v == "dice_bce") c.head.loss.kind = BoundaryLossKind::DiceBce;
                   else bad_value("head.loss.kind", v, "expected bce|weighted_bce|dice|dice_bce");
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.head.loss.kind)); }});
    dbl("head.loss.lambda", [](ExperimentConfig& c) -> double& { return c.head.loss.lambda; });
    dbl("head.loss.epsilon", [](ExperimentConfig& c) -> double& { return c.head.loss.epsilon; });
    k.push_back({"head.loss.target",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "boundary") c.head.loss.target = BoundaryTarget::Boundary;
                   else if (v == "mask") c.head.loss.target = BoundaryTarget::Mask;
                   else if (v == "none") c.head.loss.target = BoundaryTarget::None;
                   else bad_value("head.loss.target", v, "expected boundary|mask|none");
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.head.loss.target)); }});

    sz("train.iterations", [](ExperimentConfig& c) -> std::size_t& { return c.train.iterations; });
    sz("train.batch_size", [](ExperimentConfig& c) -> std::size_t& { return c.train.batch_size; });
    k.push_back({"train.base_lr",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "auto") {
                     c.train.base_lr = -1.0;
                     return;
                   }
                   const double d = parse_double("train.base_lr", v);
                   if (d < 0) bad_value("train.base_lr", v, "must be >= 0 or 'auto'");
                   c.train.base_lr = d;
                 },
                 [](const ExperimentConfig& c) {
                   return c.train.base_lr < 0 ? std::string("auto") : fmt_double(c.train.base_lr);
                 }});
    dbl("train.momentum", [](ExperimentConfig& c) -> double& { return c.train.momentum; });
    dbl("train.weight_decay", [](ExperimentConfig& c) -> double& { return c.train.weight_decay; });

    str("eval.checkpoint", [](ExperimentConfig& c) -> std::string& { return c.checkpoint; });
    str("ablate.matrix", [](ExperimentConfig& c) -> std::string& { return c.ablate_matrix; });
    sz("ablate.seeds", [](ExperimentConfig& c) -> std::size_t& { return c.ablate_seeds; });
    sz("viz.count", [](ExperimentConfig& c) -> std::size_t& { return c.viz_count; });
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.key == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) {
  for (const auto& k : detail::config_keys()) {
    if (k.key == key) return k.get(cfg);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> out;
  for (const auto& k : detail::config_keys()) out.push_back(k.key);
  return out;
}

// Applies "key=value" lines on top of `cfg`.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    set_config_value(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

// "key=value" override as given on the command line.
inline void apply_override(ExperimentConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
  set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  ExperimentConfig cfg;
  apply_config_text(cfg, ss.str());
  return cfg;
}

// Every key with its effective value; feeding this back reproduces `cfg`.
inline std::string format_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.key + "=" + k.get(cfg) + "\n";
  return out;
}

}  // namespace bmlab
