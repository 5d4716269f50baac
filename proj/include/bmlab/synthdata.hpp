#pragma once

// Seeded synthetic instance-segmentation scenes (ellipses, rectangles and
// triangles on a noisy gradient background) and the BMDS1 text container.
//
// BMDS1 layout, one record per line:
//   BMDS1 <H> <W>
//   count <scenes>
//   scene <instances>                       -- repeated <scenes> times
//   image <hex of H*W*3 bytes, RGB interleaved, row-major>
//   inst <class> <x0> <y0> <x1> <y1> <runs> <r1> <r2> ...   -- per instance
// Masks are row-major run lengths alternating 0-run, 1-run, ... starting with
// a (possibly empty) 0-run and summing to H*W.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/imgproc.hpp"
#include "bmlab/rng.hpp"

namespace bmlab {

inline constexpr std::size_t kNumShapeClasses = 3;  // 0 ellipse, 1 rectangle, 2 triangle

struct Instance {
  std::size_t cls = 0;
  Box box;
  BinaryMask mask;
  bool operator==(const Instance&) const = default;
};

struct SceneSample {
  std::size_t height = 0, width = 0;
  std::vector<double> image;  // 3 x H x W, values are multiples of 1/255
  std::vector<Instance> instances;
  bool operator==(const SceneSample&) const = default;
};

struct DatasetSpec {
  std::size_t count = 500;
  std::size_t height = 128, width = 128;
  std::uint64_t seed = 7;
  double max_iou = 0.3;
  double noise = 0.04;
  std::size_t min_instances = 1, max_instances = 6;
  double min_radius = 6.0, max_radius = 26.0;
  std::array<std::array<double, 3>, kNumShapeClasses> palette{{
      {0.85, 0.25, 0.20},  // ellipse
      {0.20, 0.75, 0.30},  // rectangle
      {0.25, 0.35, 0.90},  // triangle
  }};

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("dataset extents must be positive");
    if (!(max_iou >= 0.0 && max_iou <= 1.0)) throw ConfigError("dataset max_iou must be in [0, 1]");
    if (!(noise >= 0.0)) throw ConfigError("dataset noise must be >= 0");
    if (min_instances < 1 || min_instances > max_instances || max_instances > 6) {
      throw ConfigError("dataset instance count range must lie within [1, 6]");
    }
    if (!(min_radius > 1.0 && min_radius <= max_radius)) throw ConfigError("bad dataset radius range");
    if (2.0 * max_radius + 4.0 > static_cast<double>(std::min(height, width))) {
      throw ConfigError("dataset shapes do not fit inside the image");
    }
  }
};

namespace detail {

inline ShapeDesc draw_shape(SplitMix64& rng, std::size_t cls, const DatasetSpec& spec) {
  const double r = rng.uniform(spec.min_radius, spec.max_radius);
  const double cx = rng.uniform(r + 1.0, static_cast<double>(spec.width) - r - 1.0);
  const double cy = rng.uniform(r + 1.0, static_cast<double>(spec.height) - r - 1.0);
  switch (cls) {
    case 0:
      return ShapeDesc::ellipse(cx, cy, r * rng.uniform(0.5, 1.0), r * rng.uniform(0.5, 1.0),
                                rng.uniform(0.0, M_PI));
    case 1: {
      const double hx = r * rng.uniform(0.4, 0.7), hy = r * rng.uniform(0.4, 0.7);
      return ShapeDesc::rectangle(cx - hx, cy - hy, cx + hx, cy + hy, rng.uniform(0.0, M_PI / 2));
    }
    default: {
      const double t0 = rng.uniform(0.0, 2 * M_PI);
      std::array<double, 6> v{};
      for (int k = 0; k < 3; ++k) {
        const double t = t0 + 2 * M_PI * k / 3.0 + rng.uniform(-0.4, 0.4);
        const double rr = r * rng.uniform(0.6, 1.0);
        v[2 * k] = cx + rr * std::cos(t);
        v[2 * k + 1] = cy + rr * std::sin(t);
      }
      return ShapeDesc::triangle(v[0], v[1], v[2], v[3], v[4], v[5]);
    }
  }
}

inline std::size_t and_count(const BinaryMask& a, const BinaryMask& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a.bits()[i] & b.bits()[i];
  return n;
}

inline BinaryMask and_not(const BinaryMask& a, const BinaryMask& b) {
  std::vector<std::uint8_t> bits(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) bits[i] = a.bits()[i] & static_cast<std::uint8_t>(1 - b.bits()[i]);
  return BinaryMask(a.height(), a.width(), std::move(bits));
}

inline constexpr std::size_t kMinVisibleArea = 12;
inline constexpr int kMaxAttempts = 1000;

inline SceneSample generate_scene(const DatasetSpec& spec, std::uint64_t scene_seed) {
  SplitMix64 rng(scene_seed);
  const std::size_t H = spec.height, W = spec.width;
  struct Drawn {
    std::size_t cls;
    BinaryMask full, visible;
    std::array<double, 3> color;
  };
  std::vector<Drawn> drawn;
  for (;;) {  // a scene whose placement stalls is redrawn from the same stream
    drawn.clear();
    const auto n = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.min_instances),
                                                            static_cast<std::int64_t>(spec.max_instances)));
    bool stalled = false;
    while (drawn.size() < n && !stalled) {
      bool placed = false;
      for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
        const auto cls = static_cast<std::size_t>(rng.uniform_int(0, kNumShapeClasses - 1));
        const ShapeDesc s = draw_shape(rng, cls, spec);
        BinaryMask full = rasterize_shape(s, H, W);
        const std::size_t area = full.area();
        if (area < kMinVisibleArea) continue;
        bool ok = true;
        for (const auto& d : drawn) {
          if (mask_iou(d.full, full) > spec.max_iou) { ok = false; break; }
          // Earlier instances must stay at least half visible.
          const std::size_t remaining = d.visible.area() - and_count(d.visible, full);
          if (remaining < kMinVisibleArea || 2 * remaining < d.full.area()) { ok = false; break; }
        }
        if (!ok) continue;
        std::array<double, 3> color{};
        for (int c = 0; c < 3; ++c) {
          color[c] = std::clamp(spec.palette[cls][c] + rng.uniform(-0.12, 0.12), 0.0, 1.0);
        }
        for (auto& d : drawn) d.visible = and_not(d.visible, full);
        drawn.push_back(Drawn{cls, full, full, color});
        placed = true;
      }
      if (!placed) stalled = true;
    }
    if (!stalled) break;
  }

  SceneSample sc;
  sc.height = H;
  sc.width = W;
  sc.image.assign(3 * H * W, 0.0);
  std::array<double, 3> bg0{}, bg1{};
  for (int c = 0; c < 3; ++c) {
    bg0[c] = rng.uniform(0.3, 0.6);
    bg1[c] = rng.uniform(0.3, 0.6);
  }
  const double ang = rng.uniform(0.0, 2 * M_PI);
  const double dx = std::cos(ang), dy = std::sin(ang);
  const double diag = std::abs(dx) * static_cast<double>(W) + std::abs(dy) * static_cast<double>(H);
  const double off = std::min(0.0, dx * static_cast<double>(W)) + std::min(0.0, dy * static_cast<double>(H));
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double t = ((static_cast<double>(j) + 0.5) * dx + (static_cast<double>(i) + 0.5) * dy - off) / diag;
      for (int c = 0; c < 3; ++c) sc.image[(c * H + i) * W + j] = bg0[c] + (bg1[c] - bg0[c]) * t;
    }
  }
  for (const auto& d : drawn) {
    for (std::size_t p = 0; p < H * W; ++p) {
      if (d.full.bits()[p]) {
        for (int c = 0; c < 3; ++c) sc.image[c * H * W + p] = d.color[c];
      }
    }
  }
  for (auto& v : sc.image) {
    v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
    v = std::round(v * 255.0) / 255.0;
  }
  for (const auto& d : drawn) sc.instances.push_back(Instance{d.cls, tight_box(d.visible), d.visible});
  return sc;
}

}  // namespace detail

inline std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index) {
  return mix64(dataset_seed) ^ static_cast<std::uint64_t>(index);
}

// Scene i depends only on (spec, i), so scenes may be produced in any order.
inline std::vector<SceneSample> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<SceneSample> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(detail::generate_scene(spec, scene_seed(spec.seed, i)));
  return out;
}

// ---------------------------------------------------------------------------
// BMDS1 serialization.

inline std::vector<std::size_t> encode_runs(const BinaryMask& m) {
  std::vector<std::size_t> runs;
  std::uint8_t cur = 0;
  std::size_t len = 0;
  for (auto b : m.bits()) {
    if (b == cur) {
      ++len;
    } else {
      runs.push_back(len);
      cur = b;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

inline std::string format_dataset(const std::vector<SceneSample>& samples, std::size_t height, std::size_t width) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::ostringstream os;
  os.precision(17);
  os << "BMDS1 " << height << ' ' << width << '\n';
  os << "count " << samples.size() << '\n';
  for (const auto& s : samples) {
    if (s.height != height || s.width != width) throw ShapeError("format_dataset: scene size differs from header");
    os << "scene " << s.instances.size() << '\n';
    std::string hex;
    hex.reserve(6 * height * width);
    const std::size_t plane = height * width;
    for (std::size_t p = 0; p < plane; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        const auto byte = static_cast<unsigned>(std::lround(s.image[c * plane + p] * 255.0));
        hex.push_back(kHex[byte >> 4]);
        hex.push_back(kHex[byte & 15]);
      }
    }
    os << "image " << hex << '\n';
    for (const auto& inst : s.instances) {
      const auto runs = encode_runs(inst.mask);
      os << "inst " << inst.cls << ' ' << inst.box.x0 << ' ' << inst.box.y0 << ' ' << inst.box.x1 << ' '
         << inst.box.y1 << ' ' << runs.size();
      for (auto r : runs) os << ' ' << r;
      os << '\n';
    }
  }
  return os.str();
}

inline void save_dataset(const std::vector<SceneSample>& samples, std::size_t height, std::size_t width,
                         const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open dataset for writing: " + path.string());
  f << format_dataset(samples, height, width);
  if (!f) throw std::runtime_error("failed writing dataset: " + path.string());
}

namespace detail {

class LineParser {
 public:
  explicit LineParser(const std::string& text) : text_(text) {}

  // Next line split into tokens; throws at end of input.
  void next_line(const char* expecting) {
    if (pos_ >= text_.size()) fail(std::string("unexpected end of file, expected ") + expecting);
    line_start_ = pos_;
    ++line_no_;
    auto nl = text_.find('\n', pos_);
    if (nl == std::string::npos) fail(std::string("missing newline, file truncated while reading ") + expecting);
    line_ = std::string_view(text_).substr(pos_, nl - pos_);
    pos_ = nl + 1;
    cursor_ = 0;
  }

  bool at_end() const { return pos_ >= text_.size(); }

  std::string_view token(const char* what) {
    while (cursor_ < line_.size() && line_[cursor_] == ' ') ++cursor_;
    if (cursor_ >= line_.size()) fail(std::string("missing ") + what);
    const std::size_t start = cursor_;
    while (cursor_ < line_.size() && line_[cursor_] != ' ') ++cursor_;
    tok_start_ = start;
    return line_.substr(start, cursor_ - start);
  }

  void keyword(std::string_view kw) {
    auto t = token(std::string(kw).c_str());
    if (t != kw) fail("expected '" + std::string(kw) + "', found '" + std::string(t) + "'");
  }

  std::size_t size_value(const char* what) {
    auto t = token(what);
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size()) fail(std::string("invalid ") + what + " '" + std::string(t) + "'");
    return v;
  }

  double double_value(const char* what) {
    auto t = token(what);
    std::string s(t);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
      fail(std::string("invalid ") + what + " '" + s + "'");
    }
    return v;
  }

  void end_of_line() {
    while (cursor_ < line_.size() && line_[cursor_] == ' ') ++cursor_;
    if (cursor_ != line_.size()) {
      tok_start_ = cursor_;
      fail("unexpected trailing data");
    }
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("dataset: " + msg, line_no_, line_start_ + tok_start_);
  }

 private:
  const std::string& text_;
  std::size_t pos_ = 0, line_start_ = 0, line_no_ = 0, cursor_ = 0, tok_start_ = 0;
  std::string_view line_;
};

inline int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace detail

struct Dataset {
  std::size_t height = 0, width = 0;
  std::vector<SceneSample> samples;
};

inline Dataset parse_dataset(const std::string& text) {
  detail::LineParser lp(text);
  Dataset ds;
  lp.next_line("header");
  lp.keyword("BMDS1");
  ds.height = lp.size_value("height");
  ds.width = lp.size_value("width");
  lp.end_of_line();
  if (ds.height == 0 || ds.width == 0) lp.fail("image extents must be positive");
  lp.next_line("count");
  lp.keyword("count");
  const std::size_t count = lp.size_value("scene count");
  lp.end_of_line();
  const std::size_t plane = ds.height * ds.width;
  for (std::size_t s = 0; s < count; ++s) {
    SceneSample sc;
    sc.height = ds.height;
    sc.width = ds.width;
    lp.next_line("scene");
    lp.keyword("scene");
    const std::size_t ninst = lp.size_value("instance count");
    lp.end_of_line();
    lp.next_line("image");
    lp.keyword("image");
    auto hex = lp.token("image data");
    lp.end_of_line();
    if (hex.size() != 6 * plane) {
      lp.fail("image data has " + std::to_string(hex.size()) + " hex digits, expected " + std::to_string(6 * plane));
    }
    sc.image.assign(3 * plane, 0.0);
    for (std::size_t p = 0; p < plane; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        const int hi = detail::hex_digit(hex[(p * 3 + c) * 2]);
        const int lo = detail::hex_digit(hex[(p * 3 + c) * 2 + 1]);
        if (hi < 0 || lo < 0) lp.fail("invalid hex digit in image data");
        sc.image[c * plane + p] = static_cast<double>(hi * 16 + lo) / 255.0;
      }
    }
    for (std::size_t k = 0; k < ninst; ++k) {
      lp.next_line("inst");
      lp.keyword("inst");
      Instance inst;
      inst.cls = lp.size_value("class");
      inst.box.x0 = lp.double_value("x0");
      inst.box.y0 = lp.double_value("y0");
      inst.box.x1 = lp.double_value("x1");
      inst.box.y1 = lp.double_value("y1");
      if (!inst.box.valid()) lp.fail("degenerate box");
      const std::size_t nruns = lp.size_value("run count");
      std::vector<std::uint8_t> bits;
      bits.reserve(plane);
      std::uint8_t cur = 0;
      for (std::size_t r = 0; r < nruns; ++r) {
        const std::size_t len = lp.size_value("run length");
        if (bits.size() + len > plane) lp.fail("runs exceed image size");
        bits.insert(bits.end(), len, cur);
        cur ^= 1;
      }
      lp.end_of_line();
      if (bits.size() != plane) lp.fail("runs cover " + std::to_string(bits.size()) + " pixels, expected " + std::to_string(plane));
      inst.mask = BinaryMask(ds.height, ds.width, std::move(bits));
      sc.instances.push_back(std::move(inst));
    }
    ds.samples.push_back(std::move(sc));
  }
  if (!lp.at_end()) {
    lp.next_line("end of file");
    lp.fail("trailing data after last scene");
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_dataset(ss.str());
}

}  // namespace bmlab
