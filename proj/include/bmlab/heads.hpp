#pragma once

// Mask-head variants:
//   plain  - 4 x (3x3 conv, ReLU) -> predictor
//   lmh    - plain with 8 convs (compute-matched baseline)
//   bmask  - mask branch + boundary branch joined by M2B / B2M fusion blocks
//   sobel  - plain head whose mask probabilities feed fixed Sobel filters and
//            two 3x3 convs that predict boundaries
// A predictor is relu(2x2 deconv, stride 2) followed by a 1x1 conv to K
// class-specific logits at 28 x 28.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/imgproc.hpp"
#include "bmlab/losses.hpp"
#include "bmlab/ops.hpp"
#include "bmlab/params.hpp"
#include "bmlab/roi_align.hpp"

namespace bmlab {

enum class HeadVariant { Plain, BMask, Lmh, Sobel };

inline std::string_view to_string(HeadVariant v) {
  switch (v) {
    case HeadVariant::Plain: return "plain";
    case HeadVariant::BMask: return "bmask";
    case HeadVariant::Lmh: return "lmh";
    case HeadVariant::Sobel: return "sobel";
  }
  return "?";
}

inline constexpr std::size_t kMaskRoiSize = 14;
inline constexpr std::size_t kMaskOutSize = 28;

struct HeadConfig {
  HeadVariant variant = HeadVariant::BMask;
  std::size_t channels = 256;
  std::size_t num_classes = 3;
  bool m2b_fusion = true;
  bool b2m_fusion = true;
  BoundarySource boundary_source = BoundarySource::P2;
  std::size_t boundary_roi_size = 28;
  // 0 picks the variant default (4 for plain/sobel/bmask, 8 for lmh). bmask
  // always adds one more conv after the B2M fusion point.
  std::size_t mask_convs = 0;
  std::size_t sampling = 2;
  LossConfig loss;

  bool has_boundary_branch() const { return variant == HeadVariant::BMask; }
  bool predicts_boundary() const { return variant == HeadVariant::BMask || variant == HeadVariant::Sobel; }

  std::size_t stacked_mask_convs() const {
    if (mask_convs != 0) return mask_convs;
    return variant == HeadVariant::Lmh ? 8 : 4;
  }

  RoiStrategy roi_strategy() const {
    RoiStrategy s;
    s.mask_size = kMaskRoiSize;
    s.boundary_source = boundary_source;
    s.boundary_size = boundary_roi_size;
    s.sampling = sampling;
    return s;
  }

  void validate() const {
    if (channels == 0) throw ConfigError("head.channels must be positive");
    if (num_classes == 0) throw ConfigError("head.num_classes must be positive");
    if (boundary_roi_size != 14 && boundary_roi_size != 28) {
      throw ConfigError("head.boundary_roi_size must be 14 or 28, got " + std::to_string(boundary_roi_size));
    }
    if (sampling == 0) throw ConfigError("head.sampling must be >= 1");
    loss.validate();
  }
};

struct HeadOutputs {
  Tensor mask_logits;                     // N x K x 28 x 28
  std::optional<Tensor> boundary_logits;  // N x K x 28 x 28 for bmask / sobel
};

namespace detail {

inline void add_conv(ParamSet& ps, const std::string& name, std::size_t cin, std::size_t cout,
                     std::size_t k) {
  ps.add_kaiming(name + ".weight", Shape{cout, cin, k, k}, cin * k * k);
  ps.add_zeros(name + ".bias", Shape{cout});
}

inline void add_predictor(ParamSet& ps, const std::string& prefix, std::size_t c, std::size_t k) {
  ps.add_kaiming(prefix + ".deconv.weight", Shape{c, c, 2, 2}, c);
  ps.add_zeros(prefix + ".deconv.bias", Shape{c});
  add_conv(ps, prefix + ".predictor", c, k, 1);
}

inline Tensor conv_layer(const ParamSet& ps, const std::string& name, const Tensor& x,
                         std::size_t stride, std::size_t pad, bool activation = true) {
  Tensor y = conv2d(x, ps.at(name + ".weight"), ps.at(name + ".bias"), stride, pad);
  return activation ? relu(y) : y;
}

inline Tensor predictor(const ParamSet& ps, const std::string& prefix, const Tensor& x) {
  Tensor up = relu(conv_transpose2d(x, ps.at(prefix + ".deconv.weight"), ps.at(prefix + ".deconv.bias")));
  return conv_layer(ps, prefix + ".predictor", up, 1, 0, false);
}

}  // namespace detail

// Adds the head's parameters to `ps` in a fixed order. Values depend only on
// (ps.seed(), parameter name).
inline void build_head(const HeadConfig& cfg, ParamSet& ps) {
  cfg.validate();
  const std::size_t C = cfg.channels, K = cfg.num_classes;
  const std::size_t n = cfg.stacked_mask_convs();
  for (std::size_t i = 1; i <= n; ++i) detail::add_conv(ps, "mask.conv" + std::to_string(i), C, C, 3);
  switch (cfg.variant) {
    case HeadVariant::Plain:
    case HeadVariant::Lmh:
      break;
    case HeadVariant::Sobel:
      detail::add_conv(ps, "sobel.conv1", 2, C, 3);
      detail::add_conv(ps, "sobel.conv2", C, K, 3);
      break;
    case HeadVariant::BMask:
      if (cfg.boundary_roi_size == 28) detail::add_conv(ps, "boundary.down", C, C, 3);
      if (cfg.m2b_fusion) detail::add_conv(ps, "fusion.m2b", C, C, 1);
      detail::add_conv(ps, "boundary.conv1", C, C, 3);
      detail::add_conv(ps, "boundary.conv2", C, C, 3);
      detail::add_predictor(ps, "boundary", C, K);
      if (cfg.b2m_fusion) detail::add_conv(ps, "fusion.b2m", C, C, 1);
      detail::add_conv(ps, "mask.conv" + std::to_string(n + 1), C, C, 3);
      break;
  }
  detail::add_predictor(ps, "mask", C, K);
}

inline ParamSet build_head(const HeadConfig& cfg, std::uint64_t seed) {
  ParamSet ps(seed);
  build_head(cfg, ps);
  return ps;
}

// `classes` (one per RoI) is only consulted by the sobel variant, which
// derives boundaries from the probability map of each RoI's own class.
inline HeadOutputs head_forward(const HeadConfig& cfg, const ParamSet& ps, const RoiFeatures& r,
                                std::span<const std::size_t> classes = {}) {
  const std::size_t C = cfg.channels;
  if (r.r_m.rank() != 4 || r.r_m.dim(1) != C || r.r_m.dim(2) != kMaskRoiSize || r.r_m.dim(3) != kMaskRoiSize) {
    throw ShapeError("head forward: mask RoI features must be N x " + std::to_string(C) + " x 14 x 14, got " +
                     shape_str(r.r_m.shape()));
  }
  const std::size_t n = cfg.stacked_mask_convs();
  HeadOutputs out;
  Tensor fm = r.r_m;
  for (std::size_t i = 1; i <= n; ++i) fm = detail::conv_layer(ps, "mask.conv" + std::to_string(i), fm, 1, 1);

  if (cfg.variant == HeadVariant::BMask) {
    const std::size_t sb = cfg.boundary_roi_size;
    if (!r.r_b.defined() || r.r_b.rank() != 4 || r.r_b.dim(0) != r.r_m.dim(0) || r.r_b.dim(1) != C ||
        r.r_b.dim(2) != sb || r.r_b.dim(3) != sb) {
      throw ShapeError("head forward: boundary RoI features must be N x " + std::to_string(C) + " x " +
                       std::to_string(sb) + " x " + std::to_string(sb) + ", got " +
                       (r.r_b.defined() ? shape_str(r.r_b.shape()) : std::string("<none>")));
    }
    Tensor rb = sb == 28 ? detail::conv_layer(ps, "boundary.down", r.r_b, 2, 1) : r.r_b;
    // M2B: F_b = relu(1x1(F_m)) + R~_b
    Tensor fb = cfg.m2b_fusion ? add(detail::conv_layer(ps, "fusion.m2b", fm, 1, 0), rb) : rb;
    fb = detail::conv_layer(ps, "boundary.conv1", fb, 1, 1);
    fb = detail::conv_layer(ps, "boundary.conv2", fb, 1, 1);
    out.boundary_logits = detail::predictor(ps, "boundary", fb);
    // B2M: same block shape, boundary features into the mask path.
    if (cfg.b2m_fusion) fm = add(fm, detail::conv_layer(ps, "fusion.b2m", fb, 1, 0));
    fm = detail::conv_layer(ps, "mask.conv" + std::to_string(n + 1), fm, 1, 1);
  }
  out.mask_logits = detail::predictor(ps, "mask", fm);

  if (cfg.variant == HeadVariant::Sobel) {
    if (classes.size() != out.mask_logits.dim(0)) {
      throw ShapeError("sobel head needs one class id per RoI");
    }
    Tensor prob = sigmoid(select_channels(out.mask_logits, classes));
    Tensor edges = sobel_xy(prob);
    Tensor h = detail::conv_layer(ps, "sobel.conv1", edges, 1, 1);
    out.boundary_logits = detail::conv_layer(ps, "sobel.conv2", h, 1, 1, false);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multiply-accumulate accounting (predictors excluded).

struct LayerMacs {
  std::string name;
  std::uint64_t macs;
};

struct MacReport {
  std::vector<LayerMacs> layers;
  std::uint64_t total = 0;
};

inline MacReport count_macs(const HeadConfig& cfg) {
  cfg.validate();
  MacReport rep;
  const std::uint64_t C = cfg.channels;
  auto conv = [&rep](std::string name, std::uint64_t k, std::uint64_t cin, std::uint64_t cout,
                     std::uint64_t hw) {
    const std::uint64_t m = k * k * cin * cout * hw * hw;
    rep.layers.push_back({std::move(name), m});
    rep.total += m;
  };
  const std::size_t n = cfg.stacked_mask_convs();
  const std::uint64_t s = kMaskRoiSize;
  for (std::size_t i = 1; i <= n; ++i) conv("mask.conv" + std::to_string(i), 3, C, C, s);
  if (cfg.variant == HeadVariant::BMask) {
    if (cfg.boundary_roi_size == 28) conv("boundary.down", 3, C, C, s);
    if (cfg.m2b_fusion) conv("fusion.m2b", 1, C, C, s);
    conv("boundary.conv1", 3, C, C, s);
    conv("boundary.conv2", 3, C, C, s);
    if (cfg.b2m_fusion) conv("fusion.b2m", 1, C, C, s);
    conv("mask.conv" + std::to_string(n + 1), 3, C, C, s);
  }
  if (cfg.variant == HeadVariant::Sobel) {
    conv("sobel.fixed", 3, 1, 2, kMaskOutSize);
    conv("sobel.conv1", 3, 2, C, kMaskOutSize);
  }
  return rep;
}

}  // namespace bmlab
