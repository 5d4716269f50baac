#pragma once

// Small strided-conv backbone with an FPN neck producing P2-P5.
//
//   C2 = relu(conv s2(relu(conv s2(img))))     stride 4
//   C3 = relu(conv s2(C2)), C4, C5 likewise    strides 8, 16, 32
//   L_k = 1x1 lateral of C_k to `channels`
//   T5 = L5, T_k = L_k + up2(T_{k+1})          nearest-neighbour top-down
//   P_k = 3x3 smoothing conv of T_k

#include <array>
#include <cstdint>
#include <string>

#include "bmlab/errors.hpp"
#include "bmlab/ops.hpp"
#include "bmlab/params.hpp"
#include "bmlab/roi_align.hpp"

namespace bmlab {

struct BackboneConfig {
  std::array<std::size_t, 4> stage_channels{32, 64, 128, 256};
  std::size_t channels = 256;

  void validate() const {
    for (auto c : stage_channels) {
      if (c == 0) throw ConfigError("backbone stage channels must be positive");
    }
    if (channels == 0) throw ConfigError("backbone.channels must be positive");
  }
};

inline void build_backbone(const BackboneConfig& cfg, ParamSet& ps) {
  cfg.validate();
  const auto& s = cfg.stage_channels;
  auto conv = [&ps](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    ps.add_kaiming(name + ".weight", Shape{cout, cin, k, k}, cin * k * k);
    ps.add_zeros(name + ".bias", Shape{cout});
  };
  conv("backbone.stem1", 3, s[0], 3);
  conv("backbone.stem2", s[0], s[0], 3);
  conv("backbone.stage3", s[0], s[1], 3);
  conv("backbone.stage4", s[1], s[2], 3);
  conv("backbone.stage5", s[2], s[3], 3);
  for (int k = 2; k <= 5; ++k) conv("backbone.lateral" + std::to_string(k), s[k - 2], cfg.channels, 1);
  for (int k = 2; k <= 5; ++k) conv("backbone.smooth" + std::to_string(k), cfg.channels, cfg.channels, 3);
}

// Intermediate maps, exposed for inspection and tests.
struct BackboneTrace {
  std::array<Tensor, 4> laterals;  // L2..L5
  std::array<Tensor, 4> topdown;   // T2..T5
  PyramidFeatures pyramid;
};

inline BackboneTrace backbone_trace(const Tensor& img, const ParamSet& ps, const BackboneConfig& cfg) {
  if (img.rank() != 4 || img.dim(0) != 1 || img.dim(1) != 3) {
    throw ShapeError("backbone: expected 1 x 3 x H x W image, got " + shape_str(img.shape()));
  }
  const std::size_t H = img.dim(2), W = img.dim(3);
  if (H % 32 != 0 || W % 32 != 0 || H == 0 || W == 0) {
    throw ShapeError("backbone: image extents must be positive multiples of 32, got " + shape_str(img.shape()));
  }
  auto conv = [&ps](const std::string& name, const Tensor& x, std::size_t stride, std::size_t pad) {
    return conv2d(x, ps.at(name + ".weight"), ps.at(name + ".bias"), stride, pad);
  };
  std::array<Tensor, 4> c;
  c[0] = relu(conv("backbone.stem2", relu(conv("backbone.stem1", img, 2, 1)), 2, 1));
  c[1] = relu(conv("backbone.stage3", c[0], 2, 1));
  c[2] = relu(conv("backbone.stage4", c[1], 2, 1));
  c[3] = relu(conv("backbone.stage5", c[2], 2, 1));

  BackboneTrace tr;
  for (int k = 0; k < 4; ++k) tr.laterals[k] = conv("backbone.lateral" + std::to_string(k + 2), c[k], 1, 0);
  tr.topdown[3] = tr.laterals[3];
  for (int k = 2; k >= 0; --k) tr.topdown[k] = add(tr.laterals[k], upsample_nearest2x(tr.topdown[k + 1]));
  tr.pyramid.channels = cfg.channels;
  tr.pyramid.image_height = H;
  tr.pyramid.image_width = W;
  for (int k = 0; k < 4; ++k) {
    tr.pyramid.levels[k + 2] = conv("backbone.smooth" + std::to_string(k + 2), tr.topdown[k], 1, 1);
  }
  return tr;
}

inline PyramidFeatures backbone_forward(const Tensor& img, const ParamSet& ps, const BackboneConfig& cfg) {
  return backbone_trace(img, ps, cfg).pyramid;
}

}  // namespace bmlab
