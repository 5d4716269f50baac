#pragma once

// RoIAlign over a P2-P5 pyramid and the two RoI-source strategies for the
// boundary branch (finest level vs. same level as the mask branch).
//
// Feature coordinates: a box edge at image coordinate x sits at x / stride on
// the feature map, and feature pixel k is located at coordinate k. Bilinear
// taps falling outside the map read 0.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/imgproc.hpp"
#include "bmlab/tensor.hpp"

namespace bmlab {

inline constexpr int kMinLevel = 2;
inline constexpr int kMaxLevel = 5;

struct PyramidFeatures {
  std::map<int, Tensor> levels;  // level k -> 1 x C x (H / 2^k) x (W / 2^k)
  std::size_t channels = 0;
  std::size_t image_height = 0, image_width = 0;

  const Tensor& level(int k) const {
    auto it = levels.find(k);
    if (it == levels.end()) throw ContractError("pyramid has no level P" + std::to_string(k));
    return it->second;
  }
};

// Canonical FPN level rule: floor(4 + log2(sqrt(area) / 224)), clamped to [2, 5].
inline int assign_level(const Box& b) {
  if (!b.valid()) throw ShapeError("assign_level: invalid box");
  const double k = std::floor(4.0 + std::log2(std::sqrt(b.area()) / 224.0));
  return static_cast<int>(std::clamp(k, static_cast<double>(kMinLevel), static_cast<double>(kMaxLevel)));
}

namespace detail {

struct Tap {
  std::size_t index;  // into one H x W channel plane
  double weight;
};

// Taps for every output cell of one box: cell c uses taps[offsets[c] .. offsets[c+1]).
struct RoiPlan {
  std::vector<Tap> taps;
  std::vector<std::size_t> offsets;
};

inline RoiPlan plan_roi(const Box& b, double stride, std::size_t H, std::size_t W, std::size_t out,
                        std::size_t sampling) {
  RoiPlan plan;
  plan.offsets.reserve(out * out + 1);
  const double x0 = b.x0 / stride, y0 = b.y0 / stride;
  const double bw = (b.x1 - b.x0) / stride / static_cast<double>(out);
  const double bh = (b.y1 - b.y0) / stride / static_cast<double>(out);
  const double norm = 1.0 / static_cast<double>(sampling * sampling);
  const auto iH = static_cast<std::ptrdiff_t>(H), iW = static_cast<std::ptrdiff_t>(W);
  for (std::size_t oi = 0; oi < out; ++oi) {
    for (std::size_t oj = 0; oj < out; ++oj) {
      plan.offsets.push_back(plan.taps.size());
      for (std::size_t si = 0; si < sampling; ++si) {
        const double y = y0 + bh * (static_cast<double>(oi) +
                                    (static_cast<double>(si) + 0.5) / static_cast<double>(sampling));
        const double fy = std::floor(y);
        const auto yl = static_cast<std::ptrdiff_t>(fy);
        const double ly = y - fy;
        for (std::size_t sj = 0; sj < sampling; ++sj) {
          const double x = x0 + bw * (static_cast<double>(oj) +
                                      (static_cast<double>(sj) + 0.5) / static_cast<double>(sampling));
          const double fx = std::floor(x);
          const auto xl = static_cast<std::ptrdiff_t>(fx);
          const double lx = x - fx;
          const std::ptrdiff_t ys[2] = {yl, yl + 1};
          const std::ptrdiff_t xs[2] = {xl, xl + 1};
          const double wy[2] = {1.0 - ly, ly};
          const double wx[2] = {1.0 - lx, lx};
          for (int a = 0; a < 2; ++a) {
            if (ys[a] < 0 || ys[a] >= iH || wy[a] == 0.0) continue;
            for (int c = 0; c < 2; ++c) {
              if (xs[c] < 0 || xs[c] >= iW || wx[c] == 0.0) continue;
              plan.taps.push_back(Tap{static_cast<std::size_t>(ys[a] * iW + xs[c]), wy[a] * wx[c] * norm});
            }
          }
        }
      }
    }
  }
  plan.offsets.push_back(plan.taps.size());
  return plan;
}

}  // namespace detail

// Pools each box from its own pyramid level. `features[i]` is a 1 x C x h x w
// map with stride `strides[i]`; box n reads features[source[n]].
// Result: N x C x out x out, differentiable w.r.t. every feature map.
inline Tensor roi_align_multi(const std::vector<Tensor>& features, const std::vector<double>& strides,
                              const std::vector<Box>& boxes, const std::vector<std::size_t>& source,
                              std::size_t out, std::size_t sampling) {
  if (sampling < 1) throw ConfigError("roi_align: sampling ratio must be >= 1");
  if (out < 1) throw ConfigError("roi_align: output size must be >= 1");
  if (features.empty() || features.size() != strides.size() || boxes.size() != source.size()) {
    throw ShapeError("roi_align: inconsistent feature/stride/box/source counts");
  }
  const std::size_t C = features[0].dim(1);
  for (const auto& f : features) {
    if (f.rank() != 4 || f.dim(0) != 1 || f.dim(1) != C) {
      throw ShapeError("roi_align: feature maps must be 1 x C x h x w with shared C, got " +
                       shape_str(f.shape()));
    }
  }
  const std::size_t N = boxes.size(), cells = out * out;
  auto plans = std::make_shared<std::vector<detail::RoiPlan>>();
  plans->reserve(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (!boxes[n].valid()) throw ShapeError("roi_align: degenerate box");
    if (source[n] >= features.size()) throw ShapeError("roi_align: box source level out of range");
    const auto& f = features[source[n]];
    plans->push_back(detail::plan_roi(boxes[n], strides[source[n]], f.dim(2), f.dim(3), out, sampling));
  }
  std::vector<double> result(N * C * cells, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const auto& f = features[source[n]];
    const std::size_t plane = f.dim(2) * f.dim(3);
    const auto& plan = (*plans)[n];
    for (std::size_t c = 0; c < C; ++c) {
      const double* fc = f.data().data() + c * plane;
      double* oc = result.data() + (n * C + c) * cells;
      for (std::size_t k = 0; k < cells; ++k) {
        double acc = 0.0;
        for (std::size_t t = plan.offsets[k]; t < plan.offsets[k + 1]; ++t) {
          acc += plan.taps[t].weight * fc[plan.taps[t].index];
        }
        oc[k] = acc;
      }
    }
  }
  auto src = source;
  return Tensor::make_result(
      Shape{N, C, out, out}, std::move(result), features,
      [features, src, plans, C, cells](detail::Node& self) {
        for (std::size_t n = 0; n < src.size(); ++n) {
          const auto& f = features[src[n]];
          if (!f.requires_grad()) continue;
          f.node()->ensure_grad();
          const std::size_t plane = f.dim(2) * f.dim(3);
          const auto& plan = (*plans)[n];
          for (std::size_t c = 0; c < C; ++c) {
            double* gc = f.node()->grad.data() + c * plane;
            const double* go = self.grad.data() + (n * C + c) * cells;
            for (std::size_t k = 0; k < cells; ++k) {
              for (std::size_t t = plan.offsets[k]; t < plan.offsets[k + 1]; ++t) {
                gc[plan.taps[t].index] += plan.taps[t].weight * go[k];
              }
            }
          }
        }
      });
}

// Single map, single box: C x out x out (as a 1 x C x out x out tensor).
inline Tensor roi_align(const Tensor& f, const Box& b, double stride, std::size_t out,
                        std::size_t sampling = 2) {
  return roi_align_multi({f}, {stride}, {b}, {0}, out, sampling);
}

enum class BoundarySource { P2, SameAsMask };

inline std::string_view to_string(BoundarySource s) {
  return s == BoundarySource::P2 ? "p2" : "same";
}

struct RoiStrategy {
  std::size_t mask_size = 14;
  BoundarySource boundary_source = BoundarySource::P2;
  std::size_t boundary_size = 28;
  std::size_t sampling = 2;
};

struct RoiFeatures {
  Tensor r_m;  // N x C x mask_size x mask_size
  Tensor r_b;  // N x C x boundary_size x boundary_size
  std::vector<int> mask_levels;
  std::vector<int> boundary_levels;
};

// R_m comes from the scale-assigned level at mask_size; R_b either from P2
// or from that same level, at boundary_size.
inline RoiFeatures extract_roi_features(const PyramidFeatures& p, const std::vector<Box>& boxes,
                                        const RoiStrategy& s, bool with_boundary = true) {
  if (s.boundary_size != 14 && s.boundary_size != 28) {
    throw ConfigError("boundary RoI size must be 14 or 28, got " + std::to_string(s.boundary_size));
  }
  std::vector<Tensor> maps;
  std::vector<double> strides;
  for (int k = kMinLevel; k <= kMaxLevel; ++k) {
    maps.push_back(p.level(k));
    strides.push_back(static_cast<double>(1 << k));
  }
  RoiFeatures r;
  std::vector<std::size_t> msrc, bsrc;
  for (const auto& b : boxes) {
    const int lvl = assign_level(b);
    r.mask_levels.push_back(lvl);
    msrc.push_back(static_cast<std::size_t>(lvl - kMinLevel));
    const int blvl = s.boundary_source == BoundarySource::P2 ? kMinLevel : lvl;
    r.boundary_levels.push_back(blvl);
    bsrc.push_back(static_cast<std::size_t>(blvl - kMinLevel));
  }
  r.r_m = roi_align_multi(maps, strides, boxes, msrc, s.mask_size, s.sampling);
  if (with_boundary) r.r_b = roi_align_multi(maps, strides, boxes, bsrc, s.boundary_size, s.sampling);
  return r;
}

}  // namespace bmlab
