#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bmlab/heads.hpp"
#include "bmlab/minifpn.hpp"
#include "bmlab/params.hpp"
#include "bmlab/synthdata.hpp"

namespace bmlab {

// Backbone + mask head sharing one parameter set ("backbone.*", head names).
struct Model {
  BackboneConfig backbone;
  HeadConfig head;
  ParamSet params;
};

inline Model build_model(const BackboneConfig& bb, const HeadConfig& head, std::uint64_t seed) {
  bb.validate();
  head.validate();
  if (bb.channels != head.channels) {
    throw ConfigError("backbone.channels (" + std::to_string(bb.channels) + ") must equal head.channels (" +
                      std::to_string(head.channels) + ")");
  }
  Model m{bb, head, ParamSet(seed)};
  build_backbone(bb, m.params);
  build_head(head, m.params);
  return m;
}

// 1 x 3 x H x W, centred around zero.
inline Tensor image_tensor(const SceneSample& s) {
  std::vector<double> v(s.image.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = s.image[i] - 0.5;
  return Tensor(Shape{1, 3, s.height, s.width}, std::move(v));
}

struct SceneForward {
  std::vector<Box> boxes;
  std::vector<std::size_t> classes;
  HeadOutputs outputs;
};

// Runs backbone and head over the scene's oracle boxes.
inline SceneForward forward_scene(const Model& m, const SceneSample& s) {
  SceneForward f;
  for (const auto& inst : s.instances) {
    f.boxes.push_back(inst.box);
    f.classes.push_back(inst.cls);
  }
  const PyramidFeatures pyr = backbone_forward(image_tensor(s), m.params, m.backbone);
  const RoiFeatures roi = extract_roi_features(pyr, f.boxes, m.head.roi_strategy(), m.head.has_boundary_branch());
  f.outputs = head_forward(m.head, m.params, roi, f.classes);
  return f;
}

// Per-instance 28 x 28 targets for a scene, flattened in instance order.
struct SceneTargets {
  std::vector<double> mask;
  std::vector<double> boundary;
};

inline SceneTargets scene_targets(const SceneSample& s, BoundaryTarget target) {
  SceneTargets t;
  for (const auto& inst : s.instances) {
    const BinaryMask m = crop_resize_mask(inst.mask, inst.box, kMaskOutSize);
    const auto mv = m.as_doubles();
    t.mask.insert(t.mask.end(), mv.begin(), mv.end());
    if (target == BoundaryTarget::Boundary) {
      const auto bv = extract_boundary(m).as_doubles();
      t.boundary.insert(t.boundary.end(), bv.begin(), bv.end());
    } else if (target == BoundaryTarget::Mask) {
      t.boundary.insert(t.boundary.end(), mv.begin(), mv.end());
    }
  }
  return t;
}

struct SceneLoss {
  Tensor total;
  double mask_loss = 0.0;
  double boundary_loss = 0.0;
};

// L_mask + L_b for one scene, both averaged over its instances.
inline SceneLoss scene_loss(const Model& m, const SceneSample& s) {
  SceneForward f = forward_scene(m, s);
  const SceneTargets t = scene_targets(s, m.head.loss.target);
  SceneLoss out;
  Tensor lm = mask_loss(f.outputs.mask_logits, f.classes, t.mask);
  out.mask_loss = lm.item();
  if (m.head.predicts_boundary() && m.head.loss.target != BoundaryTarget::None) {
    Tensor pb = sigmoid(select_channels(*f.outputs.boundary_logits, f.classes));
    Tensor lb = boundary_loss(pb, t.boundary, m.head.loss);
    out.boundary_loss = lb.item();
    out.total = add(lm, lb);
  } else {
    out.total = lm;
  }
  return out;
}

}  // namespace bmlab
