#pragma once

// Boundary and mask losses. Predictions are probability tensors whose leading
// dimension indexes instances when rank >= 3 (N x 1 x H x W or N x H x W);
// lower-rank inputs are a single instance. Targets are flat {0,1} arrays in
// the same element order. Every loss returns a 1-element tensor averaged over
// instances.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/ops.hpp"
#include "bmlab/tensor.hpp"

namespace bmlab {

inline constexpr double kProbClampLo = 1e-7;
inline constexpr double kProbClampHi = 1.0 - 1e-7;

enum class BoundaryLossKind { Bce, WeightedBce, Dice, DiceBce };
enum class BoundaryTarget { Boundary, Mask, None };

inline std::string_view to_string(BoundaryLossKind k) {
  switch (k) {
    case BoundaryLossKind::Bce: return "bce";
    case BoundaryLossKind::WeightedBce: return "weighted_bce";
    case BoundaryLossKind::Dice: return "dice";
    case BoundaryLossKind::DiceBce: return "dice_bce";
  }
  return "?";
}

inline std::string_view to_string(BoundaryTarget t) {
  switch (t) {
    case BoundaryTarget::Boundary: return "boundary";
    case BoundaryTarget::Mask: return "mask";
    case BoundaryTarget::None: return "none";
  }
  return "?";
}

struct LossConfig {
  BoundaryLossKind kind = BoundaryLossKind::DiceBce;
  double lambda = 1.0;   // BCE weight in dice + lambda * bce
  double epsilon = 1.0;  // dice smoothing
  BoundaryTarget target = BoundaryTarget::Boundary;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("loss lambda must be >= 0");
    if (!(epsilon > 0.0)) throw ConfigError("loss epsilon must be > 0");
  }
};

struct LossReport {
  double mask_loss = 0.0;
  double boundary_loss = 0.0;
  double total = 0.0;
};

namespace detail {

inline std::size_t instance_count(const Tensor& p) { return p.rank() >= 3 ? p.dim(0) : 1; }

inline void check_target(const Tensor& p, std::span<const double> y, const char* op) {
  if (p.numel() != y.size()) {
    throw ShapeError(std::string(op) + ": prediction " + shape_str(p.shape()) + " has " +
                     std::to_string(p.numel()) + " elements, target has " + std::to_string(y.size()));
  }
  if (p.numel() == 0) throw ShapeError(std::string(op) + ": empty input");
}

inline double bce_term(double p, double y) {
  const double pc = std::clamp(p, kProbClampLo, kProbClampHi);
  return -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

inline double bce_grad(double p, double y) {
  if (p < kProbClampLo || p > kProbClampHi) return 0.0;
  return -y / p + (1.0 - y) / (1.0 - p);
}

}  // namespace detail

// Mean over all pixels of -[y log p + (1 - y) log(1 - p)], p clamped to [1e-7, 1 - 1e-7].
inline Tensor bce(const Tensor& p, std::span<const double> y) {
  detail::check_target(p, y, "bce");
  const std::size_t n = p.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += detail::bce_term(p[i], y[i]);
  std::vector<double> target(y.begin(), y.end());
  return Tensor::make_result(Shape{1}, Buffer{acc / static_cast<double>(n)}, {p},
                             [p, target](detail::Node& self) {
                               auto* in = p.node();
                               in->ensure_grad();
                               const double g = self.grad[0] / static_cast<double>(target.size());
                               for (std::size_t i = 0; i < target.size(); ++i) {
                                 in->grad[i] += g * detail::bce_grad(in->data[i], target[i]);
                               }
                             });
}

// HED-style class-balanced BCE, per instance: positives weighted by
// beta = |negatives| / |pixels|, negatives by 1 - beta, then averaged over
// pixels. An instance whose target is all 0 or all 1 falls back to plain BCE.
inline Tensor weighted_bce(const Tensor& p, std::span<const double> y) {
  detail::check_target(p, y, "weighted_bce");
  const std::size_t ni = detail::instance_count(p);
  const std::size_t per = p.numel() / ni;
  std::vector<double> weights(p.numel());
  for (std::size_t k = 0; k < ni; ++k) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < per; ++i) pos += y[k * per + i] > 0.5 ? 1 : 0;
    const bool degenerate = pos == 0 || pos == per;
    const double beta = static_cast<double>(per - pos) / static_cast<double>(per);
    for (std::size_t i = 0; i < per; ++i) {
      const double yi = y[k * per + i];
      weights[k * per + i] = degenerate ? 1.0 : (yi > 0.5 ? beta : 1.0 - beta);
    }
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) acc += weights[i] * detail::bce_term(p[i], y[i]);
  std::vector<double> target(y.begin(), y.end());
  return Tensor::make_result(Shape{1}, Buffer{acc / static_cast<double>(p.numel())}, {p},
                             [p, target, weights](detail::Node& self) {
                               auto* in = p.node();
                               in->ensure_grad();
                               const double g = self.grad[0] / static_cast<double>(target.size());
                               for (std::size_t i = 0; i < target.size(); ++i) {
                                 in->grad[i] += g * weights[i] * detail::bce_grad(in->data[i], target[i]);
                               }
                             });
}

// 1 - (2 sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps), per instance, averaged.
inline Tensor dice(const Tensor& p, std::span<const double> y, double eps = 1.0) {
  detail::check_target(p, y, "dice");
  if (!(eps > 0.0)) throw ConfigError("dice: epsilon must be > 0");
  const std::size_t ni = detail::instance_count(p);
  const std::size_t per = p.numel() / ni;
  std::vector<double> num(ni), den(ni);
  double acc = 0.0;
  for (std::size_t k = 0; k < ni; ++k) {
    double inter = 0.0, sp = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double pi = p[k * per + i], yi = y[k * per + i];
      inter += pi * yi;
      sp += pi * pi;
      sy += yi * yi;
    }
    num[k] = 2.0 * inter + eps;
    den[k] = sp + sy + eps;
    acc += 1.0 - num[k] / den[k];
  }
  std::vector<double> target(y.begin(), y.end());
  return Tensor::make_result(
      Shape{1}, Buffer{acc / static_cast<double>(ni)}, {p}, [p, target, num, den, per](detail::Node& self) {
        auto* in = p.node();
        in->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(num.size());
        for (std::size_t k = 0; k < num.size(); ++k) {
          const double d2 = den[k] * den[k];
          for (std::size_t i = 0; i < per; ++i) {
            const std::size_t idx = k * per + i;
            const double dnum = 2.0 * target[idx];
            const double dden = 2.0 * in->data[idx];
            in->grad[idx] -= g * (dnum * den[k] - num[k] * dden) / d2;
          }
        }
      });
}

// Boundary-branch loss dispatched on cfg.kind. With target None the branch is
// unsupervised: a constant 0 with no graph edge is returned.
inline Tensor boundary_loss(const Tensor& p_b, std::span<const double> y_b, const LossConfig& cfg) {
  cfg.validate();
  if (cfg.target == BoundaryTarget::None) return Tensor::scalar(0.0);
  switch (cfg.kind) {
    case BoundaryLossKind::Bce: return bce(p_b, y_b);
    case BoundaryLossKind::WeightedBce: return weighted_bce(p_b, y_b);
    case BoundaryLossKind::Dice: return dice(p_b, y_b, cfg.epsilon);
    case BoundaryLossKind::DiceBce:
      return add(dice(p_b, y_b, cfg.epsilon), scale(bce(p_b, y_b), cfg.lambda));
  }
  throw ConfigError("unknown boundary loss kind");
}

// Class-specific per-pixel BCE: for item n only channel classes[n] of the
// N x K x H x W logits is supervised.
inline Tensor mask_loss(const Tensor& logits, std::span<const std::size_t> classes,
                        std::span<const double> targets) {
  if (logits.rank() != 4) throw ShapeError("mask_loss: logits must be N x K x H x W");
  for (std::size_t c : classes) {
    if (c >= logits.dim(1)) {
      throw ShapeError("mask_loss: class " + std::to_string(c) + " is not below K=" +
                       std::to_string(logits.dim(1)));
    }
  }
  return bce(sigmoid(select_channels(logits, classes)), targets);
}

}  // namespace bmlab
