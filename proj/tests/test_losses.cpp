#include <gtest/gtest.h>

#include <cmath>

#include "bmlab/bmlab.hpp"
#include "oracles.hpp"

using namespace bmlab;

namespace {

Tensor probs(std::vector<double> v, bool rg = false) {
  const std::size_t n = v.size();
  return Tensor(Shape{1, 1, 1, n}, std::move(v), rg);
}

}  // namespace

TEST(Bce, Examples) {
  EXPECT_NEAR(bce(probs({0.5, 0.5, 0.5}), std::vector<double>{1, 0, 1}).item(), std::log(2.0), 1e-12);
  EXPECT_LE(bce(probs({1.0, 0.0}), std::vector<double>{1, 0}).item(), 1e-6);
  EXPECT_NEAR(bce(probs({0.9, 0.1}), std::vector<double>{1, 0}).item(), -std::log(0.9), 1e-12);
  EXPECT_THROW(bce(probs({0.5}), std::vector<double>{1, 0}), ShapeError);
}

TEST(WeightedBce, Examples) {
  const std::vector<double> balanced{1, 0, 1, 0};
  const Tensor p = probs({0.3, 0.6, 0.8, 0.1});
  EXPECT_NEAR(weighted_bce(p, balanced).item(), 0.5 * bce(p, balanced).item(), 1e-15);
  EXPECT_NEAR(weighted_bce(probs({0.5, 0.5, 0.5, 0.5}), std::vector<double>{1, 0, 0, 0}).item(),
              0.375 * std::log(2.0), 1e-12);
  EXPECT_LE(weighted_bce(probs({1, 0, 0}), std::vector<double>{1, 0, 0}).item(), 1e-6);
}

TEST(WeightedBce, DegenerateTargetsFallBackToBce) {
  const Tensor p = probs({0.3, 0.6, 0.8});
  for (const std::vector<double>& y : {std::vector<double>{1, 1, 1}, std::vector<double>{0, 0, 0}}) {
    EXPECT_EQ(weighted_bce(p, y).item(), bce(p, y).item());
  }
}

TEST(WeightedBce, BetaIsPerInstance) {
  // instance 0 balanced, instance 1 all background
  Tensor p(Shape{2, 1, 1, 2}, {0.5, 0.5, 0.5, 0.5});
  const double got = weighted_bce(p, std::vector<double>{1, 0, 0, 0}).item();
  EXPECT_NEAR(got, (0.5 * std::log(2.0) * 2 + std::log(2.0) * 2) / 4.0, 1e-12);
}

TEST(Dice, Examples) {
  for (const std::vector<double>& y :
       {std::vector<double>{1, 0, 1, 1}, std::vector<double>{0, 0, 0, 0}, std::vector<double>{1, 1, 1, 1}}) {
    EXPECT_EQ(dice(probs(y), y).item(), 0.0);
  }
  EXPECT_NEAR(dice(probs({0, 0, 0, 0}), std::vector<double>{1, 1, 1, 0}, 1.0).item(), 0.75, 1e-12);
  EXPECT_NEAR(dice(probs({0.5, 0.5}), std::vector<double>{1, 0}, 1.0).item(), 0.2, 1e-12);
}

TEST(Dice, AveragedPerInstance) {
  Tensor p(Shape{2, 1, 1, 2}, {0.5, 0.5, 1.0, 0.0});
  EXPECT_NEAR(dice(p, std::vector<double>{1, 0, 1, 0}, 1.0).item(), 0.1, 1e-12);
}

TEST(BoundaryLoss, Dispatch) {
  const Tensor p = probs({0.5, 0.5});
  const std::vector<double> y{1, 0};
  LossConfig cfg;
  EXPECT_NEAR(boundary_loss(p, y, cfg).item(), 0.2 + std::log(2.0), 1e-12);
  EXPECT_LE(boundary_loss(probs({1, 0}), y, cfg).item(), 1e-6);
  cfg.kind = BoundaryLossKind::Bce;
  EXPECT_EQ(boundary_loss(p, y, cfg).item(), bce(p, y).item());
  cfg.kind = BoundaryLossKind::Dice;
  EXPECT_EQ(boundary_loss(p, y, cfg).item(), dice(p, y).item());
  cfg.kind = BoundaryLossKind::WeightedBce;
  EXPECT_EQ(boundary_loss(p, y, cfg).item(), weighted_bce(p, y).item());
  cfg.kind = BoundaryLossKind::DiceBce;
  cfg.lambda = 2.5;
  EXPECT_NEAR(boundary_loss(p, y, cfg).item(), dice(p, y).item() + 2.5 * bce(p, y).item(), 1e-15);
}

TEST(BoundaryLoss, DiceBceIsSumToOneUlp) {
  SplitMix64 rng(17);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> pv(20), y(20);
    for (std::size_t i = 0; i < 20; ++i) {
      pv[i] = rng.uniform(0.01, 0.99);
      y[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
    const Tensor p = probs(pv);
    const double d = dice(p, y).item(), b = bce(p, y).item();
    const double db = boundary_loss(p, y, LossConfig{}).item();
    EXPECT_LE(std::abs(db - (d + b)), std::nextafter(d + b, INFINITY) - (d + b));
  }
}

TEST(BoundaryLoss, NoneTargetIsDetachedZero) {
  Tensor p = probs({0.2, 0.7}, true);
  LossConfig cfg;
  cfg.target = BoundaryTarget::None;
  Tensor l = boundary_loss(p, std::vector<double>{}, cfg);
  EXPECT_EQ(l.item(), 0.0);
  EXPECT_FALSE(l.requires_grad());
}

TEST(BoundaryLoss, ConfigValidation) {
  LossConfig cfg;
  cfg.epsilon = 0.0;
  EXPECT_THROW(boundary_loss(probs({0.5}), std::vector<double>{1}, cfg), ConfigError);
  cfg.epsilon = 1.0;
  cfg.lambda = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(MaskLoss, ExamplesAndClassIsolation) {
  const std::size_t n = 28 * 28;
  std::vector<double> target(n, 0.0);
  for (std::size_t i = 0; i < n; i += 3) target[i] = 1.0;
  Tensor logits(Shape{1, 3, 28, 28}, 0.0, true);
  for (std::size_t i = 0; i < n; ++i) logits[n + i] = target[i] > 0.5 ? 20.0 : -20.0;
  const std::vector<std::size_t> cls{1};
  Tensor l = mask_loss(logits, cls, target);
  EXPECT_LE(l.item(), 1e-6);
  backward(l);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(logits.grad()[i], 0.0);
    EXPECT_EQ(logits.grad()[2 * n + i], 0.0);
  }
  Tensor zeros(Shape{1, 3, 28, 28}, 0.0);
  EXPECT_NEAR(mask_loss(zeros, cls, target).item(), std::log(2.0), 1e-12);
  const std::vector<std::size_t> bad{3};
  EXPECT_THROW(mask_loss(zeros, bad, target), ShapeError);
}

TEST(LossGradients, FiniteDifferences) {
  SplitMix64 rng(41);
  Tensor p = oracle::random_tensor(Shape{2, 1, 4, 4}, rng, 0.05, 0.95);
  std::vector<double> y(32);
  for (std::size_t i = 0; i < 32; ++i) y[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  for (auto kind : {BoundaryLossKind::Bce, BoundaryLossKind::WeightedBce, BoundaryLossKind::Dice,
                    BoundaryLossKind::DiceBce}) {
    LossConfig cfg;
    cfg.kind = kind;
    auto r = oracle::grad_check({p}, [&] { return boundary_loss(p, y, cfg); }, 32, 3);
    EXPECT_LT(r.max_rel_error, 1e-5) << to_string(kind);
  }
  Tensor logits = oracle::random_tensor(Shape{2, 3, 28, 28}, rng, -2, 2);
  std::vector<double> t(2 * 28 * 28);
  for (auto& v : t) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const std::vector<std::size_t> cls{2, 0};
  auto r = oracle::grad_check({logits}, [&] { return mask_loss(logits, cls, t); }, 40, 4);
  EXPECT_LT(r.max_rel_error, 1e-5);
}
