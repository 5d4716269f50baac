#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/model.hpp"
#include "bmlab/params.hpp"
#include "bmlab/rng.hpp"

namespace bmlab {

struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch_size = 1;  // scenes per step
  double base_lr = -1.0;       // < 0 means 0.02 * batch_size / 16 (linear scaling)
  double momentum = 0.9;
  double weight_decay = 1e-4;
  // Step decay keeps the 60k/80k-of-90k shape at any budget.
  double decay1_fraction = 2.0 / 3.0;
  double decay2_fraction = 8.0 / 9.0;
  double decay1_factor = 0.1;
  double decay2_factor = 0.01;
  std::uint64_t seed = 0;

  double effective_base_lr() const {
    return base_lr >= 0.0 ? base_lr : 0.02 * static_cast<double>(batch_size) / 16.0;
  }

  std::size_t decay1_iter() const { return static_cast<std::size_t>(decay1_fraction * static_cast<double>(iterations)); }
  std::size_t decay2_iter() const { return static_cast<std::size_t>(decay2_fraction * static_cast<double>(iterations)); }

  double lr_at(std::size_t it) const {
    const double base = effective_base_lr();
    if (it >= decay2_iter()) return base * decay2_factor;
    if (it >= decay1_iter()) return base * decay1_factor;
    return base;
  }

  void validate() const {
    if (iterations == 0) throw ConfigError("train.iterations must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(0.0 < decay1_fraction && decay1_fraction < decay2_fraction && decay2_fraction < 1.0)) {
      throw ConfigError("train decay fractions must satisfy 0 < first < second < 1");
    }
  }
};

struct TrainResult {
  std::vector<LossReport> curve;  // one entry per iteration
};

using TrainProgress = std::function<void(std::size_t iteration, const LossReport&)>;

// Sequential SGD over shuffled epochs of `data`. Each step averages
// L_mask + L_b over every instance in the batch.
inline TrainResult train(Model& model, const TrainConfig& cfg, const std::vector<SceneSample>& data,
                         const TrainProgress& progress = {}) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: dataset is empty");
  for (const auto& s : data) {
    for (const auto& inst : s.instances) {
      if (inst.cls >= model.head.num_classes) {
        throw ConfigError("train: dataset class " + std::to_string(inst.cls) + " exceeds head.num_classes=" +
                          std::to_string(model.head.num_classes));
      }
    }
  }
  SplitMix64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  auto next_scene = [&]() {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  TrainResult res;
  res.curve.reserve(cfg.iterations);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<std::size_t> batch;
    std::size_t total_instances = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(next_scene());
      total_instances += data[batch.back()].instances.size();
    }
    Tensor loss;
    LossReport rep;
    for (std::size_t idx : batch) {
      const auto& scene = data[idx];
      if (scene.instances.empty()) continue;
      SceneLoss sl = scene_loss(model, scene);
      const double w = static_cast<double>(scene.instances.size()) / static_cast<double>(total_instances);
      Tensor weighted = scale(sl.total, w);
      loss = loss.defined() ? add(loss, weighted) : weighted;
      rep.mask_loss += w * sl.mask_loss;
      rep.boundary_loss += w * sl.boundary_loss;
    }
    if (!loss.defined()) throw ContractError("train: sampled batch has no instances");
    rep.total = loss.item();
    if (!std::isfinite(rep.total)) {
      throw NumericalError("training diverged at iteration " + std::to_string(it) + ": loss is " +
                           std::to_string(rep.total) + " (lr " + std::to_string(cfg.lr_at(it)) + ")");
    }
    backward(loss, model.params);
    sgd_step(model.params, cfg.lr_at(it), cfg.momentum, cfg.weight_decay);
    res.curve.push_back(rep);
    if (progress) progress(it, rep);
  }
  return res;
}

}  // namespace bmlab
