/// \file optimizer.hpp
/// Classical momentum with decoupled weight decay, global-norm gradient
/// clipping and a linear-warmup / cosine-annealing learning-rate schedule.
#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/error.hpp"

namespace omniembed {

/// Production defaults: lr annealed between 1e-5 and 6e-6, weight decay 1e-4.
struct OptimizerConfig {
  double lr_max = 1e-5;
  double lr_min = 6e-6;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double clip_norm = 1.0;

  void validate() const {
    if (!(lr_max >= 0.0) || !(lr_min >= 0.0) || lr_min > lr_max)
      throw Error(ErrorCode::config, "optimizer: need 0 <= lr_min <= lr_max", "optimizer.lr_min");
    if (!(clip_norm > 0.0)) throw Error(ErrorCode::config, "optimizer: clip_norm must be positive", "optimizer.clip_norm");
    if (!(weight_decay >= 0.0)) throw Error(ErrorCode::config, "optimizer: weight_decay must be >= 0", "optimizer.weight_decay");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw Error(ErrorCode::config, "optimizer: momentum must be in [0, 1)", "optimizer.momentum");
    if (total_steps == 0) throw Error(ErrorCode::config, "optimizer: total_steps must be >= 1", "optimizer.total_steps");
  }
};

/// Linear ramp 0 -> lr_max over the warmup, then cosine from lr_max down to
/// lr_min at total_steps; lr_min afterwards.
inline double lr_schedule(std::size_t step, const OptimizerConfig& cfg) {
  if (step < cfg.warmup_steps)
    return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.total_steps || cfg.total_steps <= cfg.warmup_steps) return cfg.lr_min;
  if (step == cfg.warmup_steps) return cfg.lr_max;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct ParamSlot {
  std::string name;
  std::span<double> value;
  std::span<const double> grad;
  bool decay = true;
};

struct StepInfo {
  double lr = 0.0;
  double grad_norm = 0.0;          // before clipping
  double clipped_grad_norm = 0.0;  // after clipping
};

class MomentumOptimizer {
 public:
  MomentumOptimizer() = default;
  explicit MomentumOptimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::size_t step() const noexcept { return step_; }

  /// Clips the joint gradient to clip_norm, updates the momentum buffers and
  /// applies p -= lr * (buffer + wd * p) (weight decay only where enabled).
  StepInfo apply(std::span<const ParamSlot> slots) {
    StepInfo info;
    double sq = 0.0;
    for (const auto& s : slots) {
      if (s.value.size() != s.grad.size())
        throw Error(ErrorCode::dimension_mismatch, "optimizer: gradient shape mismatch for '" + s.name + "'");
      sq += dot(s.grad, s.grad);
    }
    info.grad_norm = std::sqrt(sq);
    if (!std::isfinite(info.grad_norm)) throw Error(ErrorCode::numeric, "optimizer: non-finite gradient");
    const double scale = info.grad_norm > cfg_.clip_norm ? cfg_.clip_norm / info.grad_norm : 1.0;
    info.clipped_grad_norm = info.grad_norm * scale;
    info.lr = lr_schedule(step_, cfg_);
    for (const auto& s : slots) {
      auto& buf = buffers_[s.name];
      if (buf.size() != s.value.size()) buf.assign(s.value.size(), 0.0);
      for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] = cfg_.momentum * buf[i] + scale * s.grad[i];
        const double decay = s.decay ? cfg_.weight_decay * s.value[i] : 0.0;
        s.value[i] -= info.lr * (buf[i] + decay);
      }
    }
    ++step_;
    return info;
  }

 private:
  OptimizerConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, Vector> buffers_;
};

}  // namespace omniembed
