#pragma once

// Adam and AdamW with a linear warmup schedule.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "autograd.hpp"

namespace molem {

enum class OptimizerKind { Adam, AdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double learning_rate = 3e-4;
  double warmup_ratio = 0.1;
  std::size_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // ignored by Adam
  bool linear_decay = false;   // after warmup, anneal linearly to 0 at total_steps
};

struct OptimizerState {
  OptimizerConfig config;
  std::size_t step_count = 0;
  std::vector<Parameter*> params;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

/// Learning rate in effect for the update taken at `step` (0-based): ramps
/// linearly from 0 over the warmup steps, constant afterwards unless
/// linear_decay is set.
inline double scheduled_lr(const OptimizerConfig& cfg, std::size_t step) {
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(cfg.total_steps) - 1e-9));
  if (step < warmup) return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
  if (!cfg.linear_decay || step >= cfg.total_steps) return cfg.linear_decay ? 0.0 : cfg.learning_rate;
  return cfg.learning_rate * static_cast<double>(cfg.total_steps - step) / static_cast<double>(cfg.total_steps - warmup);
}

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) { state_.config = cfg; }

  void add(Parameter& p) {
    if (p.frozen) throw ContractViolation("cannot register frozen parameter '" + p.name + "' with an optimizer");
    state_.params.push_back(&p);
    state_.first_moment.emplace_back(p.value.shape, 0.0);
    state_.second_moment.emplace_back(p.value.shape, 0.0);
  }

  void add_all(std::span<Parameter* const> ps) {
    for (Parameter* p : ps) add(*p);
  }

  const OptimizerState& state() const { return state_; }
  std::size_t step_count() const { return state_.step_count; }
  double current_lr() const { return scheduled_lr(state_.config, state_.step_count); }

  void zero_grad() {
    for (Parameter* p : state_.params) p->zero_grad();
  }

  /// Updates every registered parameter from its own accumulated gradient.
  /// A parameter that received no gradient is treated as having zero grad.
  void step() {
    std::vector<const Tensor*> grads;
    grads.reserve(state_.params.size());
    std::vector<Tensor> zeros;
    zeros.reserve(state_.params.size());
    for (Parameter* p : state_.params) {
      if (p->has_grad()) {
        grads.push_back(&p->grad);
      } else {
        zeros.emplace_back(p->value.shape, 0.0);
        grads.push_back(&zeros.back());
      }
    }
    apply(grads);
  }

  /// Updates with explicitly supplied gradients, one per registered parameter
  /// in registration order.
  void step(std::span<const Tensor> grads) {
    require(grads.size() == state_.params.size(), "gradient count does not match registered parameters");
    std::vector<const Tensor*> ptrs;
    for (const Tensor& g : grads) ptrs.push_back(&g);
    apply(ptrs);
  }

 private:
  void apply(const std::vector<const Tensor*>& grads) {
    const OptimizerConfig& c = state_.config;
    const double lr = current_lr();
    const double t = static_cast<double>(state_.step_count + 1);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < state_.params.size(); ++i) {
      Parameter& p = *state_.params[i];
      const Tensor& g = *grads[i];
      require(g.shape == p.value.shape, "gradient shape mismatch for '" + p.name + "'");
      if (p.frozen) throw InvariantViolation("optimizer step on frozen parameter '" + p.name + "'");
      Tensor& m = state_.first_moment[i];
      Tensor& v = state_.second_moment[i];
      for (std::size_t j = 0; j < p.value.data.size(); ++j) {
        const double gj = g.data[j];
        m.data[j] = c.beta1 * m.data[j] + (1.0 - c.beta1) * gj;
        v.data[j] = c.beta2 * v.data[j] + (1.0 - c.beta2) * gj * gj;
        if (c.kind == OptimizerKind::AdamW) p.value.data[j] -= lr * c.weight_decay * p.value.data[j];
        const double mhat = m.data[j] / bc1;
        const double vhat = v.data[j] / bc2;
        p.value.data[j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
      }
    }
    ++state_.step_count;
  }

  OptimizerState state_;
};

}  // namespace molem
