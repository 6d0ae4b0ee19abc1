#pragma once

// First-order optimizers. Both minimize: callers pass the gradient of the
// loss, i.e. the negated objective gradient.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcpo/error.hpp"

namespace mcpo {

enum class OptimizerKind { adamw, sgd };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

inline OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adamw") return OptimizerKind::adamw;
  if (name == "sgd") return OptimizerKind::sgd;
  fail(ErrorCode::invalid_argument, "unknown optimizer '" + std::string(name) + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step = 0;

  explicit OptimizerState(std::size_t n = 0) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

/// One update. AdamW uses bias-corrected moments and decoupled weight decay;
/// moments advance even when the gradient is zero.
inline void optimizer_step(const OptimizerConfig& cfg, OptimizerState& state, std::span<double> params,
                           std::span<const double> grad) {
  if (grad.size() != params.size()) fail(ErrorCode::invalid_argument, "gradient/parameter size mismatch");
  ++state.step;
  const double lr = cfg.learning_rate;
  if (cfg.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = cfg.weight_decay == 0.0 ? grad[i] : grad[i] + cfg.weight_decay * params[i];
      params[i] = params[i] - lr * g;
    }
    return;
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad[i];
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon);
    if (lr == 0.0) continue;
    params[i] -= lr * (update + cfg.weight_decay * params[i]);
  }
}

}  // namespace mcpo
