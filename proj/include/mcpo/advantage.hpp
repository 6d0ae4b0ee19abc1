#pragma once

// Group-relative advantages for binary rewards.
//
// Both estimators standardize with the population (divide-by-G) standard
// deviation. With binary rewards that std is exactly sqrt(p(1-p)), which is
// what makes the per-prompt weights below come out in closed form.

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mcpo/error.hpp"
#include "mcpo/task_env.hpp"

namespace mcpo {

struct RolloutGroup {
  std::string task_id;
  std::size_t task_index = 0;
  TokenSeq context;
  std::vector<TokenSeq> responses;
  std::vector<int> rewards;
  std::vector<std::vector<double>> old_logprobs;

  std::size_t group_size() const { return responses.size(); }
  int correct_count() const { return std::accumulate(rewards.begin(), rewards.end(), 0); }
  bool mastered() const { return !rewards.empty() && correct_count() == static_cast<int>(rewards.size()); }
  bool all_wrong() const { return !rewards.empty() && correct_count() == 0; }
};

inline void validate(const RolloutGroup& g) {
  if (g.responses.size() < 2) fail(ErrorCode::invalid_argument, "rollout group needs G >= 2");
  if (g.rewards.size() != g.responses.size() || g.old_logprobs.size() != g.responses.size()) {
    fail(ErrorCode::invalid_argument, "rollout group arrays disagree on G");
  }
  for (std::size_t i = 0; i < g.responses.size(); ++i) {
    if (g.old_logprobs[i].size() != g.responses[i].size()) {
      fail(ErrorCode::invalid_argument, "old_logprobs misaligned with response " + std::to_string(i));
    }
    if (g.rewards[i] != 0 && g.rewards[i] != 1) fail(ErrorCode::invalid_argument, "non-binary reward");
  }
}

enum class Estimator { grpo, mcpo };

inline std::string_view to_string(Estimator e) { return e == Estimator::grpo ? "grpo" : "mcpo"; }

struct AdvantageSet {
  Estimator estimator = Estimator::grpo;
  std::vector<double> values;
  double precision = 0.0;
  bool zero_variance = false;
  double scale_used = 1.0;
};

/// Fraction of correct responses, p(x).
inline double rollout_precision(std::span<const int> rewards) {
  if (rewards.empty()) fail(ErrorCode::empty_group, "rollout_precision of an empty group");
  int correct = 0;
  for (const int r : rewards) correct += (r == 1) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(rewards.size());
}

/// 1 on p <= 0.5, 2 sqrt(p(1-p)) above. Vanishes at p = 1, so callers gate
/// zero-variance groups before dividing by it.
inline double mcpo_scale(double p) {
  if (p <= 0.5) return 1.0;
  return 2.0 * std::sqrt(p * (1.0 - p));
}

/// Analytical per-prompt weight multiplying the discriminative term.
inline double query_weight(Estimator estimator, double p) {
  const double w = std::sqrt(p * (1.0 - p));
  if (estimator == Estimator::mcpo && p > 0.5) return 0.5;
  return w;
}

namespace advantage_detail {

inline AdvantageSet standardize(const RolloutGroup& group, Estimator estimator) {
  const std::size_t G = group.rewards.size();
  if (G < 2) fail(ErrorCode::invalid_argument, "advantages need G >= 2");
  AdvantageSet out;
  out.estimator = estimator;
  out.precision = rollout_precision(group.rewards);
  out.values.assign(G, 0.0);
  if (out.precision == 0.0 || out.precision == 1.0) {
    out.zero_variance = true;
    out.scale_used = 1.0;
    return out;
  }
  double mean = 0.0;
  for (const int r : group.rewards) mean += r;
  mean /= static_cast<double>(G);
  double var = 0.0;
  for (const int r : group.rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(G);
  out.scale_used = estimator == Estimator::mcpo ? mcpo_scale(out.precision) : 1.0;
  const double denom = std::sqrt(var) * out.scale_used;
  for (std::size_t i = 0; i < G; ++i) out.values[i] = (group.rewards[i] - mean) / denom;
  return out;
}

}  // namespace advantage_detail

inline AdvantageSet grpo_advantages(const RolloutGroup& group) {
  return advantage_detail::standardize(group, Estimator::grpo);
}

inline AdvantageSet mcpo_advantages(const RolloutGroup& group) {
  return advantage_detail::standardize(group, Estimator::mcpo);
}

inline AdvantageSet compute_advantages(const RolloutGroup& group, Estimator estimator) {
  return advantage_detail::standardize(group, estimator);
}

}  // namespace mcpo
