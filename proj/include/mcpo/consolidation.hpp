#pragma once

// Hinge-KL consolidation on mastered prompts.
//
// Token drift d = log pi_theta - log pi_anchor; the k3 estimator
// e^d - d - 1 approximates the reverse KL per token. The hinge subtracts
// k3(+-delta) so the penalty is zero on [-delta, delta] and continuous at
// the budget edges.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mcpo/autodiff.hpp"
#include "mcpo/error.hpp"
#include "mcpo/objective.hpp"

namespace mcpo {

inline constexpr double k3_overflow_limit = 700.0;

template <Scalar S>
S k3(const S& d) {
  using std::exp;
  if (!(value_of(d) <= k3_overflow_limit)) fail(ErrorCode::overflow, "k3 drift " + std::to_string(value_of(d)));
  return exp(d) - d - S(1.0);
}

inline double k3(double d) { return k3<double>(d); }

struct HingeKLConfig {
  double delta = 0.01;
  double beta = 1.0;
  double c_plus = 0.0;
  double c_minus = 0.0;

  HingeKLConfig() : HingeKLConfig(0.01, 1.0) {}
  HingeKLConfig(double delta_, double beta_) : delta(delta_), beta(beta_) {
    if (!(delta > 0.0)) fail(ErrorCode::invalid_argument, "delta must be > 0");
    if (!(beta >= 0.0)) fail(ErrorCode::invalid_argument, "beta must be >= 0");
    c_plus = k3(delta);
    c_minus = k3(-delta);
  }
};

inline double token_drift(double current_logprob, double anchor_logprob) { return current_logprob - anchor_logprob; }

/// phi(d): 0 inside the budget (boundary included), k3(d) - c(+-) outside.
template <Scalar S>
S hinge_penalty(const S& d, const HingeKLConfig& cfg) {
  const double dv = value_of(d);
  if (std::abs(dv) <= cfg.delta) return S(0.0);
  return k3(d) - S(dv > 0.0 ? cfg.c_plus : cfg.c_minus);
}

inline double hinge_penalty(double d, const HingeKLConfig& cfg) { return hinge_penalty<double>(d, cfg); }

/// Groups with p = 1 together with per-response anchor log-probs.
struct MasteredSet {
  std::vector<RolloutGroup> groups;
  std::vector<std::vector<std::vector<double>>> anchor_logprobs;

  bool empty() const { return groups.empty(); }

  void add(const RolloutGroup& group, std::vector<std::vector<double>> anchor) {
    if (!group.mastered()) fail(ErrorCode::invalid_argument, "group " + group.task_id + " is not mastered");
    groups.push_back(group);
    anchor_logprobs.push_back(std::move(anchor));
  }
};

/// Builds a MasteredSet with anchors evaluated under `anchor`.
inline MasteredSet make_mastered_set(std::span<const RolloutGroup> groups, std::span<const std::size_t> mastered,
                                     const PolicyParams& anchor) {
  MasteredSet set;
  for (const std::size_t k : mastered) {
    std::vector<std::vector<double>> lp;
    for (const auto& r : groups[k].responses) lp.push_back(logprobs(anchor, groups[k].context, r));
    set.add(groups[k], std::move(lp));
  }
  return set;
}

/// D_HKL: mean over mastered prompts, mean over their responses, token-mean
/// of phi(d_t).
template <class Source>
scalar_of<Source> hinge_kl(Source& source, const MasteredSet& mastered, const HingeKLConfig& cfg,
                           ObjectiveStats* stats = nullptr) {
  using S = scalar_of<Source>;
  if (mastered.empty()) return S(0.0);
  S total(0.0);
  for (std::size_t g = 0; g < mastered.groups.size(); ++g) {
    const RolloutGroup& group = mastered.groups[g];
    S prompt_sum(0.0);
    for (std::size_t i = 0; i < group.responses.size(); ++i) {
      const auto& anchor = mastered.anchor_logprobs[g][i];
      const auto lp = eval_logprobs(source, group.context, group.responses[i]);
      if (anchor.size() != lp.size()) fail(ErrorCode::invalid_argument, "anchor misaligned for " + group.task_id);
      S token_sum(0.0);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        const S d = lp[t] - S(anchor[t]);
        if (stats) {
          ++stats->hkl_tokens;
          if (std::abs(value_of(d)) > cfg.delta) ++stats->hkl_outside_budget;
        }
        token_sum += hinge_penalty(d, cfg);
      }
      prompt_sum += token_sum * S(1.0 / static_cast<double>(lp.size()));
    }
    total += prompt_sum * S(1.0 / static_cast<double>(group.responses.size()));
  }
  return total * S(1.0 / static_cast<double>(mastered.groups.size()));
}

inline double hinge_kl_divergence(const PolicyParams& current, const MasteredSet& mastered, const HingeKLConfig& cfg) {
  return hinge_kl(current, mastered, cfg);
}

template <Scalar S>
struct TotalObjective {
  S total;
  S reward;
  S hkl;
};

/// J_MCPO = mean over the batch of the MCPO-advantage surrogate
///          - beta * D_HKL over the mastered set.
/// Zero-variance groups stay in the batch mean but contribute 0.
template <class Source>
TotalObjective<scalar_of<Source>> mcpo_total(Source& source, std::span<const RolloutGroup> groups,
                                             std::span<const std::size_t> selection, const MasteredSet& mastered,
                                             const ClipConfig& clip, const HingeKLConfig& hkl,
                                             ObjectiveStats* stats = nullptr) {
  using S = scalar_of<Source>;
  const S reward = batch_surrogate(source, groups, selection, Estimator::mcpo, clip, stats);
  const S penalty = hkl.beta == 0.0 ? S(0.0) : hinge_kl(source, mastered, hkl, stats);
  return {reward - S(hkl.beta) * penalty, reward, penalty};
}

inline TotalObjective<double> mcpo_total_objective(const PolicyParams& current, std::span<const RolloutGroup> groups,
                                                   const MasteredSet& mastered, const ClipConfig& clip,
                                                   const HingeKLConfig& hkl) {
  std::vector<std::size_t> all(groups.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  return mcpo_total(current, groups, all, mastered, clip, hkl);
}

}  // namespace mcpo
