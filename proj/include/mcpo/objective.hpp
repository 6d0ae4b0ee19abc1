#pragma once

// Clipped group-relative surrogates and their discriminative decomposition.
//
// Everything here is templated on the scalar type so that the same
// expression evaluates on plain doubles or on an autodiff tape. The
// log-probability source is either a PolicyParams (double evaluation) or a
// LossGraph (tape evaluation).

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcpo/advantage.hpp"
#include "mcpo/autodiff.hpp"
#include "mcpo/error.hpp"
#include "mcpo/policy.hpp"

namespace mcpo {

enum class Aggregation { seq_mean_token_mean, token_mean };

inline std::string_view to_string(Aggregation a) {
  return a == Aggregation::seq_mean_token_mean ? "seq-mean-token-mean" : "token-mean";
}

inline Aggregation parse_aggregation(std::string_view name) {
  if (name == "seq-mean-token-mean") return Aggregation::seq_mean_token_mean;
  if (name == "token-mean") return Aggregation::token_mean;
  fail(ErrorCode::invalid_argument, "unknown aggregation '" + std::string(name) + "'");
}

struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.28;
  Aggregation aggregation = Aggregation::seq_mean_token_mean;
};

inline void validate(const ClipConfig& c) {
  if (!(c.eps_low > 0.0 && c.eps_low < 1.0)) fail(ErrorCode::invalid_argument, "eps_low must lie in (0,1)");
  if (!(c.eps_high > 0.0)) fail(ErrorCode::invalid_argument, "eps_high must be > 0");
}

struct SurrogateTerms {
  std::vector<std::vector<double>> per_token_ratios;
  std::vector<double> per_response_scores;
  double objective_value = 0.0;
  double clipped_token_fraction = 0.0;
};

/// Token counters accumulated while building objectives.
struct ObjectiveStats {
  std::size_t tokens = 0;
  std::size_t clipped_tokens = 0;
  std::size_t hkl_tokens = 0;
  std::size_t hkl_outside_budget = 0;

  void add(const ObjectiveStats& o) {
    tokens += o.tokens;
    clipped_tokens += o.clipped_tokens;
    hkl_tokens += o.hkl_tokens;
    hkl_outside_budget += o.hkl_outside_budget;
  }
};

// Log-prob sources.
inline std::vector<double> eval_logprobs(const PolicyParams& p, std::span<const Token> ctx,
                                         std::span<const Token> resp) {
  return logprobs(p, ctx, resp);
}
inline std::vector<ad::Var> eval_logprobs(LossGraph& g, std::span<const Token> ctx, std::span<const Token> resp) {
  return g.logprobs(ctx, resp);
}

template <class Source>
using scalar_of = typename decltype(eval_logprobs(std::declval<Source&>(), std::span<const Token>{},
                                                  std::span<const Token>{}))::value_type;

namespace objective_detail {

inline constexpr double max_log_gap = 700.0;

template <Scalar S>
S ratio_of(const S& current_lp, double old_lp) {
  using std::exp;
  const double gap = value_of(current_lp) - old_lp;
  if (!(std::abs(gap) <= max_log_gap)) {
    fail(ErrorCode::non_finite_ratio, "log-prob gap " + std::to_string(gap));
  }
  return exp(current_lp - S(old_lp));
}

}  // namespace objective_detail

/// r_{i,t} = exp(log pi_theta - log pi_old) for every token of the group.
inline std::vector<std::vector<double>> importance_ratios(const PolicyParams& current, const RolloutGroup& group) {
  std::vector<std::vector<double>> out;
  out.reserve(group.responses.size());
  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    const auto lp = logprobs(current, group.context, group.responses[i]);
    std::vector<double> r;
    r.reserve(lp.size());
    for (std::size_t t = 0; t < lp.size(); ++t) r.push_back(objective_detail::ratio_of(lp[t], group.old_logprobs[i][t]));
    out.push_back(std::move(r));
  }
  return out;
}

/// s+ = mean_t min(r_t, 1 + eps_high).
template <Scalar S>
S clipped_score_pos(std::span<const S> ratios, const ClipConfig& cfg) {
  if (ratios.empty()) fail(ErrorCode::invalid_argument, "score of an empty response");
  S acc(0.0);
  for (const S& r : ratios) acc += smin(r, S(1.0 + cfg.eps_high));
  return acc * S(1.0 / static_cast<double>(ratios.size()));
}

/// s- = mean_t max(r_t, 1 - eps_low).
template <Scalar S>
S clipped_score_neg(std::span<const S> ratios, const ClipConfig& cfg) {
  if (ratios.empty()) fail(ErrorCode::invalid_argument, "score of an empty response");
  S acc(0.0);
  for (const S& r : ratios) acc += smax(r, S(1.0 - cfg.eps_low));
  return acc * S(1.0 / static_cast<double>(ratios.size()));
}

inline double clipped_score_pos(std::span<const double> ratios, const ClipConfig& cfg) {
  return clipped_score_pos<double>(ratios, cfg);
}
inline double clipped_score_neg(std::span<const double> ratios, const ClipConfig& cfg) {
  return clipped_score_neg<double>(ratios, cfg);
}

/// min(r A, clip(r, 1-eps_low, 1+eps_high) A), the per-token PPO term.
template <Scalar S>
S clipped_token_term(const S& ratio, double advantage, const ClipConfig& cfg) {
  const S a(advantage);
  return smin(ratio * a, sclamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a);
}

/// Group surrogate J(x) under the configured aggregation. Zero-variance
/// groups contribute the constant 0 and record nothing on a tape.
template <class Source>
scalar_of<Source> group_surrogate(Source& source, const RolloutGroup& group, const AdvantageSet& adv,
                                  const ClipConfig& cfg, ObjectiveStats* stats = nullptr,
                                  SurrogateTerms* terms = nullptr) {
  using S = scalar_of<Source>;
  if (adv.values.size() != group.responses.size()) {
    fail(ErrorCode::invalid_argument, "advantages do not match group size");
  }
  if (adv.zero_variance) {
    if (stats) {
      for (const auto& r : group.responses) stats->tokens += r.size();
    }
    if (terms) {
      for (const auto& r : group.responses) {
        terms->per_token_ratios.emplace_back(r.size(), 1.0);
        terms->per_response_scores.push_back(0.0);
      }
    }
    return S(0.0);
  }
  const double lo = 1.0 - cfg.eps_low;
  const double hi = 1.0 + cfg.eps_high;
  S total(0.0);
  std::size_t token_count = 0;
  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    const auto& resp = group.responses[i];
    if (resp.empty()) fail(ErrorCode::invalid_argument, "empty response in group");
    const auto lp = eval_logprobs(source, group.context, resp);
    const double a = adv.values[i];
    S sum(0.0);
    std::vector<double> ratio_values;
    for (std::size_t t = 0; t < resp.size(); ++t) {
      const S r = objective_detail::ratio_of(lp[t], group.old_logprobs[i][t]);
      sum += clipped_token_term(r, a, cfg);
      const double rv = value_of(r);
      ratio_values.push_back(rv);
      if (stats && ((a > 0.0 && rv > hi) || (a < 0.0 && rv < lo))) ++stats->clipped_tokens;
    }
    token_count += resp.size();
    if (terms) {
      const std::span<const double> rs(ratio_values);
      terms->per_response_scores.push_back(group.rewards[i] == 1 ? clipped_score_pos(rs, cfg)
                                                                 : clipped_score_neg(rs, cfg));
      terms->per_token_ratios.push_back(std::move(ratio_values));
    }
    if (cfg.aggregation == Aggregation::seq_mean_token_mean) {
      total += sum * S(1.0 / static_cast<double>(resp.size()));
    } else {
      total += sum;
    }
  }
  if (stats) stats->tokens += token_count;
  const double norm = cfg.aggregation == Aggregation::seq_mean_token_mean
                          ? static_cast<double>(group.responses.size())
                          : static_cast<double>(token_count);
  const S out = total * S(1.0 / norm);
  if (!std::isfinite(value_of(out))) fail(ErrorCode::non_finite_objective, "surrogate for " + group.task_id);
  return out;
}

inline SurrogateTerms surrogate_objective(const PolicyParams& current, const RolloutGroup& group,
                                          const AdvantageSet& advantages, const ClipConfig& cfg) {
  SurrogateTerms terms;
  ObjectiveStats stats;
  terms.objective_value = group_surrogate(current, group, advantages, cfg, &stats, &terms);
  terms.clipped_token_fraction =
      stats.tokens ? static_cast<double>(stats.clipped_tokens) / static_cast<double>(stats.tokens) : 0.0;
  return terms;
}

/// W(x) * (mean over correct s+ - mean over incorrect s-). Computed from the
/// ratios directly, independent of the advantage pathway.
template <class Source>
scalar_of<Source> group_discriminative(Source& source, const RolloutGroup& group, Estimator estimator,
                                       const ClipConfig& cfg) {
  using S = scalar_of<Source>;
  if (cfg.aggregation != Aggregation::seq_mean_token_mean) {
    fail(ErrorCode::invalid_argument, "discriminative form requires seq-mean-token-mean");
  }
  const double p = rollout_precision(group.rewards);
  if (p == 0.0 || p == 1.0) fail(ErrorCode::degenerate_group, "p(x) = " + std::to_string(p));
  S pos(0.0), neg(0.0);
  int n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    const auto lp = eval_logprobs(source, group.context, group.responses[i]);
    std::vector<S> ratios;
    ratios.reserve(lp.size());
    for (std::size_t t = 0; t < lp.size(); ++t) {
      ratios.push_back(objective_detail::ratio_of(lp[t], group.old_logprobs[i][t]));
    }
    if (group.rewards[i] == 1) {
      pos += clipped_score_pos<S>(ratios, cfg);
      ++n_pos;
    } else {
      neg += clipped_score_neg<S>(ratios, cfg);
      ++n_neg;
    }
  }
  const S discriminative = pos * S(1.0 / n_pos) - neg * S(1.0 / n_neg);
  return S(query_weight(estimator, p)) * discriminative;
}

inline double discriminative_objective(const PolicyParams& current, const RolloutGroup& group, Estimator estimator,
                                       const ClipConfig& cfg) {
  return group_discriminative(current, group, estimator, cfg);
}

struct FilterPartition {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> mastered;
  std::vector<std::size_t> all_wrong;
};

/// Splits groups by correct count: 1..G-1 kept, G mastered, 0 all-wrong.
inline FilterPartition dynamic_sampling_filter(std::span<const RolloutGroup> groups) {
  FilterPartition out;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const int c = groups[k].correct_count();
    if (c == 0) out.all_wrong.push_back(k);
    else if (c == static_cast<int>(groups[k].rewards.size())) out.mastered.push_back(k);
    else out.kept.push_back(k);
  }
  return out;
}

/// Mean of per-group surrogates over the selected groups (an empty selection
/// gives 0). Used for J_GRPO (all groups) and J_DAPO (kept groups only).
template <class Source>
scalar_of<Source> batch_surrogate(Source& source, std::span<const RolloutGroup> groups,
                                  std::span<const std::size_t> selection, Estimator estimator,
                                  const ClipConfig& cfg, ObjectiveStats* stats = nullptr) {
  using S = scalar_of<Source>;
  if (selection.empty()) return S(0.0);
  S total(0.0);
  for (const std::size_t k : selection) {
    const AdvantageSet adv = compute_advantages(groups[k], estimator);
    total += group_surrogate(source, groups[k], adv, cfg, stats);
  }
  return total * S(1.0 / static_cast<double>(selection.size()));
}

}  // namespace mcpo
