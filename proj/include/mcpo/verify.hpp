#pragma once

// Self-check suites run by `mcpo verify`. Fixed seeds, so a report is
// reproducible.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mcpo/advantage.hpp"
#include "mcpo/consolidation.hpp"
#include "mcpo/objective.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/rng.hpp"
#include "mcpo/trainer.hpp"

namespace mcpo {

struct PropertyResult {
  std::string suite;
  std::string property;
  bool passed = false;
  double worst_error = 0.0;
  double tolerance = 0.0;
};

/// Random instances shared by the suites.
namespace instance {

inline PolicyParams random_tabular(int vocab, int max_len, double scale, RngStream& rng) {
  PolicyParams p = make_tabular_policy(vocab, max_len);
  for (double& w : p.weights) w = scale * standard_normal(rng);
  return p;
}

inline TokenSeq random_tokens(int vocab, int len, RngStream& rng) {
  TokenSeq out(static_cast<std::size_t>(len));
  for (Token& t : out) t = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab)));
  return out;
}

/// A group with responses of length 1..max_len and old log-probs placed so
/// that every ratio is log-uniform in [ratio_lo, ratio_hi]. `correct` < 0
/// draws rewards at random (forced mixed when `mixed`).
inline RolloutGroup random_group(const PolicyParams& policy, int G, RngStream& rng, int correct = -1,
                                 bool mixed = true, double ratio_lo = 0.2, double ratio_hi = 5.0) {
  const int V = policy.shape.vocab_size;
  const int L = policy.shape.max_response_len;
  RolloutGroup g;
  g.task_id = "rand";
  g.context = random_tokens(V, 1 + static_cast<int>(rng.below(3)), rng);
  for (int i = 0; i < G; ++i) {
    const int len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L)));
    g.responses.push_back(random_tokens(V, len, rng));
    const auto lp = logprobs(policy, g.context, g.responses.back());
    std::vector<double> old(lp.size());
    for (std::size_t t = 0; t < lp.size(); ++t) {
      const double log_r = std::log(ratio_lo) + rng.uniform() * (std::log(ratio_hi) - std::log(ratio_lo));
      old[t] = lp[t] - log_r;
    }
    g.old_logprobs.push_back(std::move(old));
  }
  if (correct >= 0) {
    g.rewards.assign(static_cast<std::size_t>(G), 0);
    for (int i = 0; i < correct; ++i) g.rewards[static_cast<std::size_t>(i)] = 1;
    for (int i = G - 1; i > 0; --i) std::swap(g.rewards[i], g.rewards[rng.below(static_cast<std::uint64_t>(i + 1))]);
  } else if (mixed) {
    const int c = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(G - 1)));
    return random_group(policy, G, rng, c, mixed, ratio_lo, ratio_hi);
  } else {
    for (int i = 0; i < G; ++i) g.rewards.push_back(static_cast<int>(rng.below(2)));
  }
  return g;
}

/// Anchor log-probs offset from the current ones by uniform noise in
/// [-spread, spread], so drift lands both inside and outside a budget.
inline std::vector<std::vector<double>> perturbed_anchor(const PolicyParams& policy, const RolloutGroup& g,
                                                         double spread, RngStream& rng) {
  std::vector<std::vector<double>> out;
  for (const auto& r : g.responses) {
    auto lp = logprobs(policy, g.context, r);
    for (double& x : lp) x += spread * (2.0 * rng.uniform() - 1.0);
    out.push_back(std::move(lp));
  }
  return out;
}

}  // namespace instance

inline std::vector<PropertyResult> verify_equivalence(int trials = 1000, double tol = 1e-10) {
  RngStream rng = RngStream(11).derive(1);
  const int sizes[] = {2, 4, 8};
  const ClipConfig clip;
  std::vector<PropertyResult> out;
  for (const Estimator est : {Estimator::grpo, Estimator::mcpo}) {
    double worst = 0.0;
    for (int k = 0; k < trials; ++k) {
      const PolicyParams pol = instance::random_tabular(5, 4, 1.0, rng);
      const RolloutGroup g = instance::random_group(pol, sizes[k % 3], rng);
      const double lhs = surrogate_objective(pol, g, compute_advantages(g, est), clip).objective_value;
      const double rhs = discriminative_objective(pol, g, est, clip);
      worst = std::max(worst, std::abs(lhs - rhs));
    }
    out.push_back({"equivalence", "surrogate == discriminative (" + std::string(to_string(est)) + ")", worst <= tol,
                   worst, tol});
  }
  return out;
}

inline std::vector<PropertyResult> verify_query_weight(double tol = 1e-12) {
  std::vector<PropertyResult> out;
  double worst_law = 0.0;
  double worst_flat = 0.0;
  for (const int G : {4, 8, 16}) {
    for (int c = 1; c < G; ++c) {
      RolloutGroup g;
      g.rewards.assign(static_cast<std::size_t>(G), 0);
      for (int i = 0; i < c; ++i) g.rewards[static_cast<std::size_t>(i)] = 1;
      g.responses.assign(static_cast<std::size_t>(G), TokenSeq{0});
      g.old_logprobs.assign(static_cast<std::size_t>(G), {0.0});
      const double p = static_cast<double>(c) / G;
      for (const Estimator est : {Estimator::grpo, Estimator::mcpo}) {
        const AdvantageSet a = compute_advantages(g, est);
        const double a_pos = a.values.front();
        const double a_neg = a.values.back();
        const double expect = est == Estimator::grpo || p <= 0.5 ? std::sqrt(p * (1.0 - p)) : 0.5;
        worst_law = std::max({worst_law, std::abs(p * a_pos - expect), std::abs((1.0 - p) * std::abs(a_neg) - expect)});
        if (est == Estimator::mcpo && p > 0.5) worst_flat = std::max(worst_flat, std::abs(p * a_pos - 0.5));
      }
    }
  }
  out.push_back({"queryweight", "p*A+ and (1-p)*|A-| match the weight law", worst_law <= tol, worst_law, tol});
  out.push_back({"queryweight", "mcpo weight is 0.5 above p = 0.5", worst_flat <= tol, worst_flat, tol});
  return out;
}

inline std::vector<PropertyResult> verify_hinge(int grid = 10000) {
  std::vector<PropertyResult> out;
  double dead_zone = 0.0;
  double continuity = 0.0;
  double negativity = 0.0;
  double monotone = 0.0;
  double offsets = 0.0;
  for (const double delta : {0.001, 0.01, 0.1}) {
    const HingeKLConfig cfg(delta, 1.0);
    offsets = std::max({offsets, std::abs(k3(delta) - cfg.c_plus), std::abs(k3(-delta) - cfg.c_minus)});
    double prev = 0.0;
    // Walk outward from the budget on each side; phi must never decrease.
    for (int side : {-1, 1}) {
      prev = 0.0;
      for (int i = 0; i < grid; ++i) {
        const double d = side * (static_cast<double>(i) / (grid - 1));
        const double phi = hinge_penalty(d, cfg);
        if (std::abs(d) <= delta) {
          dead_zone = std::max(dead_zone, std::abs(phi));
        } else {
          negativity = std::max(negativity, -phi);
          monotone = std::max(monotone, prev - phi);
        }
        prev = phi;
      }
    }
    for (const double edge : {delta, -delta}) {
      const double outside = std::nextafter(edge, edge > 0 ? 2.0 : -2.0);
      continuity = std::max(continuity, std::abs(hinge_penalty(outside, cfg) - hinge_penalty(edge, cfg)));
      continuity = std::max(continuity, std::abs(hinge_penalty(edge * (1.0 + 1e-9), cfg)));
    }
  }
  out.push_back({"hinge", "phi = 0 on |d| <= delta", dead_zone == 0.0, dead_zone, 0.0});
  out.push_back({"hinge", "continuous at +-delta", continuity <= 1e-7, continuity, 1e-7});
  out.push_back({"hinge", "phi >= 0", negativity <= 0.0, negativity, 0.0});
  out.push_back({"hinge", "phi monotone beyond the budget", monotone <= 0.0, monotone, 0.0});
  out.push_back({"hinge", "k3(+-delta) - c(+-) = 0", offsets == 0.0, offsets, 0.0});
  return out;
}

/// Central-difference gradient of `f` at `w`, one coordinate at a time.
inline std::vector<double> finite_difference(std::vector<double>& w, const std::function<double()>& f, double h) {
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double saved = w[i];
    w[i] = saved + h;
    const double up = f();
    w[i] = saved - h;
    const double down = f();
    w[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// A random batch for gradient checks: mixed, mastered and all-wrong groups,
/// with mastered anchors near the current policy.
struct GradientCase {
  PolicyParams policy;
  std::vector<RolloutGroup> groups;
  MasteredSet mastered;
};

inline GradientCase random_gradient_case(RngStream& rng) {
  GradientCase c;
  c.policy = instance::random_tabular(5, 3, 0.7, rng);
  // Ratios kept near 1 so the clip boundaries are crossed by some tokens
  // but rarely sit within a finite-difference step of a kink.
  for (int k = 0; k < 6; ++k) {
    const int G = k % 2 == 0 ? 4 : 8;
    int correct = -1;
    if (k == 4) correct = G;
    if (k == 5) correct = 0;
    c.groups.push_back(instance::random_group(c.policy, G, rng, correct, true, 0.6, 1.6));
  }
  for (std::size_t k = 0; k < c.groups.size(); ++k) {
    if (c.groups[k].mastered()) c.mastered.add(c.groups[k], instance::perturbed_anchor(c.policy, c.groups[k], 0.05, rng));
  }
  return c;
}

inline std::vector<PropertyResult> verify_gradients(int policies = 20, double tol = 1e-5, double h = 1e-5) {
  std::vector<PropertyResult> out;
  RngStream rng = RngStream(23).derive(4);
  double worst[3] = {0.0, 0.0, 0.0};
  const char* names[3] = {"grpo", "dapo", "mcpo"};
  for (int trial = 0; trial < policies; ++trial) {
    GradientCase c = random_gradient_case(rng);
    for (int a = 0; a < 3; ++a) {
      TrainConfig cfg;
      cfg.algorithm = static_cast<Algorithm>(a);
      std::vector<std::size_t> all(c.groups.size());
      for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
      const auto sel = reward_selection(cfg, c.groups, all);
      LossGraph graph(c.policy);
      build_objective(cfg, graph, c.groups, sel, c.mastered);
      GradientBuffer grad(c.policy.param_count());
      accumulate_objective_gradient(c.policy, graph, grad);
      auto value = [&] {
        LossGraph g(c.policy);
        return build_objective(cfg, g, c.groups, sel, c.mastered).total;
      };
      const auto fd = finite_difference(c.policy.weights, value, h);
      for (std::size_t i = 0; i < fd.size(); ++i) worst[a] = std::max(worst[a], relative_error(grad.grads[i], fd[i]));
    }
  }
  for (int a = 0; a < 3; ++a) {
    out.push_back(
        {"gradients", std::string("analytic vs central difference (") + names[a] + ")", worst[a] <= tol, worst[a], tol});
  }
  return out;
}

inline std::vector<PropertyResult> verify_zero_variance(int trials = 50) {
  std::vector<PropertyResult> out;
  RngStream rng = RngStream(31).derive(5);
  const ClipConfig clip;
  double reward_grad = 0.0;
  double inside_grad = 0.0;
  double outside_min = 1e300;
  for (int k = 0; k < trials; ++k) {
    const PolicyParams pol = instance::random_tabular(5, 3, 1.0, rng);
    std::vector<RolloutGroup> groups = {instance::random_group(pol, 4, rng, 4), instance::random_group(pol, 4, rng, 0)};
    const std::vector<std::size_t> sel = {0, 1};
    for (const Estimator est : {Estimator::grpo, Estimator::mcpo}) {
      LossGraph graph(pol);
      graph.set_output(batch_surrogate(graph, groups, sel, est, clip));
      GradientBuffer grad(pol.param_count());
      accumulate_objective_gradient(pol, graph, grad);
      for (const double g : grad.grads) reward_grad = std::max(reward_grad, std::abs(g));
    }
    const HingeKLConfig hkl(0.01, 1.0);
    for (const double spread : {0.009, 0.5}) {
      MasteredSet m;
      m.add(groups[0], instance::perturbed_anchor(pol, groups[0], spread, rng));
      LossGraph graph(pol);
      graph.set_output(mcpo_total(graph, groups, sel, m, clip, hkl).total);
      GradientBuffer grad(pol.param_count());
      accumulate_objective_gradient(pol, graph, grad);
      double norm = 0.0;
      for (const double g : grad.grads) norm = std::max(norm, std::abs(g));
      if (spread < hkl.delta) inside_grad = std::max(inside_grad, norm);
      else outside_min = std::min(outside_min, norm);
    }
  }
  out.push_back({"zero-variance", "mastered and all-wrong groups give zero reward gradient", reward_grad == 0.0,
                 reward_grad, 0.0});
  out.push_back({"zero-variance", "no hinge gradient while all drift is inside the budget", inside_grad == 0.0,
                 inside_grad, 0.0});
  out.push_back({"zero-variance", "nonzero hinge gradient once drift leaves the budget", outside_min > 0.0,
                 outside_min, 0.0});
  return out;
}

inline const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> names = {"equivalence", "queryweight", "hinge", "gradients", "zero-variance"};
  return names;
}

/// Runs one suite by name, or every suite for "all". Unknown names throw.
inline std::vector<PropertyResult> run_verify(const std::string& suite) {
  if (suite == "equivalence") return verify_equivalence();
  if (suite == "queryweight") return verify_query_weight();
  if (suite == "hinge") return verify_hinge();
  if (suite == "gradients") return verify_gradients();
  if (suite == "zero-variance") return verify_zero_variance();
  if (suite == "all") {
    std::vector<PropertyResult> out;
    for (const auto& name : verify_suites()) {
      auto part = run_verify(name);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  fail(ErrorCode::invalid_argument, "unknown verify suite '" + suite + "'");
}

inline void write_verify_report(std::ostream& out, const std::vector<PropertyResult>& results) {
  char buf[512];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%s\t%s\t%s\tworst=%.3e\ttol=%.1e\n", r.passed ? "PASS" : "FAIL", r.suite.c_str(),
                  r.property.c_str(), r.worst_error, r.tolerance);
    out << buf;
  }
}

}  // namespace mcpo
