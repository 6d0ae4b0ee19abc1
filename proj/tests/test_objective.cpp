#include <cmath>

#include <gtest/gtest.h>

#include "mcpo/objective.hpp"
#include "mcpo/verify.hpp"
#include "oracles.hpp"

using namespace mcpo;

namespace {

// Group whose old log-probs are the current ones minus log(ratio).
RolloutGroup with_ratios(const PolicyParams& p, const std::vector<int>& rewards,
                         const std::vector<std::vector<double>>& ratios) {
  RolloutGroup g;
  g.task_id = "g";
  g.context = {0};
  g.rewards = rewards;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    TokenSeq resp(ratios[i].size(), 1);
    const auto lp = logprobs(p, g.context, resp);
    std::vector<double> old;
    for (std::size_t t = 0; t < lp.size(); ++t) old.push_back(lp[t] - std::log(ratios[i][t]));
    g.responses.push_back(resp);
    g.old_logprobs.push_back(old);
  }
  return g;
}

}  // namespace

TEST(Objective, RatiosAtSnapshotAreOne) {
  RngStream rng(1);
  const PolicyParams p = instance::random_tabular(5, 3, 1.0, rng);
  const RolloutGroup g = instance::random_group(p, 4, rng, 2, true, 1.0, 1.0);
  for (const auto& r : importance_ratios(p, g)) {
    for (double x : r) EXPECT_EQ(x, 1.0);
  }
}

TEST(Objective, RatioFromLogprobDelta) {
  const PolicyParams p = make_tabular_policy(4, 2);
  RolloutGroup g = with_ratios(p, {1, 0}, {{1.0, 1.0}, {1.0}});
  g.old_logprobs[0][1] -= std::log(2.0);
  const auto r = importance_ratios(p, g);
  EXPECT_NEAR(r[0][1], 2.0, 1e-15);
  EXPECT_EQ(r[0][0], 1.0);
}

TEST(Objective, RatiosMatchRecomputedLogprobs) {
  RngStream rng(2);
  PolicyParams p = instance::random_tabular(5, 3, 1.0, rng);
  const RolloutGroup g = instance::random_group(p, 8, rng);
  for (double& w : p.weights) w += 0.1 * standard_normal(rng);
  const auto r = importance_ratios(p, g);
  for (std::size_t i = 0; i < g.responses.size(); ++i) {
    const auto lp = oracle::tabular_logprobs(p, g.context, g.responses[i]);
    for (std::size_t t = 0; t < lp.size(); ++t) {
      EXPECT_NEAR(r[i][t], std::exp(lp[t] - g.old_logprobs[i][t]), 1e-12 * r[i][t]);
      EXPECT_GT(r[i][t], 0.0);
    }
  }
}

TEST(Objective, NonFiniteRatio) {
  const PolicyParams p = make_tabular_policy(4, 2);
  RolloutGroup g = with_ratios(p, {1, 0}, {{1.0}, {1.0}});
  g.old_logprobs[1][0] = -800.0;
  try {
    importance_ratios(p, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite_ratio);
  }
}

TEST(Objective, ClippedScores) {
  const ClipConfig c;
  EXPECT_EQ(c.eps_low, 0.2);
  EXPECT_EQ(c.eps_high, 0.28);
  const std::vector<double> ones = {1, 1, 1};
  EXPECT_EQ(clipped_score_pos(ones, c), 1.0);
  EXPECT_EQ(clipped_score_neg(ones, c), 1.0);
  EXPECT_EQ(clipped_score_pos(std::vector<double>{1.5}, c), 1.28);
  EXPECT_EQ(clipped_score_neg(std::vector<double>{0.5}, c), 0.8);
  const std::vector<double> r = {0.5, 1.0, 2.0};
  EXPECT_NEAR(clipped_score_pos(r, c), 0.926667, 1e-6);
  EXPECT_NEAR(clipped_score_pos(r, c), (0.5 + 1.0 + 1.28) / 3, 1e-15);
  EXPECT_NEAR(clipped_score_neg(r, c), 1.266667, 1e-6);
  EXPECT_NEAR(clipped_score_neg(r, c), (0.8 + 1.0 + 2.0) / 3, 1e-15);
  EXPECT_THROW(clipped_score_pos(std::vector<double>{}, c), Error);
}

TEST(Objective, ClippingIsMonotoneInEpsilon) {
  RngStream rng(4);
  for (int k = 0; k < 200; ++k) {
    const double r = 0.1 + 3 * rng.uniform();
    double prev_pos = -1, prev_neg = 1e9;
    for (double eps = 0.01; eps < 0.9; eps += 0.05) {
      ClipConfig c{eps, eps, Aggregation::seq_mean_token_mean};
      const double sp = clipped_score_pos(std::vector<double>{r}, c);
      const double sn = clipped_score_neg(std::vector<double>{r}, c);
      EXPECT_GE(sp, prev_pos);
      EXPECT_LE(sn, prev_neg);
      prev_pos = sp;
      prev_neg = sn;
    }
  }
}

TEST(Objective, SurrogateAtSnapshotIsZero) {
  RngStream rng(5);
  const PolicyParams p = instance::random_tabular(5, 3, 1.0, rng);
  for (const auto agg : {Aggregation::seq_mean_token_mean, Aggregation::token_mean}) {
    const ClipConfig c{0.2, 0.28, agg};
    for (int k = 0; k < 20; ++k) {
      const RolloutGroup g = instance::random_group(p, 4, rng, -1, true, 1.0, 1.0);
      const auto adv = grpo_advantages(g);
      const double v = surrogate_objective(p, g, adv, c).objective_value;
      if (agg == Aggregation::seq_mean_token_mean) {
        EXPECT_NEAR(v, 0.0, 1e-15);
      } else {
        // Token-mean weights each advantage by its response length.
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < g.responses.size(); ++i) {
          num += adv.values[i] * g.responses[i].size();
          den += g.responses[i].size();
        }
        EXPECT_NEAR(v, num / den, 1e-15);
      }
    }
  }
}

TEST(Objective, SurrogateMatchesLiteralFormula) {
  RngStream rng(6);
  const ClipConfig c;
  for (int k = 0; k < 200; ++k) {
    const PolicyParams p = instance::random_tabular(4, 3, 1.0, rng);
    const RolloutGroup g = instance::random_group(p, 4, rng);
    for (const Estimator est : {Estimator::grpo, Estimator::mcpo}) {
      const auto adv = compute_advantages(g, est);
      const auto terms = surrogate_objective(p, g, adv, c);
      const double ref = oracle::seq_mean_surrogate(terms.per_token_ratios, adv.values, 0.2, 0.28);
      EXPECT_NEAR(terms.objective_value, ref, 1e-13);
      EXPECT_GE(terms.clipped_token_fraction, 0.0);
      EXPECT_LE(terms.clipped_token_fraction, 1.0);
      EXPECT_NEAR(terms.objective_value, discriminative_objective(p, g, est, c), 1e-10);
    }
  }
}

TEST(Objective, MasteredGroupHasZeroObjectiveAndGradient) {
  RngStream rng(7);
  const PolicyParams p = instance::random_tabular(5, 3, 1.0, rng);
  const RolloutGroup g = instance::random_group(p, 4, rng, 4);
  const auto adv = grpo_advantages(g);
  EXPECT_EQ(surrogate_objective(p, g, adv, ClipConfig{}).objective_value, 0.0);
  LossGraph graph(p);
  graph.set_output(group_surrogate(graph, g, adv, ClipConfig{}));
  GradientBuffer buf(p.param_count());
  accumulate_objective_gradient(p, graph, buf);
  for (double x : buf.grads) EXPECT_EQ(x, 0.0);
}

TEST(Objective, DiscriminativeExamples) {
  const PolicyParams p = make_tabular_policy(4, 2);
  const ClipConfig c;
  const RolloutGroup ones = with_ratios(p, {1, 1, 0, 0}, {{1.0}, {1.0}, {1.0}, {1.0}});
  EXPECT_EQ(discriminative_objective(p, ones, Estimator::grpo, c), 0.0);
  const RolloutGroup g = with_ratios(p, {1, 1, 0, 0}, {{1.1}, {1.1}, {0.9}, {0.9}});
  EXPECT_NEAR(discriminative_objective(p, g, Estimator::grpo, c), 0.1, 1e-14);
  const RolloutGroup m = with_ratios(p, {1, 1, 1, 1}, {{1.0}, {1.0}, {1.0}, {1.0}});
  try {
    discriminative_objective(p, m, Estimator::grpo, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::degenerate_group);
  }
  EXPECT_THROW(discriminative_objective(p, g, Estimator::grpo, ClipConfig{0.2, 0.28, Aggregation::token_mean}),
               Error);
}

TEST(Objective, HomogeneityOfBranches) {
  RngStream rng(8);
  for (int k = 0; k < 500; ++k) {
    const double r = 0.2 + 4.8 * rng.uniform();
    const double a = 0.1 + rng.uniform();
    const double cst = 0.1 + 3 * rng.uniform();
    const ClipConfig cfg;
    EXPECT_NEAR(clipped_token_term(r, cst * a, cfg), cst * clipped_token_term(r, a, cfg), 1e-14);
    EXPECT_NEAR(clipped_token_term(r, -cst * a, cfg), cst * clipped_token_term(r, -a, cfg), 1e-14);
    EXPECT_EQ(clipped_token_term(1.0, a, cfg), a);
    EXPECT_EQ(clipped_token_term(1.0, -a, cfg), -a);
  }
}

TEST(Objective, FilterPartition) {
  auto mk = [](int G, int c) {
    RolloutGroup g;
    g.rewards.assign(static_cast<std::size_t>(G), 0);
    for (int i = 0; i < c; ++i) g.rewards[static_cast<std::size_t>(i)] = 1;
    return g;
  };
  const std::vector<RolloutGroup> b = {mk(16, 16), mk(16, 0), mk(16, 7)};
  const auto part = dynamic_sampling_filter(b);
  EXPECT_EQ(part.kept, (std::vector<std::size_t>{2}));
  EXPECT_EQ(part.mastered, (std::vector<std::size_t>{0}));
  EXPECT_EQ(part.all_wrong, (std::vector<std::size_t>{1}));

  const auto empty = dynamic_sampling_filter(std::vector<RolloutGroup>{});
  EXPECT_TRUE(empty.kept.empty() && empty.mastered.empty() && empty.all_wrong.empty());

  RngStream rng(9);
  std::vector<RolloutGroup> big;
  int exp_m = 0, exp_w = 0;
  for (int k = 0; k < 128; ++k) {
    const int c = static_cast<int>(rng.below(9));
    big.push_back(mk(8, c));
    exp_m += c == 8;
    exp_w += c == 0;
  }
  const auto pb = dynamic_sampling_filter(big);
  EXPECT_EQ(pb.kept.size() + pb.mastered.size() + pb.all_wrong.size(), 128u);
  EXPECT_EQ(static_cast<int>(pb.mastered.size()), exp_m);
  EXPECT_EQ(static_cast<int>(pb.all_wrong.size()), exp_w);
  std::vector<int> seen(128, 0);
  for (const auto* v : {&pb.kept, &pb.mastered, &pb.all_wrong}) {
    EXPECT_TRUE(std::is_sorted(v->begin(), v->end()));
    for (auto k : *v) ++seen[k];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Objective, ClipConfigValidation) {
  EXPECT_THROW(validate(ClipConfig{0.0, 0.28, Aggregation::seq_mean_token_mean}), Error);
  EXPECT_THROW(validate(ClipConfig{1.0, 0.28, Aggregation::seq_mean_token_mean}), Error);
  EXPECT_THROW(validate(ClipConfig{0.2, 0.0, Aggregation::seq_mean_token_mean}), Error);
  validate(ClipConfig{0.3, 0.1, Aggregation::token_mean});
  EXPECT_EQ(parse_aggregation("token-mean"), Aggregation::token_mean);
  EXPECT_THROW(parse_aggregation("sum"), Error);
}
