#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "mcpo/autodiff.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/verify.hpp"
#include "oracles.hpp"

using namespace mcpo;

namespace {

PolicyParams random_tabular(int V, int L, std::uint64_t seed, double scale = 1.0) {
  RngStream rng(seed);
  return instance::random_tabular(V, L, scale, rng);
}

}  // namespace

TEST(Policy, UniformLogprobs) {
  const PolicyParams p = make_tabular_policy(4, 3);
  const auto lp = logprobs(p, TokenSeq{1}, TokenSeq{0, 2, 1});
  ASSERT_EQ(lp.size(), 3u);
  for (double x : lp) EXPECT_NEAR(x, -std::log(4.0), 1e-15);
  EXPECT_NEAR(lp[0], -1.3863, 1e-4);
}

TEST(Policy, UniformSamplesHaveLogprobMinusLn4) {
  const PolicyParams p = make_tabular_policy(4, 2);
  const PolicySnapshot snap(p, {});
  for (int k = 0; k < 50; ++k) {
    RngStream rng = RngStream(5).derive(static_cast<std::uint64_t>(k));
    const auto s = sample_response(snap, TokenSeq{0}, 2, rng);
    ASSERT_GE(s.tokens.size(), 1u);
    ASSERT_LE(s.tokens.size(), 2u);
    for (double x : s.logprobs) EXPECT_NEAR(x, -std::log(4.0), 1e-15);
    if (s.tokens.size() == 1) EXPECT_EQ(s.tokens[0], 3);  // stopped at end token
  }
}

TEST(Policy, SamplingIsDeterministic) {
  const PolicyParams p = make_mlp_policy(6, 3, 4, 8, 1.0, 2);
  const PolicySnapshot snap(p, {});
  RngStream a(42), b(42);
  for (int k = 0; k < 20; ++k) {
    const auto x = sample_response(snap, TokenSeq{1, 2, 3}, 4, a);
    const auto y = sample_response(snap, TokenSeq{1, 2, 3}, 4, b);
    EXPECT_EQ(x.tokens, y.tokens);
    EXPECT_EQ(x.logprobs, y.logprobs);
  }
}

TEST(Policy, FirstTokenFrequenciesMatchSoftmax) {
  PolicyParams p = make_tabular_policy(4, 1);
  const TokenSeq ctx{2};
  const std::vector<double> logits = {0.5, -0.3, 1.2, 0.0};
  const std::size_t row = (0 * 5 + 2) * 4;
  for (int k = 0; k < 4; ++k) p.weights[row + k] = logits[k];
  const auto probs = oracle::softmax(logits);
  const PolicySnapshot snap(p, {});
  const int n = 100000;
  std::vector<int> counts(4, 0);
  RngStream root(17);
  for (int i = 0; i < n; ++i) {
    RngStream s = root.derive(static_cast<std::uint64_t>(i));
    ++counts[static_cast<std::size_t>(sample_response(snap, ctx, 1, s).tokens[0])];
  }
  for (int k = 0; k < 4; ++k) {
    const double sigma = std::sqrt(n * probs[k] * (1 - probs[k]));
    EXPECT_NEAR(counts[k], n * probs[k], 3 * sigma) << "token " << k;
  }
}

TEST(Policy, LogprobsMatchIndependentTabularOracle) {
  const PolicyParams p = random_tabular(5, 4, 9);
  RngStream rng(3);
  for (int k = 0; k < 100; ++k) {
    const TokenSeq ctx = instance::random_tokens(5, 2, rng);
    const TokenSeq resp = instance::random_tokens(5, 1 + static_cast<int>(rng.below(4)), rng);
    const auto a = logprobs(p, ctx, resp);
    const auto b = oracle::tabular_logprobs(p, ctx, resp);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
      EXPECT_NEAR(a[t], b[t], 1e-13);
      EXPECT_LE(a[t], 0.0);
    }
    EXPECT_EQ(a, logprobs(p, ctx, resp));
  }
}

TEST(Policy, JointProbabilitiesSumToOneOverAllResponses) {
  for (const PolicyParams& p : {random_tabular(4, 2, 1), make_mlp_policy(4, 2, 2, 5, 1.5, 3)}) {
    double mass = 0.0;
    for (Token a = 0; a < 4; ++a) {
      for (Token b = 0; b < 4; ++b) {
        const auto lp = logprobs(p, TokenSeq{0, 1}, TokenSeq{a, b});
        mass += std::exp(lp[0] + lp[1]);
      }
    }
    EXPECT_NEAR(mass, 1.0, 1e-12);
  }
}

TEST(Policy, NextTokenProbsNormalized) {
  const PolicyParams p = make_mlp_policy(7, 3, 3, 6, 2.0, 8);
  RngStream rng(2);
  for (int k = 0; k < 50; ++k) {
    const auto ctx = instance::random_tokens(7, 3, rng);
    const auto prefix = instance::random_tokens(7, static_cast<int>(rng.below(3)), rng);
    double s = 0.0;
    for (double q : next_token_probs(p, ctx, prefix)) s += q;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Policy, Entropy) {
  const PolicyParams u = make_tabular_policy(4, 2);
  EXPECT_NEAR(token_entropy(u, TokenSeq{0}, TokenSeq{}), std::log(4.0), 1e-15);

  PolicyParams onehot = make_tabular_policy(4, 1);
  const std::size_t row = (0 * 5 + 0) * 4;
  onehot.weights[row + 0] = 50;
  for (int k = 1; k < 4; ++k) onehot.weights[row + k] = -50;
  EXPECT_LE(token_entropy(onehot, TokenSeq{0}, TokenSeq{}), 1e-10);

  PolicyParams p = make_tabular_policy(4, 1);
  p.weights[row] = 1.0;
  const auto q = oracle::softmax({1, 0, 0, 0});
  double h = 0.0;
  for (double x : q) h -= x * std::log(x);
  EXPECT_NEAR(token_entropy(p, TokenSeq{0}, TokenSeq{}), h, 1e-14);
}

TEST(Policy, TokenOutOfRange) {
  const PolicyParams p = make_tabular_policy(4, 2);
  try {
    logprobs(p, TokenSeq{0}, TokenSeq{4});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::token_out_of_range);
  }
  EXPECT_THROW(logprobs(p, TokenSeq{-1}, TokenSeq{0}), Error);
}

TEST(Policy, ConstantObjectiveHasZeroGradient) {
  const PolicyParams p = random_tabular(4, 2, 5);
  LossGraph g(p);
  g.logprobs(TokenSeq{1}, TokenSeq{2, 0});
  g.set_output(ad::Var(3.0));
  GradientBuffer buf(p.param_count());
  accumulate_objective_gradient(p, g, buf);
  for (double x : buf.grads) EXPECT_EQ(x, 0.0);
}

TEST(Policy, LogLikelihoodGradientIsOnehotMinusSoftmax) {
  const PolicyParams p = random_tabular(4, 3, 6);
  const TokenSeq ctx{2}, resp{1, 3, 0};
  LossGraph g(p);
  const auto lp = g.logprobs(ctx, resp);
  g.set_output(lp[0] + lp[1] + lp[2]);
  GradientBuffer buf(p.param_count());
  accumulate_objective_gradient(p, g, buf);

  std::vector<double> expect(p.param_count(), 0.0);
  TokenSeq prefix;
  for (std::size_t t = 0; t < resp.size(); ++t) {
    const int prev = t == 0 ? ctx.back() : resp[t - 1];
    const std::size_t base = (t * 5 + static_cast<std::size_t>(prev)) * 4;
    const auto q = oracle::softmax(oracle::tabular_logits(p, ctx, prefix));
    for (int k = 0; k < 4; ++k) expect[base + k] += (k == resp[t] ? 1.0 : 0.0) - q[k];
    prefix.push_back(resp[t]);
  }
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(buf.grads[i], expect[i], 1e-14) << i;
}

TEST(Policy, AccumulationIsAdditive) {
  const PolicyParams p = random_tabular(4, 2, 7);
  GradientBuffer buf(p.param_count());
  for (int k = 0; k < 2; ++k) {
    LossGraph g(p);
    g.set_output(g.logprobs(TokenSeq{0}, TokenSeq{1, 2})[1]);
    accumulate_objective_gradient(p, g, buf);
  }
  LossGraph g(p);
  g.set_output(g.logprobs(TokenSeq{0}, TokenSeq{1, 2})[1] * 2.0);
  GradientBuffer once(p.param_count());
  accumulate_objective_gradient(p, g, once);
  for (std::size_t i = 0; i < buf.grads.size(); ++i) EXPECT_NEAR(buf.grads[i], once.grads[i], 1e-15);
  EXPECT_EQ(buf.scale, 2.0);
}

namespace {

// A composite objective using every tape operation.
ad::Var composite(LossGraph& g) {
  using ad::Var;
  const auto a = g.logprobs(TokenSeq{1, 0}, TokenSeq{2, 1, 3});
  const auto b = g.logprobs(TokenSeq{3}, TokenSeq{0, 0});
  Var x = ad::exp(a[0] - b[1]) * a[1] + ad::log(-b[0]) / (a[2] - Var(2.0));
  x += ad::min(a[0], b[0]) - ad::max(a[2] * 0.5, b[1]);
  x -= -a[1];
  x *= Var(0.7);
  return sclamp(ad::exp(a[1] + a[2]), 0.01, 0.5) + x;
}

}  // namespace

TEST(Policy, CompositeObjectiveMatchesFiniteDifferences) {
  for (int seed = 0; seed < 4; ++seed) {
    for (const bool mlp : {false, true}) {
      PolicyParams p = mlp ? make_mlp_policy(4, 2, 3, 6, 1.0, static_cast<std::uint64_t>(seed))
                           : random_tabular(4, 3, static_cast<std::uint64_t>(seed + 10));
      LossGraph g(p);
      g.set_output(composite(g));
      GradientBuffer buf(p.param_count());
      accumulate_objective_gradient(p, g, buf);
      auto f = [&p] {
        LossGraph h(p);
        return composite(h).value();
      };
      const auto fd = oracle::central_difference(p.weights, f);
      RngStream pick(static_cast<std::uint64_t>(seed));
      for (int k = 0; k < 200; ++k) {
        const auto i = static_cast<std::size_t>(pick.below(p.param_count()));
        EXPECT_LE(oracle::rel_err(buf.grads[i], fd[i]), 1e-5) << "coordinate " << i;
      }
    }
  }
}

TEST(Policy, NonFiniteGradientThrows) {
  const PolicyParams p = random_tabular(4, 2, 1);
  LossGraph g(p);
  const auto lp = g.logprobs(TokenSeq{0}, TokenSeq{1});
  g.set_output(lp[0] * std::numeric_limits<double>::infinity());
  GradientBuffer buf(p.param_count());
  try {
    accumulate_objective_gradient(p, g, buf);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite_gradient);
  }
  for (double x : buf.grads) EXPECT_EQ(x, 0.0);
}

TEST(Policy, SnapshotStableUnderLiveUpdates) {
  PolicyParams live = random_tabular(4, 2, 3);
  const PolicySnapshot snap(live, {1, 2});
  const auto before = logprobs(snap.params(), TokenSeq{0}, TokenSeq{1, 2});
  for (double& w : live.weights) w += 0.5;
  EXPECT_EQ(logprobs(snap.params(), TokenSeq{0}, TokenSeq{1, 2}), before);
  EXPECT_EQ(snap.tag().global_step, 1);
  EXPECT_EQ(snap.tag().minibatch_step, 2);
}

TEST(Policy, CheckpointRoundTripIsBitExact) {
  for (const PolicyParams& p : {random_tabular(5, 3, 4), make_mlp_policy(6, 4, 2, 7, 1.0, 9)}) {
    std::stringstream io;
    write_checkpoint(io, p);
    const PolicyParams q = read_checkpoint(io);
    ASSERT_EQ(q.shape, p.shape);
    ASSERT_EQ(q.weights.size(), p.weights.size());
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(q.weights[i]), std::bit_cast<std::uint64_t>(p.weights[i]));
    }
  }
  std::istringstream bad("not a checkpoint\n");
  EXPECT_THROW(read_checkpoint(bad), Error);
}

TEST(Policy, ParamCountMatchesWeights) {
  const PolicyParams t = make_tabular_policy(6, 3);
  EXPECT_EQ(t.param_count(), 3u * 7u * 6u);
  const PolicyParams m = make_mlp_policy(6, 4, 2, 7, 1.0, 1);
  EXPECT_EQ(m.param_count(), m.shape.param_count());
  const PolicyParams z = make_mlp_policy(6, 4, 2, 7, 0.0, 1);
  EXPECT_NEAR(token_entropy(z, TokenSeq{1, 2}, TokenSeq{}), std::log(6.0), 1e-15);
}
