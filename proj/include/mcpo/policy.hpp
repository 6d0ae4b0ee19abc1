#pragma once

// Small autoregressive softmax policies over a finite vocabulary.
//
// tabular-bigram: one logit row per (response position, previous token). The
//   previous token at position 0 is the last context token.
// tiny-mlp: one tanh hidden layer over one-hot features of the last
//   `context_window` context tokens, the previous response token and the
//   response position.
//
// Index V (one past the vocabulary) is used as the padding / begin marker in
// both feature layouts.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "mcpo/autodiff.hpp"
#include "mcpo/error.hpp"
#include "mcpo/rng.hpp"
#include "mcpo/task_env.hpp"

namespace mcpo {

enum class Parameterization { tabular_bigram, tiny_mlp };

inline std::string_view to_string(Parameterization p) {
  return p == Parameterization::tabular_bigram ? "tabular-bigram" : "tiny-mlp";
}

inline Parameterization parse_parameterization(std::string_view name) {
  if (name == "tabular-bigram") return Parameterization::tabular_bigram;
  if (name == "tiny-mlp") return Parameterization::tiny_mlp;
  fail(ErrorCode::invalid_argument, "unknown parameterization '" + std::string(name) + "'");
}

struct PolicyShape {
  Parameterization parameterization = Parameterization::tabular_bigram;
  int vocab_size = 0;
  int context_window = 1;
  int max_response_len = 1;
  int hidden_size = 0;  // tiny-mlp only

  int marker() const { return vocab_size; }
  int feature_count() const { return (context_window + 1) * (vocab_size + 1) + max_response_len; }

  std::size_t param_count() const {
    const auto v = static_cast<std::size_t>(vocab_size);
    if (parameterization == Parameterization::tabular_bigram) {
      return static_cast<std::size_t>(max_response_len) * (v + 1) * v;
    }
    const auto h = static_cast<std::size_t>(hidden_size);
    return static_cast<std::size_t>(feature_count()) * h + h + v * h + v;
  }

  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

struct PolicyParams {
  PolicyShape shape;
  std::vector<double> weights;

  std::size_t param_count() const { return weights.size(); }
  int vocab_size() const { return shape.vocab_size; }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

struct StepTag {
  std::int64_t global_step = 0;
  std::int64_t minibatch_step = 0;
};

/// Immutable frozen copy of a policy.
class PolicySnapshot {
 public:
  PolicySnapshot(const PolicyParams& params, StepTag tag)
      : params_(std::make_shared<const PolicyParams>(params)), tag_(tag) {}

  const PolicyParams& params() const { return *params_; }
  StepTag tag() const { return tag_; }

 private:
  std::shared_ptr<const PolicyParams> params_;
  StepTag tag_;
};

struct GradientBuffer {
  std::vector<double> grads;
  double scale = 0.0;

  GradientBuffer() = default;
  explicit GradientBuffer(std::size_t n) : grads(n, 0.0) {}

  void add(const GradientBuffer& other) {
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += other.grads[i];
    scale += other.scale;
  }
};

inline void validate(const PolicyParams& params) {
  if (params.shape.vocab_size < 2 || params.shape.max_response_len < 1 || params.shape.context_window < 1) {
    fail(ErrorCode::invalid_argument, "bad policy shape");
  }
  if (params.shape.parameterization == Parameterization::tiny_mlp && params.shape.hidden_size < 1) {
    fail(ErrorCode::invalid_argument, "tiny-mlp needs hidden_size >= 1");
  }
  if (params.weights.size() != params.shape.param_count()) {
    fail(ErrorCode::invalid_argument, "weight vector length does not match shape");
  }
  for (const double w : params.weights) {
    if (!std::isfinite(w)) fail(ErrorCode::invalid_argument, "non-finite weight");
  }
}

/// All-zero tabular table: the uniform policy.
inline PolicyParams make_tabular_policy(int vocab_size, int max_response_len) {
  PolicyParams p;
  p.shape = {Parameterization::tabular_bigram, vocab_size, 1, max_response_len, 0};
  p.weights.assign(p.shape.param_count(), 0.0);
  return p;
}

/// Gaussian init for the hidden layer and a small-scale output layer, so the
/// initial policy is close to uniform. init_scale = 0 gives exactly uniform.
inline PolicyParams make_mlp_policy(int vocab_size, int context_window, int max_response_len,
                                    int hidden_size, double init_scale, std::uint64_t seed) {
  PolicyParams p;
  p.shape = {Parameterization::tiny_mlp, vocab_size, context_window, max_response_len, hidden_size};
  p.weights.assign(p.shape.param_count(), 0.0);
  RngStream rng = RngStream(seed).derive(stream_label::init);
  auto gauss = [&rng] { return standard_normal(rng); };
  const auto f = static_cast<std::size_t>(p.shape.feature_count());
  const auto h = static_cast<std::size_t>(hidden_size);
  const auto v = static_cast<std::size_t>(vocab_size);
  // Each position activates context_window + 2 features.
  const double in_std = init_scale / std::sqrt(static_cast<double>(context_window + 2));
  const double out_std = 0.1 * init_scale / std::sqrt(static_cast<double>(hidden_size));
  for (std::size_t i = 0; i < f * h; ++i) p.weights[i] = in_std * gauss();
  const std::size_t w2 = f * h + h;
  for (std::size_t i = 0; i < v * h; ++i) p.weights[w2 + i] = out_std * gauss();
  return p;
}

namespace policy_detail {

inline void check_tokens(const PolicyShape& shape, std::span<const Token> tokens) {
  for (const Token t : tokens) {
    if (t < 0 || t >= shape.vocab_size) fail(ErrorCode::token_out_of_range, "token " + std::to_string(t));
  }
}

struct MlpLayout {
  std::size_t features, hidden, vocab;
  std::size_t b1() const { return features * hidden; }
  std::size_t w2() const { return b1() + hidden; }
  std::size_t b2() const { return w2() + vocab * hidden; }
};

inline MlpLayout mlp_layout(const PolicyShape& s) {
  return {static_cast<std::size_t>(s.feature_count()), static_cast<std::size_t>(s.hidden_size),
          static_cast<std::size_t>(s.vocab_size)};
}

/// Active one-hot feature indices for predicting response position t.
inline void mlp_features(const PolicyShape& s, std::span<const Token> context,
                         std::span<const Token> prefix, std::vector<std::size_t>& out) {
  out.clear();
  const int v1 = s.vocab_size + 1;
  const int cw = s.context_window;
  const int n = static_cast<int>(context.size());
  for (int j = 0; j < cw; ++j) {
    const int src = n - cw + j;
    const int tok = src >= 0 ? context[static_cast<std::size_t>(src)] : s.marker();
    out.push_back(static_cast<std::size_t>(j * v1 + tok));
  }
  const int prev = prefix.empty() ? s.marker() : prefix.back();
  out.push_back(static_cast<std::size_t>(cw * v1 + prev));
  out.push_back(static_cast<std::size_t>((cw + 1) * v1 + static_cast<int>(prefix.size())));
}

inline std::size_t tabular_row(const PolicyShape& s, std::span<const Token> context,
                               std::span<const Token> prefix) {
  const auto v = static_cast<std::size_t>(s.vocab_size);
  std::size_t prev = static_cast<std::size_t>(s.marker());
  if (!prefix.empty()) prev = static_cast<std::size_t>(prefix.back());
  else if (!context.empty()) prev = static_cast<std::size_t>(context.back());
  return (prefix.size() * (v + 1) + prev) * v;
}

/// Scratch state reused across positions.
struct Workspace {
  std::vector<std::size_t> features;
  std::vector<double> hidden;
  std::vector<double> logits;
  std::vector<double> probs;
};

inline void forward(const PolicyParams& p, std::span<const Token> context, std::span<const Token> prefix,
                    Workspace& ws) {
  const PolicyShape& s = p.shape;
  if (static_cast<int>(prefix.size()) >= s.max_response_len) {
    fail(ErrorCode::invalid_argument, "position beyond max_response_len");
  }
  const auto v = static_cast<std::size_t>(s.vocab_size);
  ws.logits.assign(v, 0.0);
  if (s.parameterization == Parameterization::tabular_bigram) {
    const std::size_t row = tabular_row(s, context, prefix);
    std::copy_n(p.weights.begin() + static_cast<std::ptrdiff_t>(row), v, ws.logits.begin());
  } else {
    const MlpLayout L = mlp_layout(s);
    mlp_features(s, context, prefix, ws.features);
    ws.hidden.assign(p.weights.begin() + static_cast<std::ptrdiff_t>(L.b1()),
                     p.weights.begin() + static_cast<std::ptrdiff_t>(L.b1() + L.hidden));
    for (const std::size_t f : ws.features) {
      const double* row = p.weights.data() + f * L.hidden;
      for (std::size_t k = 0; k < L.hidden; ++k) ws.hidden[k] += row[k];
    }
    for (double& x : ws.hidden) x = std::tanh(x);
    for (std::size_t o = 0; o < v; ++o) {
      const double* row = p.weights.data() + L.w2() + o * L.hidden;
      double acc = p.weights[L.b2() + o];
      for (std::size_t k = 0; k < L.hidden; ++k) acc += row[k] * ws.hidden[k];
      ws.logits[o] = acc;
    }
  }
  // Stable softmax.
  const double m = *std::max_element(ws.logits.begin(), ws.logits.end());
  ws.probs.resize(v);
  double z = 0.0;
  for (std::size_t o = 0; o < v; ++o) z += (ws.probs[o] = std::exp(ws.logits[o] - m));
  for (double& q : ws.probs) q /= z;
}

inline double log_softmax_at(const std::vector<double>& logits, Token y) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (const double l : logits) z += std::exp(l - m);
  return logits[static_cast<std::size_t>(y)] - m - std::log(z);
}

inline double entropy_of(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (const double l : logits) z += std::exp(l - m);
  const double log_z = std::log(z);
  double h = 0.0;
  for (const double l : logits) {
    const double lp = l - m - log_z;
    h -= std::exp(lp) * lp;
  }
  return std::max(0.0, h);
}

}  // namespace policy_detail

/// Next-token distribution (probabilities) for the given context and prefix.
inline std::vector<double> next_token_probs(const PolicyParams& params, std::span<const Token> context,
                                            std::span<const Token> prefix) {
  policy_detail::Workspace ws;
  policy_detail::forward(params, context, prefix, ws);
  return ws.probs;
}

inline std::vector<double> next_token_logits(const PolicyParams& params, std::span<const Token> context,
                                             std::span<const Token> prefix) {
  policy_detail::Workspace ws;
  policy_detail::forward(params, context, prefix, ws);
  return ws.logits;
}

/// log pi(y_t | x, y_<t) for every response token.
inline std::vector<double> logprobs(const PolicyParams& params, std::span<const Token> context,
                                    std::span<const Token> response) {
  policy_detail::check_tokens(params.shape, context);
  policy_detail::check_tokens(params.shape, response);
  policy_detail::Workspace ws;
  std::vector<double> out;
  out.reserve(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    policy_detail::forward(params, context, response.first(t), ws);
    out.push_back(policy_detail::log_softmax_at(ws.logits, response[t]));
  }
  return out;
}

/// Shannon entropy (nats) of the next-token distribution.
inline double token_entropy(const PolicyParams& params, std::span<const Token> context,
                            std::span<const Token> prefix) {
  policy_detail::check_tokens(params.shape, context);
  policy_detail::check_tokens(params.shape, prefix);
  policy_detail::Workspace ws;
  policy_detail::forward(params, context, prefix, ws);
  return policy_detail::entropy_of(ws.logits);
}

struct SampledResponse {
  TokenSeq tokens;
  std::vector<double> logprobs;
  std::vector<double> entropies;  // next-token entropy at each emitted position
};

/// Ancestral sampling until the end token or max_len tokens.
inline SampledResponse sample_response(const PolicySnapshot& snapshot, std::span<const Token> context,
                                       int max_len, RngStream& rng) {
  const PolicyParams& params = snapshot.params();
  if (max_len < 1 || max_len > params.shape.max_response_len) {
    fail(ErrorCode::invalid_argument, "max_len outside [1, max_response_len]");
  }
  policy_detail::check_tokens(params.shape, context);
  const Token end = static_cast<Token>(params.shape.vocab_size - 1);
  policy_detail::Workspace ws;
  SampledResponse out;
  for (int t = 0; t < max_len; ++t) {
    policy_detail::forward(params, context, out.tokens, ws);
    const double u = rng.uniform();
    double acc = 0.0;
    auto y = static_cast<Token>(ws.probs.size() - 1);
    for (std::size_t k = 0; k < ws.probs.size(); ++k) {
      acc += ws.probs[k];
      if (u < acc) {
        y = static_cast<Token>(k);
        break;
      }
    }
    out.logprobs.push_back(policy_detail::log_softmax_at(ws.logits, y));
    out.entropies.push_back(policy_detail::entropy_of(ws.logits));
    out.tokens.push_back(y);
    if (y == end) break;
  }
  return out;
}

/// Accumulates sum_t adjoint[t] * d log pi(y_t | .) / d theta into `grad`.
inline void accumulate_logprob_gradient(const PolicyParams& params, std::span<const Token> context,
                                        std::span<const Token> response, std::span<const double> adjoints,
                                        std::span<double> grad) {
  const PolicyShape& s = params.shape;
  const auto v = static_cast<std::size_t>(s.vocab_size);
  policy_detail::Workspace ws;
  std::vector<double> dlogits(v);
  std::vector<double> dhidden;
  for (std::size_t t = 0; t < response.size(); ++t) {
    const double a = adjoints[t];
    if (a == 0.0) continue;
    policy_detail::forward(params, context, response.first(t), ws);
    for (std::size_t k = 0; k < v; ++k) dlogits[k] = -a * ws.probs[k];
    dlogits[static_cast<std::size_t>(response[t])] += a;
    if (s.parameterization == Parameterization::tabular_bigram) {
      const std::size_t row = policy_detail::tabular_row(s, context, response.first(t));
      for (std::size_t k = 0; k < v; ++k) grad[row + k] += dlogits[k];
      continue;
    }
    const policy_detail::MlpLayout L = policy_detail::mlp_layout(s);
    dhidden.assign(L.hidden, 0.0);
    for (std::size_t o = 0; o < v; ++o) {
      const double g = dlogits[o];
      grad[L.b2() + o] += g;
      double* grow = grad.data() + L.w2() + o * L.hidden;
      const double* wrow = params.weights.data() + L.w2() + o * L.hidden;
      for (std::size_t k = 0; k < L.hidden; ++k) {
        grow[k] += g * ws.hidden[k];
        dhidden[k] += g * wrow[k];
      }
    }
    for (std::size_t k = 0; k < L.hidden; ++k) dhidden[k] *= 1.0 - ws.hidden[k] * ws.hidden[k];
    for (std::size_t k = 0; k < L.hidden; ++k) grad[L.b1() + k] += dhidden[k];
    for (const std::size_t f : ws.features) {
      double* grow = grad.data() + f * L.hidden;
      for (std::size_t k = 0; k < L.hidden; ++k) grow[k] += dhidden[k];
    }
  }
}

/// A scalar objective composed on an autodiff tape whose leaves are
/// per-token log-probabilities of the live policy.
class LossGraph {
 public:
  explicit LossGraph(const PolicyParams& params) : params_(&params) {}

  LossGraph(const LossGraph&) = delete;
  LossGraph& operator=(const LossGraph&) = delete;

  ad::Tape& tape() { return tape_; }
  const PolicyParams& params() const { return *params_; }

  /// Evaluates log-probs under the graph's params and registers them as leaves.
  std::vector<ad::Var> logprobs(std::span<const Token> context, std::span<const Token> response) {
    const std::vector<double> lp = mcpo::logprobs(*params_, context, response);
    Leaf leaf{TokenSeq(context.begin(), context.end()), TokenSeq(response.begin(), response.end()), {}};
    std::vector<ad::Var> vars;
    vars.reserve(lp.size());
    for (const double x : lp) {
      vars.push_back(tape_.variable(x));
      leaf.nodes.push_back(vars.back().index());
    }
    leaves_.push_back(std::move(leaf));
    return vars;
  }

  void set_output(const ad::Var& out) { output_ = out; }
  const ad::Var& output() const { return output_; }

 private:
  friend void accumulate_objective_gradient(const PolicyParams&, const LossGraph&, GradientBuffer&);

  struct Leaf {
    TokenSeq context;
    TokenSeq response;
    std::vector<std::int32_t> nodes;
  };

  const PolicyParams* params_;
  ad::Tape tape_;
  std::vector<Leaf> leaves_;
  ad::Var output_;
};

/// buffer += d(graph output)/d(theta). Throws non-finite-gradient on blow-up,
/// leaving the buffer untouched.
inline void accumulate_objective_gradient(const PolicyParams& params, const LossGraph& graph,
                                          GradientBuffer& buffer) {
  if (&params != graph.params_) fail(ErrorCode::invalid_argument, "graph was built on different params");
  if (buffer.grads.size() != params.param_count()) buffer.grads.assign(params.param_count(), 0.0);
  const std::vector<double> adj = graph.tape_.adjoints(graph.output_);
  std::vector<double> local(params.param_count(), 0.0);
  std::vector<double> token_adj;
  for (const auto& leaf : graph.leaves_) {
    token_adj.clear();
    for (const std::int32_t node : leaf.nodes) token_adj.push_back(adj[static_cast<std::size_t>(node)]);
    accumulate_logprob_gradient(params, leaf.context, leaf.response, token_adj, local);
  }
  for (std::size_t i = 0; i < local.size(); ++i) {
    if (!std::isfinite(local[i])) {
      fail(ErrorCode::non_finite_gradient, "coordinate " + std::to_string(i) + " = " + std::to_string(local[i]));
    }
  }
  for (std::size_t i = 0; i < local.size(); ++i) buffer.grads[i] += local[i];
  buffer.scale += 1.0;
}

// Checkpoint: text header, then one hexfloat weight per line (bit-exact).

inline void write_checkpoint(std::ostream& out, const PolicyParams& params) {
  const PolicyShape& s = params.shape;
  out << "mcpo-checkpoint 1\n"
      << "parameterization " << to_string(s.parameterization) << '\n'
      << "vocab_size " << s.vocab_size << '\n'
      << "context_window " << s.context_window << '\n'
      << "max_response_len " << s.max_response_len << '\n'
      << "hidden_size " << s.hidden_size << '\n'
      << "param_count " << params.weights.size() << '\n';
  char buf[64];
  for (const double w : params.weights) {
    const auto res = std::to_chars(buf, buf + sizeof buf, w, std::chars_format::hex);
    out.write(buf, res.ptr - buf);
    out.put('\n');
  }
}

inline PolicyParams read_checkpoint(std::istream& in) {
  auto expect = [&in](const std::string& key) {
    std::string k;
    if (!(in >> k) || k != key) fail(ErrorCode::parse_error, "checkpoint: expected '" + key + "'");
  };
  expect("mcpo-checkpoint");
  int version = 0;
  in >> version;
  if (version != 1) fail(ErrorCode::parse_error, "checkpoint: unsupported version");
  PolicyParams p;
  std::string kind;
  expect("parameterization");
  in >> kind;
  p.shape.parameterization = parse_parameterization(kind);
  std::size_t count = 0;
  expect("vocab_size");
  in >> p.shape.vocab_size;
  expect("context_window");
  in >> p.shape.context_window;
  expect("max_response_len");
  in >> p.shape.max_response_len;
  expect("hidden_size");
  in >> p.shape.hidden_size;
  expect("param_count");
  in >> count;
  if (!in) fail(ErrorCode::parse_error, "checkpoint: bad header");
  p.weights.resize(count);
  std::string word;
  for (std::size_t i = 0; i < count; ++i) {
    if (!(in >> word)) fail(ErrorCode::parse_error, "checkpoint: truncated weights");
    const auto res = std::from_chars(word.data(), word.data() + word.size(), p.weights[i], std::chars_format::hex);
    if (res.ec != std::errc{} || res.ptr != word.data() + word.size()) {
      fail(ErrorCode::parse_error, "checkpoint: bad weight '" + word + "'");
    }
  }
  validate(p);
  return p;
}

}  // namespace mcpo
