#pragma once

// RLVR training loop for grpo, dapo and mcpo.
//
// Each global step: freeze the rollout snapshot, sample G responses per
// prompt, then take one optimizer update per minibatch of prompts. The
// trainer minimizes the negated objective.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mcpo/advantage.hpp"
#include "mcpo/consolidation.hpp"
#include "mcpo/diagnostics.hpp"
#include "mcpo/error.hpp"
#include "mcpo/objective.hpp"
#include "mcpo/optimizer.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/rng.hpp"
#include "mcpo/task_env.hpp"

namespace mcpo {

enum class Algorithm { grpo, dapo, mcpo };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::grpo: return "grpo";
    case Algorithm::dapo: return "dapo";
    case Algorithm::mcpo: return "mcpo";
  }
  return "unknown";
}

inline Algorithm parse_algorithm(std::string_view name) {
  if (name == "grpo") return Algorithm::grpo;
  if (name == "dapo") return Algorithm::dapo;
  if (name == "mcpo") return Algorithm::mcpo;
  fail(ErrorCode::invalid_argument, "unknown algorithm '" + std::string(name) + "'");
}

/// Which policy the hinge-KL drift is measured against.
///   previous-step:   the policy before the preceding gradient update, so each
///                    update is penalized for the drift the last one caused.
///   minibatch-start: the live policy at the start of the current update.
///                    Drift is 0 at the evaluation point, so the penalty
///                    gradient is identically zero.
///   rollout:         the rollout snapshot of the global step.
enum class AnchorMode { previous_step, minibatch_start, rollout };

inline std::string_view to_string(AnchorMode m) {
  switch (m) {
    case AnchorMode::previous_step: return "previous-step";
    case AnchorMode::minibatch_start: return "minibatch-start";
    case AnchorMode::rollout: return "rollout";
  }
  return "unknown";
}

inline AnchorMode parse_anchor_mode(std::string_view name) {
  if (name == "previous-step") return AnchorMode::previous_step;
  if (name == "minibatch-start") return AnchorMode::minibatch_start;
  if (name == "rollout") return AnchorMode::rollout;
  fail(ErrorCode::invalid_argument, "unknown anchor mode '" + std::string(name) + "'");
}

enum class FilterMode { automatic, on, off };

inline std::string_view to_string(FilterMode m) {
  switch (m) {
    case FilterMode::automatic: return "auto";
    case FilterMode::on: return "on";
    case FilterMode::off: return "off";
  }
  return "unknown";
}

inline FilterMode parse_filter_mode(std::string_view name) {
  if (name == "auto") return FilterMode::automatic;
  if (name == "on") return FilterMode::on;
  if (name == "off") return FilterMode::off;
  fail(ErrorCode::invalid_argument, "unknown filter mode '" + std::string(name) + "'");
}

struct PolicyInit {
  Parameterization parameterization = Parameterization::tiny_mlp;
  int hidden_size = 32;
  int context_window = 0;  // 0: longest task context
  double init_scale = 1.0;
};

struct TrainConfig {
  Algorithm algorithm = Algorithm::mcpo;
  int batch_prompts = 32;
  int minibatch_prompts = 16;
  int group_size = 8;
  double learning_rate = 1e-3;
  int total_steps = 200;
  ClipConfig clip;
  HingeKLConfig hkl;
  AnchorMode anchor = AnchorMode::previous_step;
  FilterMode filter = FilterMode::automatic;
  std::uint64_t seed = 1;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double weight_decay = 0.0;
  PolicyInit policy;

  /// Dynamic sampling is on for dapo and off otherwise unless forced.
  bool online_filter() const {
    if (filter == FilterMode::automatic) return algorithm == Algorithm::dapo;
    return filter == FilterMode::on;
  }

  OptimizerConfig optimizer_config() const {
    OptimizerConfig c;
    c.kind = optimizer;
    c.learning_rate = learning_rate;
    c.weight_decay = weight_decay;
    return c;
  }
};

inline void validate(const TrainConfig& c) {
  if (c.batch_prompts < 1 || c.minibatch_prompts < 1) fail(ErrorCode::invalid_argument, "batch sizes must be >= 1");
  if (c.batch_prompts % c.minibatch_prompts != 0) {
    fail(ErrorCode::invalid_argument, "minibatch_prompts must divide batch_prompts");
  }
  if (c.group_size < 2) fail(ErrorCode::invalid_argument, "group_size must be >= 2");
  if (!(c.learning_rate >= 0.0)) fail(ErrorCode::invalid_argument, "learning_rate must be >= 0");
  if (c.total_steps < 0) fail(ErrorCode::invalid_argument, "total_steps must be >= 0");
  if (!(c.weight_decay >= 0.0)) fail(ErrorCode::invalid_argument, "weight_decay must be >= 0");
  validate(c.clip);
  if (c.algorithm == Algorithm::mcpo && c.clip.aggregation != Aggregation::seq_mean_token_mean && c.hkl.beta > 0.0) {
    fail(ErrorCode::invalid_argument, "hinge-KL is only defined with seq-mean-token-mean aggregation");
  }
}

struct TrainState {
  PolicyParams live_params;
  OptimizerState optimizer;
  std::optional<PolicySnapshot> rollout_snapshot;
  std::optional<PolicySnapshot> previous_step_params;
  std::int64_t global_step = 0;
  std::int64_t gradient_steps = 0;
  RngStream rng_root{0};
};

inline TrainState make_train_state(PolicyParams init, std::uint64_t seed) {
  TrainState s;
  s.optimizer = OptimizerState(init.param_count());
  s.live_params = std::move(init);
  s.rng_root = RngStream(seed);
  return s;
}

inline PolicyParams make_initial_policy(const TrainConfig& cfg, const TaskSet& tasks) {
  int cw = cfg.policy.context_window;
  if (cw <= 0) {
    cw = 1;
    for (const auto& t : tasks.instances) cw = std::max(cw, static_cast<int>(t.context.size()));
  }
  if (cfg.policy.parameterization == Parameterization::tabular_bigram) {
    return make_tabular_policy(tasks.vocab.size, tasks.vocab.max_response_len);
  }
  return make_mlp_policy(tasks.vocab.size, cw, tasks.vocab.max_response_len, cfg.policy.hidden_size,
                         cfg.policy.init_scale, cfg.seed);
}

/// Freezes the live params as this global step's rollout policy.
inline void begin_global_step(TrainState& state) {
  state.rollout_snapshot.emplace(state.live_params, StepTag{state.global_step, state.gradient_steps});
}

struct RolloutBatch {
  std::vector<RolloutGroup> groups;
  double mean_entropy = 0.0;
};

/// G responses per prompt from the rollout snapshot. The stream for response
/// i of task k at global step s depends only on (seed, s, k, i).
inline RolloutBatch collect_rollouts(const TrainState& state, const TaskSet& tasks,
                                     std::span<const std::size_t> task_indices, int group_size) {
  if (!state.rollout_snapshot) fail(ErrorCode::invalid_argument, "rollout snapshot not frozen");
  const PolicySnapshot& snap = *state.rollout_snapshot;
  const RngStream step_rng =
      state.rng_root.derive(stream_label::rollout).derive(static_cast<std::uint64_t>(state.global_step));
  RolloutBatch batch;
  double entropy_sum = 0.0;
  std::size_t entropy_count = 0;
  for (const std::size_t k : task_indices) {
    const TaskInstance& task = tasks.instances.at(k);
    RolloutGroup g;
    g.task_id = task.id;
    g.task_index = k;
    g.context = task.context;
    const RngStream task_rng = step_rng.derive(k);
    for (int i = 0; i < group_size; ++i) {
      RngStream stream = task_rng.derive(static_cast<std::uint64_t>(i));
      SampledResponse s = sample_response(snap, task.context, tasks.vocab.max_response_len, stream);
      g.rewards.push_back(verify(task, s.tokens, tasks.vocab).value);
      for (const double h : s.entropies) entropy_sum += h;
      entropy_count += s.entropies.size();
      g.responses.push_back(std::move(s.tokens));
      g.old_logprobs.push_back(std::move(s.logprobs));
    }
    batch.groups.push_back(std::move(g));
  }
  batch.mean_entropy = entropy_count ? entropy_sum / static_cast<double>(entropy_count) : 0.0;
  return batch;
}

/// Prompts for a global step: batch_prompts distinct indices, drawn by a
/// partial Fisher-Yates shuffle on a per-step stream.
inline std::vector<std::size_t> select_batch(const TrainState& state, std::size_t task_count, int batch_prompts) {
  if (static_cast<std::size_t>(batch_prompts) > task_count) {
    fail(ErrorCode::invalid_argument, "batch_prompts exceeds the number of tasks");
  }
  RngStream rng = state.rng_root.derive(stream_label::batch).derive(static_cast<std::uint64_t>(state.global_step));
  std::vector<std::size_t> idx(task_count);
  for (std::size_t i = 0; i < task_count; ++i) idx[i] = i;
  for (std::size_t i = 0; i < static_cast<std::size_t>(batch_prompts); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(task_count - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(batch_prompts));
  return idx;
}

/// Value and gradient pieces of one minibatch objective.
struct MinibatchObjective {
  double total = 0.0;
  double reward = 0.0;
  double hkl = 0.0;
  ObjectiveStats stats;
  std::size_t gradient_groups = 0;
};

/// Groups of the minibatch that enter the reward term.
inline std::vector<std::size_t> reward_selection(const TrainConfig& cfg, std::span<const RolloutGroup> groups,
                                                 std::span<const std::size_t> minibatch) {
  std::vector<std::size_t> out;
  for (const std::size_t k : minibatch) {
    if (cfg.online_filter()) {
      const int c = groups[k].correct_count();
      if (c == 0 || c == static_cast<int>(groups[k].rewards.size())) continue;
    }
    out.push_back(k);
  }
  return out;
}

/// Builds the algorithm's objective on `graph`, sets it as the output, and
/// returns the values. `mastered` is only consulted for mcpo.
inline MinibatchObjective build_objective(const TrainConfig& cfg, LossGraph& graph,
                                          std::span<const RolloutGroup> groups,
                                          std::span<const std::size_t> selection, const MasteredSet& mastered) {
  MinibatchObjective out;
  const Estimator est = cfg.algorithm == Algorithm::mcpo ? Estimator::mcpo : Estimator::grpo;
  ad::Var total;
  if (cfg.algorithm == Algorithm::mcpo) {
    const auto t = mcpo_total(graph, groups, selection, mastered, cfg.clip, cfg.hkl, &out.stats);
    total = t.total;
    out.reward = t.reward.value();
    out.hkl = t.hkl.value();
  } else {
    total = batch_surrogate(graph, groups, selection, est, cfg.clip, &out.stats);
    out.reward = total.value();
  }
  out.total = total.value();
  graph.set_output(total);
  for (const std::size_t k : selection) {
    if (!groups[k].mastered() && !groups[k].all_wrong()) ++out.gradient_groups;
  }
  return out;
}

/// Policy the hinge-KL drift is measured against for the next update. Before
/// the first update previous-step falls back to the live params.
inline const PolicyParams& hkl_anchor(const TrainState& state, AnchorMode mode) {
  if (mode == AnchorMode::rollout && state.rollout_snapshot) return state.rollout_snapshot->params();
  if (mode == AnchorMode::previous_step && state.previous_step_params) return state.previous_step_params->params();
  return state.live_params;
}

/// Partitions, iterates minibatches and applies one optimizer update each.
/// Increments global_step once.
inline MetricRecord train_step(TrainState& state, std::span<const RolloutGroup> groups, const TrainConfig& cfg) {
  validate(cfg);
  const OptimizerConfig opt = cfg.optimizer_config();
  const std::size_t mb = static_cast<std::size_t>(cfg.minibatch_prompts);
  const std::size_t n_minibatches = (groups.size() + mb - 1) / mb;
  const FilterPartition part = dynamic_sampling_filter(groups);

  MetricRecord rec;
  rec.global_step = state.global_step;
  const BatchStatistics bs = batch_statistics(groups);
  rec.mastered_fraction = bs.mastered_fraction;
  rec.all_wrong_fraction = bs.all_wrong_fraction;
  rec.mean_rollout_accuracy = bs.mean_accuracy;
  rec.accuracy_histogram = bs.histogram;

  ObjectiveStats stats;
  double reward_sum = 0.0;
  double hkl_sum = 0.0;
  for (std::size_t b = 0; b < n_minibatches; ++b) {
    std::vector<std::size_t> minibatch;
    for (std::size_t k = b * mb; k < std::min(groups.size(), (b + 1) * mb); ++k) minibatch.push_back(k);
    const std::vector<std::size_t> selection = reward_selection(cfg, groups, minibatch);

    MasteredSet mastered;
    const bool use_hkl = cfg.algorithm == Algorithm::mcpo && cfg.hkl.beta > 0.0;
    if (use_hkl) mastered = make_mastered_set(groups, part.mastered, hkl_anchor(state, cfg.anchor));

    LossGraph graph(state.live_params);
    const MinibatchObjective obj = build_objective(cfg, graph, groups, selection, mastered);
    GradientBuffer grad(state.live_params.param_count());
    try {
      accumulate_objective_gradient(state.live_params, graph, grad);
    } catch (const Error& e) {
      fail(e.code(), "global step " + std::to_string(state.global_step) + ", minibatch " + std::to_string(b) + ": " +
                         e.what());
    }
    // Loss = -objective.
    for (double& g : grad.grads) g = -g;

    state.previous_step_params.emplace(state.live_params, StepTag{state.global_step, state.gradient_steps});
    optimizer_step(opt, state.optimizer, state.live_params.weights, grad.grads);
    ++state.gradient_steps;

    stats.add(obj.stats);
    reward_sum += obj.reward;
    hkl_sum += obj.hkl;
    rec.gradient_groups += static_cast<int>(obj.gradient_groups);
  }
  const double nmb = n_minibatches ? static_cast<double>(n_minibatches) : 1.0;
  rec.reward_objective = reward_sum / nmb;
  rec.hkl_value = hkl_sum / nmb;
  rec.clipped_token_fraction =
      stats.tokens ? static_cast<double>(stats.clipped_tokens) / static_cast<double>(stats.tokens) : 0.0;
  rec.hkl_outside_fraction =
      stats.hkl_tokens ? static_cast<double>(stats.hkl_outside_budget) / static_cast<double>(stats.hkl_tokens) : 0.0;
  rec.params_digest = params_digest(state.live_params);
  ++state.global_step;
  return rec;
}

struct ProbeConfig {
  bool retention = true;
  int group_size = 0;  // 0: training G
};

struct ExperimentResult {
  std::vector<MetricRecord> log;
  PolicyParams final_params;
  PolicyParams initial_params;
};

/// Runs total_steps global steps. Each record is written to `metric_sink` as
/// soon as it is produced, so an abort leaves a valid partial log.
inline ExperimentResult run_experiment(const TrainConfig& cfg, const TaskSet& tasks, const ProbeConfig& probes,
                                       std::ostream* metric_sink = nullptr,
                                       const std::function<void(const TrainState&)>& on_step = {}) {
  validate(cfg);
  validate(tasks);
  ExperimentResult result;
  result.initial_params = make_initial_policy(cfg, tasks);
  TrainState state = make_train_state(result.initial_params, cfg.seed);
  const RngStream probe_root = RngStream(cfg.seed).derive(stream_label::probe);
  const int probe_g = probes.group_size > 0 ? probes.group_size : cfg.group_size;

  std::vector<std::size_t> prev_mastered;
  double retention_sum = 0.0;
  int retention_count = 0;
  for (int step = 0; step < cfg.total_steps; ++step) {
    begin_global_step(state);
    std::optional<double> retention;
    if (probes.retention && !prev_mastered.empty()) {
      std::vector<const TaskInstance*> prompts;
      for (const std::size_t k : prev_mastered) prompts.push_back(&tasks.instances[k]);
      retention = retention_probe(state.live_params, prompts, tasks.vocab, probe_g,
                                  probe_root.derive(static_cast<std::uint64_t>(state.global_step)));
    }
    const std::vector<std::size_t> batch_idx = select_batch(state, tasks.size(), cfg.batch_prompts);
    RolloutBatch batch = collect_rollouts(state, tasks, batch_idx, cfg.group_size);

    MetricRecord rec = train_step(state, batch.groups, cfg);
    rec.mean_entropy = batch.mean_entropy;
    if (retention) {
      retention_sum += *retention;
      ++retention_count;
      rec.retention_accuracy = retention;
      rec.retention_running_mean = retention_sum / retention_count;
    }
    prev_mastered.clear();
    for (const auto& g : batch.groups) {
      if (g.mastered()) prev_mastered.push_back(g.task_index);
    }
    if (metric_sink) write_metric_record(*metric_sink, rec);
    result.log.push_back(std::move(rec));
    if (on_step) on_step(state);
  }
  result.final_params = state.live_params;
  return result;
}

}  // namespace mcpo
