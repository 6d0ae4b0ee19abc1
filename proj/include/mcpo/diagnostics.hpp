#pragma once

// Observational quantities logged once per global step.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcpo/advantage.hpp"
#include "mcpo/error.hpp"
#include "mcpo/objective.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/rng.hpp"
#include "mcpo/task_env.hpp"

namespace mcpo {

inline constexpr const char* metric_schema = "mcpo.metrics/1";

struct MetricRecord {
  std::int64_t global_step = 0;
  double mastered_fraction = 0.0;
  double all_wrong_fraction = 0.0;
  double mean_rollout_accuracy = 0.0;
  std::optional<double> retention_accuracy;
  std::optional<double> retention_running_mean;
  double mean_entropy = 0.0;
  double reward_objective = 0.0;
  double hkl_value = 0.0;
  double hkl_outside_fraction = 0.0;
  double clipped_token_fraction = 0.0;
  std::vector<int> accuracy_histogram;
  int gradient_groups = 0;
  std::string params_digest;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

struct BatchStatistics {
  double mastered_fraction = 0.0;
  double all_wrong_fraction = 0.0;
  double mean_accuracy = 0.0;
  std::vector<int> histogram;  // bin c counts groups with exactly c correct
};

inline BatchStatistics batch_statistics(std::span<const RolloutGroup> groups) {
  BatchStatistics s;
  std::size_t G = 0;
  for (const auto& g : groups) G = std::max(G, g.rewards.size());
  s.histogram.assign(G + 1, 0);
  if (groups.empty()) return s;
  const FilterPartition part = dynamic_sampling_filter(groups);
  const auto n = static_cast<double>(groups.size());
  s.mastered_fraction = static_cast<double>(part.mastered.size()) / n;
  s.all_wrong_fraction = static_cast<double>(part.all_wrong.size()) / n;
  double acc = 0.0;
  for (const auto& g : groups) {
    acc += rollout_precision(g.rewards);
    ++s.histogram[static_cast<std::size_t>(g.correct_count())];
  }
  s.mean_accuracy = acc / n;
  return s;
}

/// Mean accuracy of fresh rollouts from `current` on the given prompts.
/// Never feeds a gradient; absent when there is nothing to probe.
inline std::optional<double> retention_probe(const PolicyParams& current, std::span<const TaskInstance* const> prompts,
                                             const Vocabulary& vocab, int group_size, const RngStream& rng) {
  if (prompts.empty()) return std::nullopt;
  const PolicySnapshot snap(current, {});
  int correct = 0;
  int total = 0;
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    const RngStream prompt_rng = rng.derive(k);
    for (int i = 0; i < group_size; ++i) {
      RngStream stream = prompt_rng.derive(static_cast<std::uint64_t>(i));
      const auto sample = sample_response(snap, prompts[k]->context, vocab.max_response_len, stream);
      correct += verify(*prompts[k], sample.tokens, vocab).value;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// (p, grpo weight, mcpo weight) at p = 0.00, 0.01, ..., 1.00; tab-separated,
/// values printed round-trip exact.
inline void emit_query_weight_curves(std::ostream& out) {
  out << "p\tgrpo_weight\tmcpo_weight\n";
  char buf[128];
  for (int k = 0; k <= 100; ++k) {
    const double p = k / 100.0;
    std::snprintf(buf, sizeof buf, "%.2f\t%.17g\t%.17g\n", p, query_weight(Estimator::grpo, p),
                  query_weight(Estimator::mcpo, p));
    out << buf;
  }
  if (!out) fail(ErrorCode::io_error, "failed writing curve table");
}

/// 64-bit digest of the exact weight bits, as 16 hex digits.
inline std::string params_digest(const PolicyParams& params) {
  std::uint64_t h = hash_combine(0, params.weights.size());
  for (const double w : params.weights) h = hash_combine(h, std::bit_cast<std::uint64_t>(w));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Metric log: one JSON object per line.

inline nlohmann::json to_json(const MetricRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"schema", metric_schema},
          {"global_step", r.global_step},
          {"mastered_fraction", r.mastered_fraction},
          {"all_wrong_fraction", r.all_wrong_fraction},
          {"mean_rollout_accuracy", r.mean_rollout_accuracy},
          {"retention_accuracy", opt(r.retention_accuracy)},
          {"retention_running_mean", opt(r.retention_running_mean)},
          {"mean_entropy", r.mean_entropy},
          {"reward_objective", r.reward_objective},
          {"hkl_value", r.hkl_value},
          {"hkl_outside_fraction", r.hkl_outside_fraction},
          {"clipped_token_fraction", r.clipped_token_fraction},
          {"accuracy_histogram", r.accuracy_histogram},
          {"gradient_groups", r.gradient_groups},
          {"params_digest", r.params_digest}};
}

inline MetricRecord metric_from_json(const nlohmann::json& j) {
  if (j.at("schema") != metric_schema) fail(ErrorCode::parse_error, "unknown metric schema");
  auto opt = [&j](const char* key) -> std::optional<double> {
    const auto& v = j.at(key);
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  MetricRecord r;
  r.global_step = j.at("global_step").get<std::int64_t>();
  r.mastered_fraction = j.at("mastered_fraction").get<double>();
  r.all_wrong_fraction = j.at("all_wrong_fraction").get<double>();
  r.mean_rollout_accuracy = j.at("mean_rollout_accuracy").get<double>();
  r.retention_accuracy = opt("retention_accuracy");
  r.retention_running_mean = opt("retention_running_mean");
  r.mean_entropy = j.at("mean_entropy").get<double>();
  r.reward_objective = j.at("reward_objective").get<double>();
  r.hkl_value = j.at("hkl_value").get<double>();
  r.hkl_outside_fraction = j.at("hkl_outside_fraction").get<double>();
  r.clipped_token_fraction = j.at("clipped_token_fraction").get<double>();
  r.accuracy_histogram = j.at("accuracy_histogram").get<std::vector<int>>();
  r.gradient_groups = j.at("gradient_groups").get<int>();
  r.params_digest = j.at("params_digest").get<std::string>();
  return r;
}

inline void write_metric_record(std::ostream& out, const MetricRecord& r) {
  out << to_json(r).dump() << '\n';
  out.flush();
  if (!out) fail(ErrorCode::io_error, "failed writing metric record");
}

inline std::vector<MetricRecord> read_metric_log(std::istream& in) {
  std::vector<MetricRecord> out;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (!line.empty()) out.push_back(metric_from_json(nlohmann::json::parse(line)));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse_error, e.what());
  }
  return out;
}

}  // namespace mcpo
