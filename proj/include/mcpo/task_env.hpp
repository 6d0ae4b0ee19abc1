#pragma once

// Synthetic verifiable tasks with binary rewards.
//
// Token layout for a vocabulary of size V: symbols occupy [0, V-1) and the
// last index V-1 is the end-of-sequence token. Targets never contain it.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mcpo/error.hpp"
#include "mcpo/rng.hpp"

namespace mcpo {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

struct Vocabulary {
  int size = 0;
  int max_response_len = 0;

  Token end_token() const { return static_cast<Token>(size - 1); }
  bool contains(Token t) const { return t >= 0 && t < size; }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

enum class TaskKind { parity, modular_arithmetic, key_value_recall };

inline std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::parity: return "parity";
    case TaskKind::modular_arithmetic: return "modular-arithmetic";
    case TaskKind::key_value_recall: return "key-value-recall";
  }
  return "unknown";
}

inline TaskKind parse_task_kind(std::string_view name) {
  if (name == "parity") return TaskKind::parity;
  if (name == "modular-arithmetic") return TaskKind::modular_arithmetic;
  if (name == "key-value-recall") return TaskKind::key_value_recall;
  fail(ErrorCode::invalid_kind, "unknown task kind '" + std::string(name) + "'");
}

struct TaskInstance {
  std::string id;
  TokenSeq context;
  TokenSeq target;
  std::optional<int> difficulty_tag;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct TaskSet {
  std::vector<TaskInstance> instances;
  Vocabulary vocab;
  std::uint64_t generator_seed = 0;

  std::size_t size() const { return instances.size(); }

  friend bool operator==(const TaskSet&, const TaskSet&) = default;
};

struct RewardOutcome {
  int value = 0;
  bool matched = false;
};

namespace task_detail {

inline constexpr int parity_bits = 3;
inline constexpr int kv_pairs = 3;

inline int min_vocab(TaskKind kind) {
  switch (kind) {
    case TaskKind::parity: return 4;
    case TaskKind::modular_arithmetic: return 4;
    case TaskKind::key_value_recall: return kv_pairs + 2;
  }
  return 4;
}

inline int target_len(TaskKind kind) {
  return kind == TaskKind::modular_arithmetic ? 2 : 1;
}

inline TaskInstance make_instance(TaskKind kind, int vocab_size, std::size_t index,
                                  RngStream& rng) {
  const auto symbols = static_cast<std::uint64_t>(vocab_size - 1);
  TaskInstance task;
  task.id = std::string(to_string(kind)) + "-" + std::to_string(index);
  switch (kind) {
    case TaskKind::parity: {
      Token bit_sum = 0;
      for (int i = 0; i < parity_bits; ++i) {
        const auto bit = static_cast<Token>(rng.below(2));
        task.context.push_back(bit);
        bit_sum ^= bit;
      }
      task.target = {bit_sum};
      task.difficulty_tag = 0;
      break;
    }
    case TaskKind::modular_arithmetic: {
      const auto a = static_cast<Token>(rng.below(symbols));
      const auto b = static_cast<Token>(rng.below(symbols));
      const auto m = static_cast<Token>(symbols);
      task.context = {a, b};
      task.target = {static_cast<Token>((a + b) % m), static_cast<Token>((a * b) % m)};
      task.difficulty_tag = 1;
      break;
    }
    case TaskKind::key_value_recall: {
      std::vector<Token> keys;
      while (static_cast<int>(keys.size()) < kv_pairs) {
        const auto k = static_cast<Token>(rng.below(symbols));
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
      }
      std::vector<Token> values;
      for (int i = 0; i < kv_pairs; ++i) {
        values.push_back(static_cast<Token>(rng.below(symbols)));
        task.context.push_back(keys[i]);
        task.context.push_back(values[i]);
      }
      const auto q = rng.below(static_cast<std::uint64_t>(kv_pairs));
      task.context.push_back(keys[q]);
      task.target = {values[q]};
      task.difficulty_tag = 2;
      break;
    }
  }
  return task;
}

}  // namespace task_detail

/// Generates `count` instances of a single kind. Deterministic in all inputs.
inline TaskSet generate_task_set(TaskKind kind, int count, int vocab_size, std::uint64_t seed) {
  if (count < 1) fail(ErrorCode::invalid_argument, "count must be >= 1");
  if (vocab_size < task_detail::min_vocab(kind)) {
    fail(ErrorCode::vocab_too_small,
         std::string(to_string(kind)) + " needs vocab_size >= " +
             std::to_string(task_detail::min_vocab(kind)));
  }
  TaskSet set;
  set.vocab = {vocab_size, task_detail::target_len(kind)};
  set.generator_seed = seed;
  RngStream rng = RngStream(seed).derive(stream_label::tasks).derive(static_cast<std::uint64_t>(kind));
  for (int i = 0; i < count; ++i) {
    set.instances.push_back(task_detail::make_instance(kind, vocab_size, static_cast<std::size_t>(i), rng));
  }
  return set;
}

/// Concatenation of single-kind sets sharing one vocabulary. The response
/// budget is the longest target over all kinds present.
inline TaskSet generate_mixed_task_set(std::span<const std::pair<TaskKind, int>> parts,
                                       int vocab_size, std::uint64_t seed) {
  TaskSet mixed;
  mixed.vocab = {vocab_size, 0};
  mixed.generator_seed = seed;
  for (const auto& [kind, count] : parts) {
    if (count == 0) continue;
    TaskSet part = generate_task_set(kind, count, vocab_size, seed);
    mixed.vocab.max_response_len = std::max(mixed.vocab.max_response_len, part.vocab.max_response_len);
    for (auto& inst : part.instances) mixed.instances.push_back(std::move(inst));
  }
  if (mixed.instances.empty()) fail(ErrorCode::invalid_argument, "mixed task set is empty");
  return mixed;
}

/// Reward is 1 exactly when the response, with trailing end tokens removed,
/// equals the canonical target.
inline RewardOutcome verify(const TaskInstance& task, std::span<const Token> response,
                            const Vocabulary& vocab) {
  if (static_cast<int>(response.size()) > vocab.max_response_len) {
    fail(ErrorCode::invalid_argument, "response longer than max_response_len");
  }
  for (const Token t : response) {
    if (!vocab.contains(t)) fail(ErrorCode::token_out_of_range, "response token " + std::to_string(t));
  }
  std::size_t len = response.size();
  while (len > 0 && response[len - 1] == vocab.end_token()) --len;
  const bool matched = std::equal(response.begin(), response.begin() + static_cast<std::ptrdiff_t>(len),
                                  task.target.begin(), task.target.end());
  return {matched ? 1 : 0, matched};
}

/// Checks the TaskInstance/TaskSet invariants; throws on the first violation.
inline void validate(const TaskSet& set) {
  if (set.vocab.size < 2 || set.vocab.max_response_len < 1) {
    fail(ErrorCode::invalid_argument, "bad vocabulary shape");
  }
  std::unordered_set<std::string> ids;
  for (const auto& task : set.instances) {
    if (!ids.insert(task.id).second) fail(ErrorCode::invalid_argument, "duplicate id " + task.id);
    if (task.target.empty() || static_cast<int>(task.target.size()) > set.vocab.max_response_len) {
      fail(ErrorCode::invalid_argument, "bad target length for " + task.id);
    }
    for (const Token t : task.context) {
      if (!set.vocab.contains(t)) fail(ErrorCode::token_out_of_range, "context token in " + task.id);
    }
    for (const Token t : task.target) {
      if (!set.vocab.contains(t)) fail(ErrorCode::token_out_of_range, "target token in " + task.id);
    }
  }
}

// Line-delimited records: one header line, then one instance per line.

inline void write_task_set(std::ostream& out, const TaskSet& set) {
  nlohmann::json header = {{"schema", "mcpo.taskset/1"},
                           {"vocab_size", set.vocab.size},
                           {"max_response_len", set.vocab.max_response_len},
                           {"generator_seed", set.generator_seed},
                           {"count", set.instances.size()}};
  out << header.dump() << '\n';
  for (const auto& task : set.instances) {
    nlohmann::json rec = {{"id", task.id}, {"context", task.context}, {"target", task.target}};
    rec["difficulty_tag"] = task.difficulty_tag ? nlohmann::json(*task.difficulty_tag) : nlohmann::json(nullptr);
    out << rec.dump() << '\n';
  }
}

inline TaskSet read_task_set(std::istream& in) {
  TaskSet set;
  std::string line;
  try {
    if (!std::getline(in, line)) fail(ErrorCode::parse_error, "missing task-set header");
    const auto header = nlohmann::json::parse(line);
    if (header.at("schema") != "mcpo.taskset/1") fail(ErrorCode::parse_error, "unknown task-set schema");
    set.vocab.size = header.at("vocab_size").get<int>();
    set.vocab.max_response_len = header.at("max_response_len").get<int>();
    set.generator_seed = header.at("generator_seed").get<std::uint64_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      TaskInstance task;
      task.id = rec.at("id").get<std::string>();
      task.context = rec.at("context").get<TokenSeq>();
      task.target = rec.at("target").get<TokenSeq>();
      if (!rec.at("difficulty_tag").is_null()) task.difficulty_tag = rec.at("difficulty_tag").get<int>();
      set.instances.push_back(std::move(task));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse_error, e.what());
  }
  validate(set);
  return set;
}

}  // namespace mcpo
