#pragma once

// Experiment configuration: a JSON document with sections, resolved as
// defaults < config file < --set overrides.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mcpo/error.hpp"
#include "mcpo/task_env.hpp"
#include "mcpo/trainer.hpp"

namespace mcpo {

struct TaskSuiteConfig {
  int vocab_size = 8;
  std::uint64_t seed = 1;
  int parity = 8;
  int modular_arithmetic = 24;
  int key_value_recall = 16;

  TaskSet generate() const {
    const std::pair<TaskKind, int> parts[] = {{TaskKind::parity, parity},
                                              {TaskKind::modular_arithmetic, modular_arithmetic},
                                              {TaskKind::key_value_recall, key_value_recall}};
    return generate_mixed_task_set(parts, vocab_size, seed);
  }
};

struct ExperimentConfig {
  TrainConfig train;
  TaskSuiteConfig tasks;
  ProbeConfig probes;
};

inline nlohmann::json default_config_json() {
  const ExperimentConfig d;
  const TrainConfig& t = d.train;
  return {
      {"algorithm", std::string(to_string(t.algorithm))},
      {"batch_prompts", t.batch_prompts},
      {"minibatch_prompts", t.minibatch_prompts},
      {"group_size", t.group_size},
      {"learning_rate", t.learning_rate},
      {"total_steps", t.total_steps},
      {"seed", t.seed},
      {"optimizer", std::string(to_string(t.optimizer))},
      {"weight_decay", t.weight_decay},
      {"filter", std::string(to_string(t.filter))},
      {"clip",
       {{"eps_low", t.clip.eps_low},
        {"eps_high", t.clip.eps_high},
        {"aggregation", std::string(to_string(t.clip.aggregation))}}},
      {"hkl", {{"beta", t.hkl.beta}, {"delta", t.hkl.delta}, {"anchor", std::string(to_string(t.anchor))}}},
      {"policy",
       {{"parameterization", std::string(to_string(t.policy.parameterization))},
        {"hidden_size", t.policy.hidden_size},
        {"context_window", t.policy.context_window},
        {"init_scale", t.policy.init_scale}}},
      {"tasks",
       {{"vocab_size", d.tasks.vocab_size},
        {"seed", d.tasks.seed},
        {"parity", d.tasks.parity},
        {"modular_arithmetic", d.tasks.modular_arithmetic},
        {"key_value_recall", d.tasks.key_value_recall}}},
      {"probes", {{"retention", d.probes.retention}, {"group_size", d.probes.group_size}}},
  };
}

/// Converts a fully resolved document; throws Error(code) on bad values.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ErrorCode code = ErrorCode::config_parse_error) {
  ExperimentConfig c;
  try {
    TrainConfig& t = c.train;
    t.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
    t.batch_prompts = j.at("batch_prompts").get<int>();
    t.minibatch_prompts = j.at("minibatch_prompts").get<int>();
    t.group_size = j.at("group_size").get<int>();
    t.learning_rate = j.at("learning_rate").get<double>();
    t.total_steps = j.at("total_steps").get<int>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    t.weight_decay = j.at("weight_decay").get<double>();
    t.filter = parse_filter_mode(j.at("filter").get<std::string>());
    const auto& clip = j.at("clip");
    t.clip.eps_low = clip.at("eps_low").get<double>();
    t.clip.eps_high = clip.at("eps_high").get<double>();
    t.clip.aggregation = parse_aggregation(clip.at("aggregation").get<std::string>());
    const auto& hkl = j.at("hkl");
    t.hkl = HingeKLConfig(hkl.at("delta").get<double>(), hkl.at("beta").get<double>());
    t.anchor = parse_anchor_mode(hkl.at("anchor").get<std::string>());
    const auto& pol = j.at("policy");
    t.policy.parameterization = parse_parameterization(pol.at("parameterization").get<std::string>());
    t.policy.hidden_size = pol.at("hidden_size").get<int>();
    t.policy.context_window = pol.at("context_window").get<int>();
    t.policy.init_scale = pol.at("init_scale").get<double>();
    const auto& tasks = j.at("tasks");
    c.tasks.vocab_size = tasks.at("vocab_size").get<int>();
    c.tasks.seed = tasks.at("seed").get<std::uint64_t>();
    c.tasks.parity = tasks.at("parity").get<int>();
    c.tasks.modular_arithmetic = tasks.at("modular_arithmetic").get<int>();
    c.tasks.key_value_recall = tasks.at("key_value_recall").get<int>();
    const auto& probes = j.at("probes");
    c.probes.retention = probes.at("retention").get<bool>();
    c.probes.group_size = probes.at("group_size").get<int>();
    validate(t);
  } catch (const nlohmann::json::exception& e) {
    fail(code, e.what());
  } catch (const Error& e) {
    fail(code, e.what());
  }
  return c;
}

namespace config_detail {

inline nlohmann::json* find_key(nlohmann::json& doc, const std::string& dotted) {
  nlohmann::json* node = &doc;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
  }
  return node->is_object() ? nullptr : node;
}

/// Parses `text` into the JSON type of `like`.
inline nlohmann::json typed_value(const nlohmann::json& like, const std::string& text) {
  if (like.is_string()) return text;
  nlohmann::json parsed = nlohmann::json::parse(text, nullptr, false);
  if (parsed.is_discarded()) return nlohmann::json::value_t::discarded;
  if (like.is_boolean() && parsed.is_boolean()) return parsed;
  if (like.is_number_float() && parsed.is_number()) return parsed.get<double>();
  if (like.is_number_unsigned()) {
    return parsed.is_number_unsigned() ? parsed : nlohmann::json(nlohmann::json::value_t::discarded);
  }
  if (like.is_number_integer() && parsed.is_number_integer()) return parsed;
  return nlohmann::json::value_t::discarded;
}

inline void merge_file(nlohmann::json& base, const nlohmann::json& file, const std::string& prefix) {
  if (!file.is_object()) fail(ErrorCode::config_parse_error, "config section '" + prefix + "' is not an object");
  for (const auto& [key, value] : file.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) fail(ErrorCode::config_parse_error, "unknown config key '" + path + "'");
    nlohmann::json& slot = base[key];
    if (slot.is_object()) {
      merge_file(slot, value, path);
      continue;
    }
    const bool ok = (slot.is_string() && value.is_string()) || (slot.is_boolean() && value.is_boolean()) ||
                    (slot.is_number_float() && value.is_number()) ||
                    (slot.is_number_unsigned() && value.is_number_unsigned()) ||
                    (slot.is_number_integer() && !slot.is_number_unsigned() && value.is_number_integer());
    if (!ok) fail(ErrorCode::config_parse_error, "config key '" + path + "' has the wrong type");
    slot = slot.is_number_float() ? nlohmann::json(value.get<double>()) : value;
  }
}

}  // namespace config_detail

struct ResolvedConfig {
  nlohmann::json document;
  ExperimentConfig config;
};

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::config_parse_error, "cannot open config '" + path + "'");
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false, true);
  if (doc.is_discarded()) fail(ErrorCode::config_parse_error, "malformed JSON in '" + path + "'");
  return doc;
}

/// defaults < file < overrides. Overrides are `dotted.key=value`; a key given
/// twice with different values is an error.
inline ResolvedConfig resolve_config(const nlohmann::json* file, const std::vector<std::string>& overrides) {
  ResolvedConfig r;
  r.document = default_config_json();
  if (file) config_detail::merge_file(r.document, *file, "");
  config_from_json(r.document, ErrorCode::config_parse_error);

  std::map<std::string, std::string> seen;
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorCode::invalid_override, "expected key=value, got '" + ov + "'");
    const std::string key = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    if (const auto it = seen.find(key); it != seen.end()) {
      if (it->second != value) fail(ErrorCode::invalid_override, "conflicting overrides for '" + key + "'");
      continue;
    }
    seen.emplace(key, value);
    nlohmann::json* slot = config_detail::find_key(r.document, key);
    if (!slot) fail(ErrorCode::invalid_override, "unknown key '" + key + "'");
    nlohmann::json typed = config_detail::typed_value(*slot, value);
    if (typed.is_discarded()) fail(ErrorCode::invalid_override, "bad value for '" + key + "': " + value);
    *slot = std::move(typed);
  }
  r.config = config_from_json(r.document, ErrorCode::invalid_override);
  return r;
}

}  // namespace mcpo
