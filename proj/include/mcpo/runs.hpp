#pragma once

// Run persistence and A/B comparison.
//
// Layout: <root>/<run_id>/{manifest.json, checkpoint.txt, metrics.log,
// tasks.jsonl, curves/query_weight.tsv}

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "mcpo/config.hpp"
#include "mcpo/diagnostics.hpp"
#include "mcpo/error.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/task_env.hpp"
#include "mcpo/trainer.hpp"

namespace mcpo {

namespace fs = std::filesystem;

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorCode::io_error, "sha256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

inline std::string task_set_digest(const TaskSet& tasks) {
  std::ostringstream out;
  write_task_set(out, tasks);
  return sha256_hex(out.str());
}

enum class RunStatus { running, completed, aborted };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::running: return "running";
    case RunStatus::completed: return "completed";
    case RunStatus::aborted: return "aborted";
  }
  return "unknown";
}

inline RunStatus parse_run_status(std::string_view s) {
  if (s == "running") return RunStatus::running;
  if (s == "completed") return RunStatus::completed;
  if (s == "aborted") return RunStatus::aborted;
  fail(ErrorCode::parse_error, "unknown run status '" + std::string(s) + "'");
}

struct RunManifest {
  std::string run_id;
  std::string config_digest;
  std::string task_digest;
  std::string algorithm;
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::running;
  fs::path directory;
  std::string checkpoint = "checkpoint.txt";
  std::string metric_log = "metrics.log";
  std::string task_file = "tasks.jsonl";
  std::string curves = "curves/query_weight.tsv";
  std::string diagnostic;
  nlohmann::json config;

  fs::path path_of(const std::string& rel) const { return directory / rel; }
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"schema", "mcpo.manifest/1"},
          {"run_id", m.run_id},
          {"config_digest", m.config_digest},
          {"task_digest", m.task_digest},
          {"algorithm", m.algorithm},
          {"seed", m.seed},
          {"status", std::string(to_string(m.status))},
          {"artifacts",
           {{"checkpoint", m.checkpoint}, {"metric_log", m.metric_log}, {"tasks", m.task_file}, {"curves", m.curves}}},
          {"diagnostic", m.diagnostic},
          {"config", m.config}};
}

inline RunManifest read_manifest(const fs::path& path) {
  fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream in(file);
  if (!in) fail(ErrorCode::io_error, "cannot open manifest " + file.string());
  RunManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("schema") != "mcpo.manifest/1") fail(ErrorCode::parse_error, "unknown manifest schema");
    m.run_id = j.at("run_id").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.task_digest = j.at("task_digest").get<std::string>();
    m.algorithm = j.at("algorithm").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.status = parse_run_status(j.at("status").get<std::string>());
    const auto& a = j.at("artifacts");
    m.checkpoint = a.at("checkpoint").get<std::string>();
    m.metric_log = a.at("metric_log").get<std::string>();
    m.task_file = a.at("tasks").get<std::string>();
    m.curves = a.at("curves").get<std::string>();
    m.diagnostic = j.at("diagnostic").get<std::string>();
    m.config = j.at("config");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse_error, e.what());
  }
  m.directory = file.parent_path();
  return m;
}

inline void write_manifest(const RunManifest& m) {
  const fs::path file = m.directory / "manifest.json";
  const fs::path tmp = m.directory / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << to_json(m).dump(2) << '\n';
    if (!out) fail(ErrorCode::io_error, "cannot write " + tmp.string());
  }
  fs::rename(tmp, file);
}

inline fs::path default_runs_root() {
  if (const char* env = std::getenv("MCPO_RUNS_ROOT"); env && *env) return env;
  return "runs";
}

struct RunOutcome {
  RunManifest manifest;
  bool reused = false;  // an already-completed run with the same id was found
};

/// Resolves config, runs the experiment and persists every artifact. All
/// validation happens before anything is written.
inline RunOutcome cmd_run(const std::optional<std::string>& config_path, const std::vector<std::string>& overrides,
                          const fs::path& root) {
  std::optional<nlohmann::json> file;
  if (config_path) file = load_config_file(*config_path);
  const ResolvedConfig resolved = resolve_config(file ? &*file : nullptr, overrides);
  const ExperimentConfig& cfg = resolved.config;
  const TaskSet tasks = cfg.tasks.generate();

  RunManifest m;
  m.config = resolved.document;
  m.task_digest = task_set_digest(tasks);
  m.config_digest = sha256_hex(resolved.document.dump() + "|tasks:" + std::to_string(cfg.tasks.seed));
  m.algorithm = std::string(to_string(cfg.train.algorithm));
  m.seed = cfg.train.seed;
  m.run_id = m.algorithm + "-s" + std::to_string(m.seed) + "-" + m.config_digest.substr(0, 12);
  m.directory = root / m.run_id;

  if (fs::exists(m.directory / "manifest.json")) {
    RunManifest existing = read_manifest(m.directory);
    if (existing.status == RunStatus::completed) return {existing, true};
  }
  fs::create_directories(m.directory / "curves");
  m.status = RunStatus::running;
  write_manifest(m);
  {
    std::ofstream out(m.path_of(m.task_file), std::ios::trunc);
    write_task_set(out, tasks);
  }
  {
    std::ofstream out(m.path_of(m.curves), std::ios::trunc);
    emit_query_weight_curves(out);
  }
  std::ofstream log(m.path_of(m.metric_log), std::ios::trunc);
  try {
    ExperimentResult result = run_experiment(cfg.train, tasks, cfg.probes, &log);
    std::ofstream ck(m.path_of(m.checkpoint), std::ios::trunc);
    write_checkpoint(ck, result.final_params);
    if (!ck) fail(ErrorCode::io_error, "cannot write checkpoint");
  } catch (const std::exception& e) {
    m.status = RunStatus::aborted;
    m.diagnostic = e.what();
    write_manifest(m);
    throw;
  }
  m.status = RunStatus::completed;
  write_manifest(m);
  return {m, false};
}

inline std::vector<MetricRecord> load_metric_log(const RunManifest& m) {
  std::ifstream in(m.path_of(m.metric_log));
  if (!in) fail(ErrorCode::io_error, "cannot open metric log of " + m.run_id);
  return read_metric_log(in);
}

// Comparison.

struct RunSummary {
  double mean_mastered = 0.0;
  double mean_all_wrong = 0.0;
  std::optional<double> mean_retention;
  double mean_entropy = 0.0;
  double final_quarter_mastered = 0.0;
  double final_quarter_all_wrong = 0.0;
};

inline RunSummary summarize(const std::vector<MetricRecord>& log) {
  RunSummary s;
  if (log.empty()) return s;
  double retention = 0.0;
  int retention_n = 0;
  for (const auto& r : log) {
    s.mean_mastered += r.mastered_fraction;
    s.mean_all_wrong += r.all_wrong_fraction;
    s.mean_entropy += r.mean_entropy;
    if (r.retention_accuracy) {
      retention += *r.retention_accuracy;
      ++retention_n;
    }
  }
  const auto n = static_cast<double>(log.size());
  s.mean_mastered /= n;
  s.mean_all_wrong /= n;
  s.mean_entropy /= n;
  if (retention_n) s.mean_retention = retention / retention_n;
  const std::size_t start = log.size() - std::max<std::size_t>(1, log.size() / 4);
  for (std::size_t k = start; k < log.size(); ++k) {
    s.final_quarter_mastered += log[k].mastered_fraction;
    s.final_quarter_all_wrong += log[k].all_wrong_fraction;
  }
  s.final_quarter_mastered /= static_cast<double>(log.size() - start);
  s.final_quarter_all_wrong /= static_cast<double>(log.size() - start);
  return s;
}

struct SignTest {
  int wins = 0;    // pairs where b > a
  int losses = 0;  // pairs where b < a
  int ties = 0;
  double p_value = 1.0;  // one-sided, H1: b > a
};

/// Exact one-sided binomial sign test; ties are dropped.
inline SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b) {
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] > a[i]) ++t.wins;
    else if (b[i] < a[i]) ++t.losses;
    else ++t.ties;
  }
  const int n = t.wins + t.losses;
  double tail = 0.0;
  for (int k = t.wins; k <= n; ++k) {
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  t.p_value = n == 0 ? 1.0 : std::min(1.0, tail);
  return t;
}

struct RunArtifacts {
  RunManifest manifest;
  std::vector<MetricRecord> log;
};

inline RunArtifacts load_run(const fs::path& path) {
  RunArtifacts r;
  r.manifest = read_manifest(path);
  r.log = load_metric_log(r.manifest);
  return r;
}

struct CompareMetric {
  std::string name;
  std::vector<double> a;  // one entry per pair
  std::vector<double> b;
  SignTest test;
};

struct CompareReport {
  std::vector<std::string> step_lines;
  std::vector<CompareMetric> metrics;
};

/// Seed-matched comparison of run group A against run group B (pair i is
/// a[i] vs b[i]). All runs must share one task set.
inline CompareReport compare_runs(const std::vector<RunArtifacts>& a, const std::vector<RunArtifacts>& b) {
  if (a.empty() || a.size() != b.size()) fail(ErrorCode::invalid_argument, "compare needs equally sized run groups");
  const std::string& digest = a.front().manifest.task_digest;
  for (const auto* group : {&a, &b}) {
    for (const auto& r : *group) {
      if (r.manifest.task_digest != digest) {
        fail(ErrorCode::incompatible_runs, r.manifest.run_id + " was trained on a different task set");
      }
    }
  }
  CompareReport rep;
  char buf[512];
  // Per-step rows for the first pair.
  const auto& la = a.front().log;
  const auto& lb = b.front().log;
  const std::size_t steps = std::min(la.size(), lb.size());
  auto opt = [](const std::optional<double>& v) { return v ? *v : std::nan(""); };
  for (std::size_t k = 0; k < steps; ++k) {
    const double ra = opt(la[k].retention_accuracy);
    const double rb = opt(lb[k].retention_accuracy);
    std::snprintf(buf, sizeof buf, "step\t%lld\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g",
                  static_cast<long long>(la[k].global_step), la[k].mastered_fraction, lb[k].mastered_fraction,
                  lb[k].mastered_fraction - la[k].mastered_fraction, la[k].all_wrong_fraction, lb[k].all_wrong_fraction,
                  lb[k].all_wrong_fraction - la[k].all_wrong_fraction, ra, rb, rb - ra, la[k].mean_entropy,
                  lb[k].mean_entropy, lb[k].mean_entropy - la[k].mean_entropy);
    rep.step_lines.emplace_back(buf);
  }
  const char* names[] = {"mean_mastered_fraction", "mean_all_wrong_fraction", "mean_retention_accuracy",
                         "mean_entropy", "final_quarter_mastered_fraction", "final_quarter_all_wrong_fraction"};
  for (const char* name : names) rep.metrics.push_back({name, {}, {}, {}});
  for (std::size_t i = 0; i < a.size(); ++i) {
    const RunSummary sa = summarize(a[i].log);
    const RunSummary sb = summarize(b[i].log);
    const double va[] = {sa.mean_mastered, sa.mean_all_wrong, opt(sa.mean_retention), sa.mean_entropy,
                         sa.final_quarter_mastered, sa.final_quarter_all_wrong};
    const double vb[] = {sb.mean_mastered, sb.mean_all_wrong, opt(sb.mean_retention), sb.mean_entropy,
                         sb.final_quarter_mastered, sb.final_quarter_all_wrong};
    for (std::size_t m = 0; m < rep.metrics.size(); ++m) {
      rep.metrics[m].a.push_back(va[m]);
      rep.metrics[m].b.push_back(vb[m]);
    }
  }
  for (auto& m : rep.metrics) m.test = sign_test(m.a, m.b);
  return rep;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Tab-separated report. Deltas are b - a.
inline void write_compare_report(std::ostream& out, const CompareReport& rep) {
  out << "# kind\tstep\tmastered_a\tmastered_b\tdelta\tall_wrong_a\tall_wrong_b\tdelta\tretention_a\tretention_b\t"
         "delta\tentropy_a\tentropy_b\tdelta\n";
  for (const auto& line : rep.step_lines) out << line << '\n';
  char buf[256];
  out << "# kind\tmetric\tpair\ta\tb\tdelta\n";
  for (const auto& m : rep.metrics) {
    for (std::size_t i = 0; i < m.a.size(); ++i) {
      std::snprintf(buf, sizeof buf, "pair\t%s\t%zu\t%.17g\t%.17g\t%.17g\n", m.name.c_str(), i, m.a[i], m.b[i],
                    m.b[i] - m.a[i]);
      out << buf;
    }
  }
  out << "# kind\tmetric\tmean_a\tmean_b\tdelta\n";
  for (const auto& m : rep.metrics) {
    const double ma = mean_of(m.a);
    const double mb = mean_of(m.b);
    std::snprintf(buf, sizeof buf, "summary\t%s\t%.17g\t%.17g\t%.17g\n", m.name.c_str(), ma, mb, mb - ma);
    out << buf;
  }
  out << "# kind\tmetric\twins_b\tlosses_b\tties\tp_value_one_sided\n";
  for (const auto& m : rep.metrics) {
    std::snprintf(buf, sizeof buf, "sign_test\t%s\t%d\t%d\t%d\t%.17g\n", m.name.c_str(), m.test.wins, m.test.losses,
                  m.test.ties, m.test.p_value);
    out << buf;
  }
}

}  // namespace mcpo
