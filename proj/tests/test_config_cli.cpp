#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "mcpo/runs.hpp"

using namespace mcpo;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mcpo_test_" + name + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::io_error;
}

const std::vector<std::string> tiny = {"total_steps=12",         "batch_prompts=8",         "minibatch_prompts=4",
                                       "group_size=4",           "policy.hidden_size=8",    "tasks.parity=8",
                                       "tasks.modular_arithmetic=8", "tasks.key_value_recall=0", "learning_rate=0.02"};

// Later entries replace earlier ones with the same key.
std::vector<std::string> with(std::vector<std::string> base, const std::vector<std::string>& extra) {
  for (const auto& e : extra) {
    const std::string key = e.substr(0, e.find('='));
    std::erase_if(base, [&](const std::string& b) { return b.substr(0, b.find('=')) == key; });
    base.push_back(e);
  }
  return base;
}

}  // namespace

TEST(Config, DefaultsResolve) {
  const auto r = resolve_config(nullptr, {});
  EXPECT_EQ(r.document, default_config_json());
  EXPECT_EQ(r.config.train.algorithm, Algorithm::mcpo);
  EXPECT_EQ(r.config.train.clip.eps_low, 0.2);
  EXPECT_EQ(r.config.train.clip.eps_high, 0.28);
  EXPECT_EQ(r.config.train.hkl.delta, 0.01);
  EXPECT_EQ(r.config.train.hkl.beta, 1.0);
}

TEST(Config, Precedence) {
  const nlohmann::json file = {{"learning_rate", 0.5}, {"clip", {{"eps_high", 0.3}}}};
  const auto from_file = resolve_config(&file, {});
  EXPECT_EQ(from_file.config.train.learning_rate, 0.5);
  EXPECT_EQ(from_file.config.train.clip.eps_high, 0.3);
  EXPECT_EQ(from_file.config.train.clip.eps_low, 0.2);
  const auto both = resolve_config(&file, {"learning_rate=0.25", "hkl.beta=0"});
  EXPECT_EQ(both.config.train.learning_rate, 0.25);
  EXPECT_EQ(both.config.train.hkl.beta, 0.0);
  EXPECT_EQ(both.config.train.clip.eps_high, 0.3);
}

TEST(Config, OverrideOrderDoesNotMatter) {
  const auto a = resolve_config(nullptr, {"seed=7", "algorithm=dapo", "group_size=4"});
  const auto b = resolve_config(nullptr, {"group_size=4", "seed=7", "algorithm=dapo", "seed=7"});
  EXPECT_EQ(a.document, b.document);
  EXPECT_EQ(a.config.train.seed, 7u);
}

TEST(Config, OverrideErrors) {
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"seed=1", "seed=2"}); }), ErrorCode::invalid_override);
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"nope=1"}); }), ErrorCode::invalid_override);
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"clip=1"}); }), ErrorCode::invalid_override);
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"group_size=abc"}); }), ErrorCode::invalid_override);
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"group_size=2.5"}); }), ErrorCode::invalid_override);
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"algorithm=bogus"}); }), ErrorCode::invalid_override);
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"group_size=1"}); }), ErrorCode::invalid_override);
  EXPECT_EQ(code_of([] { resolve_config(nullptr, {"noequals"}); }), ErrorCode::invalid_override);
}

TEST(Config, FileErrors) {
  const nlohmann::json unknown = {{"bogus", 1}};
  EXPECT_EQ(code_of([&] { resolve_config(&unknown, {}); }), ErrorCode::config_parse_error);
  const nlohmann::json wrong_type = {{"group_size", "eight"}};
  EXPECT_EQ(code_of([&] { resolve_config(&wrong_type, {}); }), ErrorCode::config_parse_error);
  const nlohmann::json bad_value = {{"algorithm", "bogus"}};
  EXPECT_EQ(code_of([&] { resolve_config(&bad_value, {}); }), ErrorCode::config_parse_error);
  const fs::path dir = scratch("badjson");
  std::ofstream(dir / "c.json") << "{ not json";
  EXPECT_EQ(code_of([&] { load_config_file((dir / "c.json").string()); }), ErrorCode::config_parse_error);
  EXPECT_EQ(code_of([&] { load_config_file((dir / "missing.json").string()); }), ErrorCode::config_parse_error);
  fs::remove_all(dir);
}

TEST(Config, ShippedConfigsResolve) {
  for (const char* name : {"mcpo.json", "dapo.json", "grpo.json", "large_scale.json"}) {
    const fs::path p = fs::path(MCPO_SOURCE_DIR) / "configs" / name;
    const auto doc = load_config_file(p.string());
    EXPECT_NO_THROW(resolve_config(&doc, {})) << name;
  }
  const auto grpo = load_config_file((fs::path(MCPO_SOURCE_DIR) / "configs" / "grpo.json").string());
  const auto g = resolve_config(&grpo, {});
  EXPECT_EQ(g.config.train.algorithm, Algorithm::grpo);
  EXPECT_EQ(g.config.train.clip.eps_high, 0.2);
}

TEST(Run, ZeroStepsCompletesWithEmptyLog) {
  const fs::path root = scratch("zero");
  const auto out = cmd_run(std::nullopt, with(tiny, {"total_steps=0"}), root);
  EXPECT_EQ(out.manifest.status, RunStatus::completed);
  EXPECT_TRUE(load_metric_log(out.manifest).empty());
  EXPECT_TRUE(fs::exists(out.manifest.path_of(out.manifest.checkpoint)));
  EXPECT_TRUE(fs::exists(out.manifest.path_of(out.manifest.curves)));
  fs::remove_all(root);
}

TEST(Run, InvalidOverrideWritesNothing) {
  const fs::path root = scratch("invalid");
  EXPECT_EQ(code_of([&] { cmd_run(std::nullopt, with(tiny, {"algorithm=bogus"}), root); }), ErrorCode::invalid_override);
  EXPECT_TRUE(fs::is_empty(root));
  fs::remove_all(root);
}

TEST(Run, DeterministicAndReused) {
  const fs::path r1 = scratch("det1");
  const fs::path r2 = scratch("det2");
  const auto a = cmd_run(std::nullopt, tiny, r1);
  const auto b = cmd_run(std::nullopt, tiny, r2);
  EXPECT_FALSE(a.reused);
  EXPECT_EQ(a.manifest.run_id, b.manifest.run_id);
  EXPECT_EQ(a.manifest.config_digest, b.manifest.config_digest);
  for (const auto& file : {a.manifest.metric_log, a.manifest.checkpoint, a.manifest.task_file, a.manifest.curves}) {
    EXPECT_EQ(slurp(a.manifest.path_of(file)), slurp(b.manifest.path_of(file))) << file;
  }
  const auto again = cmd_run(std::nullopt, tiny, r1);
  EXPECT_TRUE(again.reused);
  EXPECT_EQ(again.manifest.run_id, a.manifest.run_id);

  const auto other = cmd_run(std::nullopt, with(tiny, {"seed=2"}), r1);
  EXPECT_NE(other.manifest.run_id, a.manifest.run_id);
  EXPECT_EQ(other.manifest.task_digest, a.manifest.task_digest);

  const auto m = read_manifest(a.manifest.directory);
  EXPECT_EQ(m.run_id, a.manifest.run_id);
  EXPECT_EQ(m.status, RunStatus::completed);
  EXPECT_EQ(m.config, a.manifest.config);
  fs::remove_all(r1);
  fs::remove_all(r2);
}

TEST(Run, AbortedRunIsRecorded) {
  const fs::path root = scratch("abort");
  // A learning rate this large drives the ratios past what a double can hold.
  const std::vector<std::string> args = {"learning_rate=1e300", "optimizer=sgd", "total_steps=20"};
  EXPECT_THROW(cmd_run(std::nullopt, args, root), Error);
  bool found = false;
  for (const auto& entry : fs::directory_iterator(root)) {
    const auto m = read_manifest(entry.path());
    EXPECT_EQ(m.status, RunStatus::aborted);
    EXPECT_FALSE(m.diagnostic.empty());
    found = true;
  }
  EXPECT_TRUE(found);
  fs::remove_all(root);
}

TEST(Compare, SelfComparisonHasZeroDeltas) {
  const fs::path root = scratch("self");
  const auto a = cmd_run(std::nullopt, tiny, root);
  const auto run = load_run(a.manifest.directory);
  const auto rep = compare_runs({run}, {run});
  for (const auto& m : rep.metrics) {
    if (m.name == "mean_retention_accuracy" && std::isnan(m.a[0])) continue;
    EXPECT_EQ(m.a, m.b) << m.name;
    EXPECT_EQ(m.test.ties, 1);
    EXPECT_EQ(m.test.p_value, 1.0);
  }
  std::ostringstream out;
  write_compare_report(out, rep);
  EXPECT_FALSE(out.str().empty());
  fs::remove_all(root);
}

TEST(Compare, RetentionColumnMatchesLog) {
  const fs::path root = scratch("retcol");
  std::vector<RunArtifacts> a, b;
  for (int seed = 1; seed <= 2; ++seed) {
    const std::string s = "seed=" + std::to_string(seed);
    a.push_back(load_run(cmd_run(std::nullopt, with(tiny, {s, "algorithm=dapo"}), root).manifest.directory));
    b.push_back(load_run(cmd_run(std::nullopt, with(tiny, {s, "algorithm=mcpo"}), root).manifest.directory));
  }
  const auto rep = compare_runs(a, b);
  const CompareMetric* ret = nullptr;
  for (const auto& m : rep.metrics) if (m.name == "mean_retention_accuracy") ret = &m;
  ASSERT_NE(ret, nullptr);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (const auto* side : {&a, &b}) {
      double sum = 0.0;
      int n = 0;
      for (const auto& r : (*side)[i].log) {
        if (r.retention_accuracy) {
          sum += *r.retention_accuracy;
          ++n;
        }
      }
      const double expect = n ? sum / n : std::nan("");
      const double got = side == &a ? ret->a[i] : ret->b[i];
      if (n) EXPECT_NEAR(got, expect, 1e-15);
      else EXPECT_TRUE(std::isnan(got));
    }
  }
  EXPECT_EQ(rep.step_lines.size(), a[0].log.size());
  fs::remove_all(root);
}

TEST(Compare, MismatchedTasksAreRejected) {
  const fs::path root = scratch("mismatch");
  const auto a = load_run(cmd_run(std::nullopt, tiny, root).manifest.directory);
  const auto b = load_run(cmd_run(std::nullopt, with(tiny, {"tasks.seed=9"}), root).manifest.directory);
  EXPECT_EQ(code_of([&] { compare_runs({a}, {b}); }), ErrorCode::incompatible_runs);
  EXPECT_EQ(code_of([&] { compare_runs({a}, {}); }), ErrorCode::invalid_argument);
  fs::remove_all(root);
}

TEST(Compare, SignTest) {
  const auto t = sign_test({0, 0, 0, 0, 0}, {1, 1, 1, 1, 1});
  EXPECT_EQ(t.wins, 5);
  EXPECT_NEAR(t.p_value, 1.0 / 32, 1e-15);
  const auto mixed = sign_test({0, 0, 0, 1, 2}, {1, 1, 0, 0, 3});
  EXPECT_EQ(mixed.wins, 3);
  EXPECT_EQ(mixed.losses, 1);
  EXPECT_EQ(mixed.ties, 1);
  EXPECT_NEAR(mixed.p_value, 5.0 / 16, 1e-15);
  EXPECT_EQ(sign_test({1}, {1}).p_value, 1.0);
  // 10 of 12 wins: P(X >= 10), X ~ Bin(12, 1/2) = 79/4096.
  std::vector<double> lo(12, 0.0), hi(12, 1.0);
  hi[0] = hi[1] = -1.0;
  EXPECT_NEAR(sign_test(lo, hi).p_value, 79.0 / 4096, 1e-15);
}

TEST(Digest, Sha256KnownValue) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
