// mcpo: run, compare, verify, emit-curves.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcpo/mcpo.hpp"

namespace {

int do_run(const std::string& config, const std::vector<std::string>& overrides, const std::string& root) {
  std::optional<std::string> path;
  if (!config.empty()) path = config;
  const mcpo::fs::path out_root = root.empty() ? mcpo::default_runs_root() : mcpo::fs::path(root);
  const mcpo::RunOutcome r = mcpo::cmd_run(path, overrides, out_root);
  std::cout << (r.reused ? "reused\t" : "completed\t") << r.manifest.run_id << '\t' << r.manifest.directory.string()
            << '\n';
  return 0;
}

std::vector<mcpo::RunArtifacts> load_group(const std::vector<std::string>& paths) {
  std::vector<mcpo::RunArtifacts> out;
  for (const auto& p : paths) {
    mcpo::RunArtifacts run = mcpo::load_run(p);
    if (run.manifest.status != mcpo::RunStatus::completed) {
      mcpo::fail(mcpo::ErrorCode::incompatible_runs, run.manifest.run_id + " is not completed");
    }
    out.push_back(std::move(run));
  }
  return out;
}

int do_compare(const std::vector<std::string>& a, const std::vector<std::string>& b, const std::string& output) {
  const mcpo::CompareReport rep = mcpo::compare_runs(load_group(a), load_group(b));
  if (output.empty()) {
    mcpo::write_compare_report(std::cout, rep);
  } else {
    std::ofstream out(output, std::ios::trunc);
    if (!out) mcpo::fail(mcpo::ErrorCode::io_error, "cannot open " + output);
    mcpo::write_compare_report(out, rep);
  }
  return 0;
}

int do_verify(const std::string& suite) {
  const auto results = mcpo::run_verify(suite);
  mcpo::write_verify_report(std::cout, results);
  for (const auto& r : results) {
    if (!r.passed) return 1;
  }
  return 0;
}

int do_curves(const std::string& output) {
  if (output.empty()) {
    mcpo::emit_query_weight_curves(std::cout);
    return 0;
  }
  std::ofstream out(output, std::ios::trunc);
  if (!out) mcpo::fail(mcpo::ErrorCode::io_error, "cannot open " + output);
  mcpo::emit_query_weight_curves(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale RLVR trainer for grpo, dapo and mcpo"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> overrides;
  std::string root;
  auto* run = app.add_subcommand("run", "Train one configuration and persist its artifacts");
  run->add_option("--config,-c", config, "JSON config file");
  run->add_option("--set,-s", overrides, "Override as dotted.key=value (repeatable)");
  run->add_option("--root", root, "Output root (default: $MCPO_RUNS_ROOT or ./runs)");

  std::vector<std::string> group_a, group_b;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Seed-matched comparison of two run groups (deltas are b - a)");
  compare->add_option("--a", group_a, "Baseline run directories or manifests")->required();
  compare->add_option("--b", group_b, "Treatment run directories or manifests")->required();
  compare->add_option("--output,-o", compare_out, "Report path (default: stdout)");

  std::string suite = "all";
  auto* verify = app.add_subcommand("verify", "Run built-in property suites");
  verify->add_option("suite", suite, "equivalence | queryweight | hinge | gradients | zero-variance | all");

  std::string curves_out;
  auto* curves = app.add_subcommand("emit-curves", "Write the query-weight table");
  curves->add_option("--output,-o", curves_out, "Table path (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return do_run(config, overrides, root);
    if (*compare) return do_compare(group_a, group_b, compare_out);
    if (*verify) return do_verify(suite);
    if (*curves) return do_curves(curves_out);
  } catch (const mcpo::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
