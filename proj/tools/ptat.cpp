// Command-line front end: run, report, gradcheck, selftest.
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ptat/checks.hpp"
#include "ptat/errors.hpp"
#include "ptat/report.hpp"
#include "ptat/runner.hpp"

extern char** environ;

namespace {

using namespace ptat;

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kNumeric = 3 };

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const DataError*>(&e))
    return kValidation;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  return kRuntime;
}

// Numeric failures outrank runtime ones, which outrank validation.
int worse(int a, int b) {
  auto rank = [](int c) { return c == kNumeric ? 3 : c == kRuntime ? 2 : c == kValidation ? 1 : 0; };
  return rank(b) > rank(a) ? b : a;
}

struct RunArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
  bool force = false;
  bool quiet = false;
  std::size_t parallel = 1;
  std::size_t worker = 0;
  std::size_t workers = 0;  // > 0 only inside a spawned worker
};

runner::Log stderr_log(bool quiet) {
  if (quiet) return {};
  return [](const std::string& msg) {
    std::fprintf(stderr, "%s\n", msg.c_str());
    std::fflush(stderr);
  };
}

config::RunConfig load_run_config(const RunArgs& a) {
  config::RunConfig cfg = config::load_config(a.config);
  if (a.seed) cfg.seeds = {*a.seed};
  if (!a.out.empty()) cfg.out = a.out;
  config::validate(cfg);
  return cfg;
}

int run_subset(const config::RunConfig& cfg, const RunArgs& a, std::size_t index,
               std::size_t stride) {
  const runner::Log log = stderr_log(a.quiet);
  const ParameterStore backbone = runner::ensure_backbone(cfg, log);
  runner::RunOptions opts;
  opts.resume = a.resume;
  opts.log = log;
  int code = kOk;
  const auto runs = runner::run_list(cfg);
  for (std::size_t i = index; i < runs.size(); i += stride) {
    const auto& [strategy, seed] = runs[i];
    try {
      const runner::RunResult r = runner::run_one(cfg, strategy, seed, backbone, opts);
      if (!a.quiet && r.steps_trained == 0)
        std::fprintf(stderr, "%s/seed%llu: all steps restored, nothing trained\n",
                     strategy.c_str(), static_cast<unsigned long long>(seed));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s/seed%llu: %s\n", strategy.c_str(),
                   static_cast<unsigned long long>(seed), e.what());
      code = worse(code, exit_code_for(e));
    }
  }
  return code;
}

int spawn_workers(const config::RunConfig& cfg, const RunArgs& a) {
  const std::size_t n = std::min(a.parallel, runner::run_list(cfg).size());
  std::vector<pid_t> pids;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<std::string> args{"ptat", "run", a.config, "--out", cfg.out.string(),
                                  "--worker", std::to_string(k), "--workers", std::to_string(n)};
    if (a.seed) args.insert(args.end(), {"--seed", std::to_string(*a.seed)});
    if (a.resume) args.push_back("--resume");
    if (a.quiet) args.push_back("--quiet");
    std::vector<char*> argv;
    for (auto& s : args) argv.push_back(s.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, argv.data(), environ) != 0)
      throw Error("cannot start worker process " + std::to_string(k));
    pids.push_back(pid);
  }
  int code = kOk;
  for (pid_t pid : pids) {
    int status = 0;
    waitpid(pid, &status, 0);
    const int c = WIFEXITED(status) ? WEXITSTATUS(status) : kRuntime;
    code = worse(code, c);
  }
  return code;
}

int cmd_run(const RunArgs& a) {
  const config::RunConfig cfg = load_run_config(a);
  if (a.workers > 0) return run_subset(cfg, a, a.worker, a.workers);

  const auto start = std::chrono::steady_clock::now();
  runner::RunOptions opts;
  opts.resume = a.resume;
  opts.force = a.force;
  runner::prepare_output(cfg, opts);
  int code = kOk;
  if (a.parallel > 1) {
    // Warm-up once, before the workers start, so they share the cached backbone.
    runner::ensure_backbone(cfg, stderr_log(a.quiet));
    code = spawn_workers(cfg, a);
  } else {
    code = run_subset(cfg, a, 0, 1);
  }
  runner::write_run_manifest(cfg);
  if (!a.quiet) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "%zu runs in %s (%.1f s)%s\n", runner::run_list(cfg).size(),
                 cfg.out.string().c_str(), secs, code == kOk ? "" : ", with failures");
  }
  return code;
}

int print_checks(const std::vector<checks::CheckResult>& results) {
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s %s: %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-tuned continual audio-text retrieval experiments"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "train every (strategy, seed) of a config");
  run_cmd->add_option("config", run.config, "INI config file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--seed", run.seed, "run only this seed");
  run_cmd->add_option("--out", run.out, "output directory (overrides run.out)");
  run_cmd->add_flag("--resume", run.resume, "reuse snapshots of completed steps");
  run_cmd->add_flag("--force", run.force, "overwrite an existing output directory");
  run_cmd->add_option("--parallel", run.parallel, "worker processes")->check(CLI::Range(1, 256));
  run_cmd->add_flag("--quiet", run.quiet, "no progress output");
  run_cmd->add_option("--worker", run.worker)->group("");
  run_cmd->add_option("--workers", run.workers)->group("");

  std::vector<std::string> report_dirs;
  std::string report_kind, report_out = ".";
  bool report_force = false;
  auto* report_cmd = app.add_subcommand("report", "tables and plots from finished runs");
  report_cmd->add_option("dirs", report_dirs, "run output directories")->required();
  report_cmd->add_option("--kind", report_kind, "table, curves or afs")
      ->required()
      ->check(CLI::IsMember({"table", "curves", "afs"}));
  report_cmd->add_option("--out", report_out, "directory for the report files");
  report_cmd->add_flag("--force", report_force, "combine runs from different configs");

  checks::GradcheckOptions gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every loss term");
  grad_cmd->add_option("--strategies", gc.strategies, "strategies to check")->delimiter(',');
  grad_cmd->add_option("--batch", gc.batch, "pairs per batch");
  grad_cmd->add_option("--epsilon", gc.epsilon, "central-difference step");
  grad_cmd->add_option("--tolerance", gc.tolerance, "max relative error");
  bool grad_quiet = false;
  grad_cmd->add_flag("--quiet", grad_quiet, "no progress output");

  auto* self_cmd = app.add_subcommand("selftest", "property suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*report_cmd) {
      const std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto runs = report::load_runs(dirs, report_force);
      for (const auto& f : report::write_report(runs, report::parse_kind(report_kind), report_out))
        std::printf("%s\n", f.string().c_str());
      return kOk;
    }
    if (*grad_cmd) return print_checks(checks::gradcheck(gc, stderr_log(grad_quiet)));
    if (*self_cmd) return print_checks(checks::selftest());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return kOk;
}
