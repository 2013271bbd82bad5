#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ptat/config.hpp"
#include "ptat/errors.hpp"
#include "ptat/report.hpp"
#include "ptat/runner.hpp"

using namespace ptat;
namespace fs = std::filesystem;

namespace {

// Same shapes as configs/smoke.ini.
const char* kTiny = R"(
[run]
strategies = ptat, finetune_sequential, prompt_shallow
seeds = 0, 1

[sequence]
num_domains = 2
latent_dim = 4
pool_size = 12
num_train = 128
num_test = 40
spec_rows = 8
spec_cols = 4
text_len = 4
vocab_size = 10
noise_sigma = 0.05

[model]
embed_dim = 8
num_heads = 2
mlp_hidden = 16
shared_dim = 6
audio_max_seq_len = 16
text_max_seq_len = 16
patch_rows = 4
patch_cols = 2
prompt_len = 3
lora_rank = 2

[train]
learning_rate = 0.003
epochs = 2
batch_size = 16

[backbone]
epochs = 2
num_domains = 2
num_train = 128
)";

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("ptat_runner_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int n = 0;
    return n;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++n;
  return n;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

config::RunConfig tiny(const fs::path& out) {
  config::RunConfig cfg = config::parse_config(kTiny);
  cfg.out = out;
  return cfg;
}

runner::RunResult run_all(const config::RunConfig& cfg, const runner::RunOptions& opts) {
  runner::prepare_output(cfg, opts);
  const ParameterStore backbone = runner::ensure_backbone(cfg);
  runner::RunResult last;
  for (const auto& [strategy, seed] : runner::run_list(cfg))
    last = runner::run_one(cfg, strategy, seed, backbone, opts);
  runner::write_run_manifest(cfg);
  return last;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PTAT_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config text round trip") {
  const config::RunConfig cfg = config::parse_config(kTiny);
  CHECK(cfg.strategies.size() == 3);
  CHECK(cfg.model.audio.embed_dim == 8);
  CHECK(cfg.train.learning_rate == 0.003);
  const config::RunConfig again = config::parse_config(config::to_ini(cfg));
  CHECK(again == cfg);
  CHECK(config::to_ini(again) == config::to_ini(cfg));
}

TEST_CASE("config errors name the field") {
  auto message = [](const std::string& text) {
    try {
      config::validate(config::parse_config(text));
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("[train]\nlearning_rate = fast\n").find("train.learning_rate") != std::string::npos);
  CHECK(message("[train]\nbogus = 1\n").find("train.bogus") != std::string::npos);
  CHECK(message("[nowhere]\nx = 1\n").find("nowhere") != std::string::npos);
  // Every problem is reported, not just the first.
  const std::string both = message("[train]\nepochs = 0\nbatch_size = 0\n");
  CHECK(both.find("train.epochs") != std::string::npos);
  CHECK(both.find("train.batch_size") != std::string::npos);
  CHECK(message("[sequence]\norder = 1, 1\n").find("order") != std::string::npos);
  CHECK(message("[run]\nstrategies = nope\n").find("nope") != std::string::npos);
  CHECK(message(kTiny).empty());
}

TEST_CASE("shipped configs validate") {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(PTAT_CONFIG_DIR)) {
    if (e.path().extension() != ".ini") continue;
    CAPTURE(e.path().string());
    CHECK_NOTHROW(config::validate(config::load_config(e.path())));
    ++n;
  }
  CHECK(n >= 2);
}

TEST_CASE("config hash ignores [run] and the backbone cache path") {
  config::RunConfig a = config::parse_config(kTiny);
  config::RunConfig b = a;
  b.seeds = {7, 8, 9};
  b.strategies = {"joint"};
  b.out = "elsewhere";
  b.backbone_cache = "/tmp/some.snap";
  CHECK(config::config_hash(a) == config::config_hash(b));
  b.train.learning_rate *= 2;
  CHECK(config::config_hash(a) != config::config_hash(b));
  // Train settings do not change the backbone.
  CHECK(config::backbone_hash(a) == config::backbone_hash(b));
  b.model.prompt_len += 1;
  b.model.lora_rank += 1;
  CHECK(config::backbone_hash(a) == config::backbone_hash(b));
  b.backbone.epochs += 1;
  CHECK(config::backbone_hash(a) != config::backbone_hash(b));
}

TEST_CASE("run writes one metrics file per (strategy, seed) and resumes without training") {
  TempDir tmp;
  const config::RunConfig cfg = tiny(tmp.path / "out");
  run_all(cfg, {});

  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(cfg.out))
    if (e.path().filename() == "metrics.jsonl") ++files;
  CHECK(files == 6);
  const fs::path seed0 = runner::run_dir(cfg, "ptat", 0);
  // M = 2: three (step, dataset) cells, six metrics each.
  CHECK(count_lines(seed0 / "metrics.jsonl") == 18);
  CHECK(fs::exists(seed0 / "snapshots" / "step1.snap"));
  CHECK(fs::exists(seed0 / "snapshots" / "step2.snap"));
  CHECK(fs::exists(cfg.out / "config.ini"));
  CHECK(slurp(cfg.out / "manifest.json").find("\"complete\"") != std::string::npos);

  // A second run into the same directory needs --resume or --force.
  CHECK_THROWS_AS(runner::prepare_output(cfg, {}), ValidationError);

  const std::string before = slurp(seed0 / "metrics.jsonl");
  runner::RunOptions resume;
  resume.resume = true;
  runner::prepare_output(cfg, resume);
  const ParameterStore backbone = runner::ensure_backbone(cfg);
  const runner::RunResult r = runner::run_one(cfg, "ptat", 0, backbone, resume);
  CHECK(r.steps_trained == 0);
  CHECK(r.steps_restored == 2);
  CHECK(slurp(seed0 / "metrics.jsonl") == before);

  // Resuming under a different config is refused.
  config::RunConfig other = cfg;
  other.train.epochs = 3;
  CHECK_THROWS_AS(runner::prepare_output(other, resume), ValidationError);
  runner::RunOptions force;
  force.force = true;
  CHECK_NOTHROW(runner::prepare_output(other, force));
  CHECK_FALSE(fs::exists(seed0 / "metrics.jsonl"));
}

TEST_CASE("reports: table, afs, curves, missing cells, mixed configs") {
  TempDir tmp;
  config::RunConfig cfg = tiny(tmp.path / "a");
  cfg.strategies = {"ptat", "finetune_sequential"};
  run_all(cfg, {});

  const auto runs = report::load_runs({cfg.out}, false);
  CHECK(runs.size() == 4);
  for (const auto& r : runs) CHECK(report::missing_cells(r).empty());

  const std::string table = report::table_csv(runs);
  std::istringstream lines(table);
  std::string header;
  std::getline(lines, header);
  CHECK(header.rfind("strategy,seeds,trainable_params,", 0) == 0);
  CHECK(header.find("domain1_t2a_r10") != std::string::npos);
  CHECK(header.find("avg_a2t_r1") != std::string::npos);
  CHECK(count(table, "\n") == 3);

  const std::string afs = report::afs_csv(runs);
  // Only domain 1 has a later step: one row per (strategy, seed) plus a mean per strategy.
  CHECK(count(afs, "\n") == 1 + 4 + 2);
  CHECK(afs.find("ptat,mean,domain1") != std::string::npos);

  const std::string svg = report::curve_svg(runs, "domain1");
  CHECK(count(svg, "<polyline") == 2);
  CHECK(svg.find("strategy=ptat") != std::string::npos);

  const auto files = report::write_report(runs, report::Kind::curves, tmp.path / "rep");
  CHECK(files.size() == 2);
  for (const auto& f : files) CHECK(fs::exists(f));

  // A run directory missing its last step is reported cell by cell.
  const fs::path cut = tmp.path / "cut";
  fs::create_directories(cut / "ptat" / "seed0");
  fs::copy_file(cfg.out / "config.ini", cut / "config.ini");
  {
    std::ifstream in(runner::run_dir(cfg, "ptat", 0) / "metrics.jsonl");
    std::ofstream out(cut / "ptat" / "seed0" / "metrics.jsonl");
    std::string line;
    for (int i = 0; i < 6 && std::getline(in, line); ++i) out << line << "\n";
  }
  const auto partial = report::load_runs({cut}, false);
  REQUIRE(partial.size() == 1);
  const auto missing = report::missing_cells(partial[0]);
  CHECK(missing.size() == 2);
  CHECK_THROWS_AS(report::table_csv(partial), ValidationError);

  // Runs from a different config are not mixed silently.
  config::RunConfig other = tiny(tmp.path / "b");
  other.strategies = {"prompt_shallow"};
  other.seeds = {0};
  other.train.learning_rate = 0.002;
  run_all(other, {});
  CHECK_THROWS_AS(report::load_runs({cfg.out, other.out}, false), ValidationError);
  CHECK(report::load_runs({cfg.out, other.out}, true).size() == 5);
  // The same run listed twice is a duplicate.
  CHECK_THROWS_AS(report::load_runs({cfg.out, runner::run_dir(cfg, "ptat", 0)}, false),
                  ValidationError);
}

TEST_CASE("cli exit codes") {
  TempDir tmp;
  const fs::path ini = tmp.path / "tiny.ini";
  {
    std::ofstream out(ini);
    out << kTiny;
  }
  const fs::path out = tmp.path / "out";
  const std::string run = "run " + ini.string() + " --out " + out.string() + " --quiet";
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("run " + (tmp.path / "absent.ini").string()) == 1);
  CHECK(run_cli(run + " --seed 0") == 0);
  CHECK(run_cli(run + " --seed 0") == 1);  // exists: needs --resume or --force
  CHECK(run_cli(run + " --seed 0 --resume") == 0);
  CHECK(run_cli(run + " --force --parallel 2") == 0);
  CHECK(fs::exists(out / "prompt_shallow" / "seed1" / "metrics.jsonl"));
  CHECK(run_cli("report " + out.string() + " --kind afs --out " + (tmp.path / "r").string()) == 0);
  CHECK(fs::exists(tmp.path / "r" / "afs.csv"));
  CHECK(run_cli("report " + out.string() + " --kind nonsense") == 1);

  const fs::path bad = tmp.path / "bad.ini";
  {
    std::ofstream o(bad);
    o << "[train]\nepochs = -3\n";
  }
  CHECK(run_cli("run " + bad.string() + " --out " + (tmp.path / "x").string()) == 1);
  CHECK(run_cli("selftest") == 0);
}
