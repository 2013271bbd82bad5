// Acceptance run: one PASS/FAIL line per criterion. Exit status 0 only when
// all ten pass.
//
// Criteria 5-7 train the acceptance config end to end through the runner and
// read the results back through the report loader, as a user would.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ptat/checks.hpp"
#include "ptat/config.hpp"
#include "ptat/errors.hpp"
#include "ptat/eval.hpp"
#include "ptat/report.hpp"
#include "ptat/runner.hpp"

namespace fs = std::filesystem;
using namespace ptat;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

struct Line {
  int id;
  std::string name;
  bool passed;
  std::string detail;
};

std::vector<Line> g_lines;
std::ofstream g_report;  // copy of stdout; ctest shows output only for failing tests

void say(const std::string& text) {
  std::printf("%s\n", text.c_str());
  std::fflush(stdout);
  if (g_report) g_report << text << "\n" << std::flush;
}

void emit(int id, const std::string& name, bool passed, const std::string& detail) {
  g_lines.push_back({id, name, passed, detail});
  say(std::string(passed ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + " (" + name +
      "): " + detail);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void note(const std::string& msg) {
  std::fprintf(stderr, "  %s\n", msg.c_str());
  std::fflush(stderr);
}

// Trains every (strategy, seed) of `cfg` from scratch into cfg.out.
void train_all(const config::RunConfig& cfg) {
  runner::RunOptions opts;
  opts.force = true;
  runner::prepare_output(cfg, opts);
  const ParameterStore backbone = runner::ensure_backbone(cfg, note);
  for (const auto& [strategy, seed] : runner::run_list(cfg)) {
    const auto t = Clock::now();
    const runner::RunResult r = runner::run_one(cfg, strategy, seed, backbone, opts);
    note(cfg.out.filename().string() + " " + strategy + " seed " + std::to_string(seed) + ": " +
         fmt("%.0f s", seconds_since(t)));
  }
  runner::write_run_manifest(cfg);
}

using BySeed = std::map<std::uint64_t, const report::LoadedRun*>;

std::map<std::string, BySeed> index_runs(const std::vector<report::LoadedRun>& runs) {
  std::map<std::string, BySeed> out;
  for (const auto& r : runs) out[r.history.strategy()][r.history.seed()] = &r;
  return out;
}

double final_r10(const report::LoadedRun& r, const std::string& dataset) {
  const std::size_t last = r.history.final_step();
  const double t2a = r.history.get(last, dataset, eval::Direction::t2a, 10).value();
  const double a2t = r.history.get(last, dataset, eval::Direction::a2t, 10).value();
  return 0.5 * (t2a + a2t);
}

double afs_of(const report::LoadedRun& r, const std::string& dataset) {
  for (const auto& e : eval::afs_report(r.history))
    if (e.dataset == dataset) return e.afs;
  throw ptat::Error("no AFS entry for " + dataset);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void property_criteria(bool run_gradcheck) {
  if (run_gradcheck) {
    const auto t = Clock::now();
    const auto results = checks::gradcheck({});
    const double secs = seconds_since(t);
    bool ok = secs < 120.0;
    std::string worst;
    for (const auto& r : results) {
      ok = ok && r.passed;
      if (!r.passed) worst += " [" + r.name + ": " + r.detail + "]";
    }
    emit(1, "gradient correctness", ok,
         std::to_string(results.size()) + " term checks, " + fmt("%.1f s", secs) +
             " (limit 120 s)" + (worst.empty() ? "" : ";" + worst));
  } else {
    emit(1, "gradient correctness", false, "skipped (--skip-gradcheck)");
  }

  const auto recall = checks::check_recall_oracle();
  const auto losses = checks::check_loss_oracles();
  emit(2, "oracle equivalence", recall.passed && losses.passed,
       recall.detail + "; " + losses.detail);

  const auto zero = checks::check_zero_at_teacher();
  emit(3, "zero at teacher", zero.passed, zero.detail);

  const auto partition = checks::check_partition_law();
  emit(4, "frozen-partition law", partition.passed, partition.detail);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config_path = PTAT_CONFIG_DIR "/acceptance.ini";
  std::string smoke_path = PTAT_CONFIG_DIR "/smoke.ini";
  std::string work = "acceptance_runs";
  bool skip_gradcheck = false;
  std::vector<int> known_red;
  app.add_option("--config", config_path, "trend experiment config")->check(CLI::ExistingFile);
  app.add_option("--work", work, "scratch directory for run outputs");
  app.add_flag("--skip-gradcheck", skip_gradcheck, "report criterion 1 as not run");
  app.add_option("--known-red", known_red,
                 "criteria expected to fail; they still print FAIL but do not fail the exit status")
      ->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  g_report.open(fs::path(work) / "report.txt");

  try {
    property_criteria(!skip_gradcheck);

    // 5-7: the trend experiments.
    config::RunConfig cfg = config::load_config(config_path);
    const fs::path root = work;
    cfg.out = root / "main";
    cfg.strategies = {"ptat", "finetune_sequential", "prompt_shallow"};
    if (cfg.backbone_cache.empty()) cfg.backbone_cache = root / "backbone.snap";
    config::validate(cfg);
    note("acceptance config " + config_path + ", " + std::to_string(cfg.seeds.size()) +
         " seeds, work dir " + root.string());

    // The warm-up stands in for the pretrained encoders and is not part of
    // the timed protocol.
    runner::ensure_backbone(cfg, note);
    const auto t_main = Clock::now();
    train_all(cfg);
    const double main_secs = seconds_since(t_main);

    const auto main_runs = report::load_runs({cfg.out}, false);
    auto by = index_runs(main_runs);
    const std::string first = main_runs.front().datasets.front();
    const std::size_t n = cfg.seeds.size();

    {
      std::size_t beats_ft = 0, beats_shallow = 0;
      double m_ptat = 0, m_ft = 0, m_shallow = 0;
      for (std::uint64_t s : cfg.seeds) {
        const double p = final_r10(*by["ptat"][s], first);
        const double f = final_r10(*by["finetune_sequential"][s], first);
        const double q = final_r10(*by["prompt_shallow"][s], first);
        beats_ft += p > f;
        beats_shallow += p > q;
        m_ptat += p / n;
        m_ft += f / n;
        m_shallow += q / n;
      }
      const std::size_t need = n >= 5 ? n - 1 : n;
      const bool ok = n >= 5 && beats_ft >= need && beats_shallow >= need &&
                      m_ptat > m_ft && m_ptat > m_shallow && main_secs < 1800.0;
      std::ostringstream d;
      d << first << " final R@10 ptat " << fmt("%.4f", m_ptat) << ", finetune_sequential "
        << fmt("%.4f", m_ft) << ", prompt_shallow " << fmt("%.4f", m_shallow)
        << "; seeds ptat>finetune " << beats_ft << "/" << n << ", ptat>prompt_shallow "
        << beats_shallow << "/" << n << " (need " << need << "); " << fmt("%.0f s", main_secs)
        << " (limit 1800 s)";
      emit(5, "forgetting trend", ok, d.str());
    }

    {
      double a_ptat = 0, a_ft = 0;
      for (std::uint64_t s : cfg.seeds) {
        a_ptat += afs_of(*by["ptat"][s], first) / n;
        a_ft += afs_of(*by["finetune_sequential"][s], first) / n;
      }
      emit(6, "AFS trend", a_ptat > a_ft,
           first + " mean AFS (t2a R@10) ptat " + fmt("%.4f", a_ptat) + ", finetune_sequential " +
               fmt("%.4f", a_ft));
    }

    {
      // Loss ablation: the full-loss runs above plus three variants.
      std::map<std::string, double> mean;
      for (std::uint64_t s : cfg.seeds) mean["full"] += eval::mean_final_recall(by["ptat"][s]->history) / n;
      const std::vector<std::tuple<std::string, bool, bool>> variants{
          {"sd_only", false, true}, {"fd_only", true, false}, {"none", false, false}};
      for (const auto& [name, fd, sd] : variants) {
        config::RunConfig v = cfg;
        v.strategies = {"ptat"};
        v.out = root / ("ablation_" + name);
        v.train.toggles.feature_distillation = fd;
        v.train.toggles.similarity_distillation = sd;
        train_all(v);
        for (const auto& r : report::load_runs({v.out}, false))
          mean[name] += eval::mean_final_recall(r.history) / n;
      }
      const double tie = 0.005;  // half a recall point
      auto geq = [&](const char* a, const char* b) { return mean[a] >= mean[b] - tie; };
      const bool ok = geq("full", "sd_only") && geq("sd_only", "none") &&
                      geq("full", "fd_only") && geq("fd_only", "none");
      std::ostringstream d;
      d << "mean final recall full " << fmt("%.4f", mean["full"]) << ", SD-only "
        << fmt("%.4f", mean["sd_only"]) << ", FD-only " << fmt("%.4f", mean["fd_only"])
        << ", none " << fmt("%.4f", mean["none"]) << " (ties within 0.005)";
      emit(7, "loss-ablation ordering", ok, d.str());
    }

    {
      const auto desk = checks::check_parameter_efficiency();
      // The same ratio as written into the run outputs.
      const std::size_t ptat_params = by["ptat"].begin()->second->history.trainable_params();
      const std::size_t ft_params =
          by["finetune_sequential"].begin()->second->history.trainable_params();
      const double ratio = static_cast<double>(ptat_params) / static_cast<double>(ft_params);
      emit(8, "parameter efficiency", desk.passed && ratio < 0.05,
           desk.detail + "; metrics files: " + std::to_string(ptat_params) + "/" +
               std::to_string(ft_params) + " = " + fmt("%.6f", ratio));
    }

    {
      const auto det = checks::check_determinism();
      // Two full runs of the same config into separate directories.
      config::RunConfig a = config::load_config(smoke_path);
      a.out = root / "determinism_a";
      a.backbone_cache = root / "determinism_backbone.snap";
      config::RunConfig b = a;
      b.out = root / "determinism_b";
      train_all(a);
      train_all(b);
      std::size_t compared = 0, differing = 0;
      for (const auto& [strategy, seed] : runner::run_list(a)) {
        for (const char* f : {"metrics.jsonl", "metrics.csv"}) {
          ++compared;
          differing += slurp(runner::run_dir(a, strategy, seed) / f) !=
                       slurp(runner::run_dir(b, strategy, seed) / f);
        }
      }
      emit(9, "determinism", det.passed && differing == 0 && compared > 0,
           det.detail + "; " + std::to_string(compared - differing) + "/" +
               std::to_string(compared) + " metrics files byte-identical across two runs");
    }

    {
      const auto snap = checks::check_snapshot_integrity();
      emit(10, "snapshot integrity", snap.passed, snap.detail);
    }
  } catch (const std::exception& e) {
    say(std::string("FAIL acceptance aborted: ") + e.what());
  }

  std::size_t passed = 0, unexpected = 0;
  std::string red;
  for (const auto& l : g_lines) {
    passed += l.passed;
    const bool declared = std::find(known_red.begin(), known_red.end(), l.id) != known_red.end();
    if (!l.passed) {
      red += " " + std::to_string(l.id) + (declared ? "" : "(unexpected)");
      unexpected += !declared;
    } else if (declared) {
      say("note: criterion " + std::to_string(l.id) + " passed but is declared known-red");
    }
  }
  say(std::to_string(passed) + "/10 criteria passed" + (red.empty() ? "" : "; red:" + red));
  return g_lines.size() == 10 && unexpected == 0 ? 0 : 1;
}
