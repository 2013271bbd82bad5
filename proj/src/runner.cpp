#include "ptat/runner.hpp"

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <random>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptat/errors.hpp"

namespace ptat::runner {

namespace fs = std::filesystem;
using config::RunConfig;

namespace {

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path snapshot_path(const fs::path& dir, std::size_t step) {
  return dir / "snapshots" / ("step" + std::to_string(step) + ".snap");
}

void write_run_json(const RunResult& r, const std::string& hash) {
  nlohmann::ordered_json j;
  j["strategy"] = r.strategy;
  j["seed"] = r.seed;
  j["config_hash"] = hash;
  j["status"] = r.ok ? "complete" : "failed";
  if (!r.ok) j["error"] = r.error;
  j["trainable_params"] = r.trainable_params;
  j["total_params"] = r.total_params;
  j["steps_trained"] = r.steps_trained;
  j["steps_restored"] = r.steps_restored;
  write_file_atomic(r.dir / "run.json", j.dump(2) + "\n");
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    out.flush();
    if (!out) throw Error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

fs::path run_dir(const RunConfig& cfg, const std::string& strategy, std::uint64_t seed) {
  return cfg.out / strategy / ("seed" + std::to_string(seed));
}

fs::path backbone_path(const RunConfig& cfg) {
  return cfg.backbone_cache.empty() ? cfg.out / "backbone.snap" : cfg.backbone_cache;
}

std::vector<std::pair<std::string, std::uint64_t>> run_list(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  for (const auto& s : cfg.strategies)
    for (std::uint64_t seed : cfg.seeds) out.emplace_back(s, seed);
  return out;
}

void prepare_output(const RunConfig& cfg, const RunOptions& opts) {
  config::validate(cfg);
  const fs::path echo = cfg.out / "config.ini";
  if (fs::exists(echo)) {
    if (opts.force) {
      for (const auto& s : cfg.strategies) fs::remove_all(cfg.out / s);
      fs::remove(cfg.out / "manifest.json");
    } else if (opts.resume) {
      const RunConfig before = config::load_config(echo);
      if (config::config_hash(before) != config::config_hash(cfg)) {
        throw ValidationError(cfg.out.string() +
                              " holds a run with a different configuration; use --force to "
                              "overwrite or choose another --out");
      }
    } else {
      throw ValidationError(cfg.out.string() +
                            " already holds a run; pass --resume to continue it or --force to "
                            "overwrite");
    }
  }
  fs::create_directories(cfg.out);
  write_file_atomic(echo, config::to_ini(cfg));
}

ParameterStore ensure_backbone(const RunConfig& cfg, const Log& log) {
  const fs::path path = backbone_path(cfg);
  const continual::ConfigHash hash = config::backbone_hash(cfg);
  if (fs::exists(path)) {
    try {
      ParameterStore params = continual::load_snapshot(path, hash).params;
      say(log, "backbone: loaded " + path.string());
      return params;
    } catch (const SnapshotError& e) {
      say(log, std::string("backbone: cache unusable (") + e.what() + "), retraining");
    }
  }
  const auto start = std::chrono::steady_clock::now();
  say(log, "backbone: warm-up training");
  continual::ModelSnapshot snap;
  snap.params = continual::pretrain_backbone(config::resolved_model(cfg),
                                             config::resolved_backbone(cfg), log);
  snap.config_hash = hash;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  continual::save_snapshot(snap, path);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char buf[64];
  std::snprintf(buf, sizeof buf, " (%.1f s)", secs);
  say(log, "backbone: saved " + path.string() + buf);
  return snap.params;
}

std::vector<data::DomainData> build_domains(const RunConfig& cfg, std::uint64_t seed) {
  const data::SequenceSpec seq = data::make_sequence(cfg.sequence, seed);
  std::vector<data::DomainData> all;
  for (const auto& spec : seq.domains) all.push_back(data::generate_domain(spec));
  if (cfg.order.empty()) return all;
  std::vector<data::DomainData> ordered;
  for (std::size_t idx : cfg.order) ordered.push_back(all.at(idx - 1));
  return ordered;
}

RunResult run_one(const RunConfig& cfg, const std::string& strategy_tag, std::uint64_t seed,
                  const ParameterStore& backbone, const RunOptions& opts) {
  const Strategy strategy = build_strategy(strategy_tag);
  const ModelConfig model = config::resolved_model(cfg);
  const continual::ConfigHash hash = config::config_hash(cfg);
  const std::string hash_hex = continual::to_hex(hash);

  RunResult r;
  r.strategy = strategy_tag;
  r.seed = seed;
  r.dir = run_dir(cfg, strategy_tag, seed);
  fs::create_directories(r.dir / "snapshots");
  if (!opts.resume) {
    for (const auto& f : fs::directory_iterator(r.dir / "snapshots")) fs::remove(f.path());
    fs::remove(r.dir / "metrics.jsonl");
    fs::remove(r.dir / "metrics.csv");
    fs::remove(r.dir / "log.txt");
  }

  std::ofstream logfile(r.dir / "log.txt", std::ios::app);
  const Log log = [&](const std::string& msg) {
    logfile << msg << "\n";
    logfile.flush();
    say(opts.log, strategy_tag + "/seed" + std::to_string(seed) + ": " + msg);
  };

  continual::TrainConfig train = cfg.train;
  train.seed = seed;
  continual::SequenceHooks hooks;
  hooks.log = log;
  hooks.save = [&](std::size_t step, const continual::ModelSnapshot& snap) {
    continual::save_snapshot(snap, snapshot_path(r.dir, step));
    ++r.steps_trained;
  };
  const auto write_metrics = [&](const eval::MetricsHistory& history) {
    std::ostringstream jsonl, csv;
    eval::write_jsonl(history, jsonl);
    eval::write_csv(history, csv);
    write_file_atomic(r.dir / "metrics.jsonl", jsonl.str());
    write_file_atomic(r.dir / "metrics.csv", csv.str());
  };
  hooks.progress = write_metrics;
  if (opts.resume) {
    hooks.load = [&](std::size_t step) -> std::optional<continual::ModelSnapshot> {
      const fs::path p = snapshot_path(r.dir, step);
      if (!fs::exists(p)) return std::nullopt;
      ++r.steps_restored;
      return continual::load_snapshot(p, hash);
    };
  }

  try {
    const continual::ModelState probe = continual::init_state(model, strategy, backbone, seed, hash);
    r.trainable_params = probe.params.trainable_count();
    r.total_params = probe.params.total_count();
    log("start: " + std::to_string(r.trainable_params) + " trainable of " +
        std::to_string(r.total_params) + " parameters, config " + hash_hex);

    const std::vector<data::DomainData> domains = build_domains(cfg, seed);
    const eval::MetricsHistory history =
        continual::run_sequence(domains, model, strategy, train, backbone, hash, hooks);

    write_metrics(history);
    char buf[96];
    std::snprintf(buf, sizeof buf, "done: mean final recall %.4f", eval::mean_final_recall(history));
    log(buf);
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
    log(std::string("failed: ") + e.what());
    write_run_json(r, hash_hex);
    throw;
  }
  write_run_json(r, hash_hex);
  return r;
}

void write_run_manifest(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["config_hash"] = continual::to_hex(config::config_hash(cfg));
  j["backbone_hash"] = continual::to_hex(config::backbone_hash(cfg));
  j["backbone"] = backbone_path(cfg).string();
  const ModelConfig model = config::resolved_model(cfg);
  ParameterStore shape;
  {
    std::mt19937_64 rng(0);
    init_audio_encoder(shape, model.audio, rng);
    init_text_encoder(shape, model.text, rng);
  }
  const std::size_t full = expected_trainable_count(
      build_strategy(StrategyTag::finetune_sequential), model, shape.total_count());
  j["finetune_trainable_params"] = full;
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& [strategy, seed] : run_list(cfg)) {
    const fs::path dir = run_dir(cfg, strategy, seed);
    nlohmann::ordered_json run;
    run["strategy"] = strategy;
    run["seed"] = seed;
    run["dir"] = fs::relative(dir, cfg.out).string();
    if (fs::exists(dir / "run.json")) {
      const auto info = nlohmann::json::parse(read_file(dir / "run.json"));
      run["status"] = info["status"];
      run["trainable_params"] = info["trainable_params"];
      const double tp = info["trainable_params"].get<double>();
      run["trainable_ratio"] = tp / static_cast<double>(full);
      run["steps_trained"] = info["steps_trained"];
      run["steps_restored"] = info["steps_restored"];
      if (info.contains("error")) run["error"] = info["error"];
    } else {
      run["status"] = "missing";
    }
    j["runs"].push_back(run);
  }
  write_file_atomic(cfg.out / "manifest.json", j.dump(2) + "\n");
}

}  // namespace ptat::runner
