#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ptat/config.hpp"

namespace ptat::runner {

using Log = std::function<void(const std::string&)>;

struct RunOptions {
  bool resume = false;  // reuse snapshots already on disk
  bool force = false;   // discard existing outputs
  Log log;
};

struct RunResult {
  std::string strategy;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::size_t steps_trained = 0;
  std::size_t steps_restored = 0;
  bool ok = false;
  std::string error;
};

// <out>/<strategy>/seed<k>
std::filesystem::path run_dir(const config::RunConfig& cfg, const std::string& strategy,
                              std::uint64_t seed);
std::filesystem::path backbone_path(const config::RunConfig& cfg);

// Validates, then creates the output directory and echoes the config into
// it. Existing outputs need --resume (same config hash) or --force.
void prepare_output(const config::RunConfig& cfg, const RunOptions& opts);

// Loads the cached warm-up backbone or trains and caches it.
ParameterStore ensure_backbone(const config::RunConfig& cfg, const Log& log = {});

// Domains of one seed's sequence in training order.
std::vector<data::DomainData> build_domains(const config::RunConfig& cfg, std::uint64_t seed);

// One (strategy, seed) run: metrics.jsonl, metrics.csv, snapshots/, log.txt
// and run.json in its run directory. Errors propagate after run.json
// records the failure; snapshots of finished steps stay for --resume.
RunResult run_one(const config::RunConfig& cfg, const std::string& strategy, std::uint64_t seed,
                  const ParameterStore& backbone, const RunOptions& opts);

// Every (strategy, seed) pair of the config, strategies outermost.
std::vector<std::pair<std::string, std::uint64_t>> run_list(const config::RunConfig& cfg);

// <out>/manifest.json from each run's run.json.
void write_run_manifest(const config::RunConfig& cfg);

// Writes `text` to `path` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace ptat::runner
