#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ptat/eval.hpp"

namespace ptat::report {

enum class Kind { table, curves, afs };

Kind parse_kind(const std::string& s);

struct LoadedRun {
  std::filesystem::path dir;
  std::string config_hash;  // hex; from the nearest config.ini
  std::vector<std::string> datasets;  // training order, from the config
  eval::MetricsHistory history;
};

// Every metrics.jsonl under the given directories (a run output directory,
// a strategy directory or a single seed directory). Mixed config hashes are
// a ValidationError unless `force`; so is a repeated (strategy, seed).
std::vector<LoadedRun> load_runs(const std::vector<std::filesystem::path>& dirs, bool force);

// Every (step, dataset) cell the protocol requires but the run lacks.
std::vector<std::string> missing_cells(const LoadedRun& run);

// Final-step recall per strategy (mean over seeds), one block of six
// columns per dataset plus their average.
std::string table_csv(const std::vector<LoadedRun>& runs);

// SVG of recall@10 (t2a) against step, one polyline per strategy.
std::string curve_svg(const std::vector<LoadedRun>& runs, const std::string& dataset);

// AFS per (strategy, seed, dataset) and the per-strategy mean.
std::string afs_csv(const std::vector<LoadedRun>& runs);

// Writes the requested report into `out_dir`; returns the files written.
std::vector<std::filesystem::path> write_report(const std::vector<LoadedRun>& runs, Kind kind,
                                                const std::filesystem::path& out_dir);

}  // namespace ptat::report
