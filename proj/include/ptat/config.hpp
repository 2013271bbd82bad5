#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ptat/continual.hpp"

namespace ptat::config {

// Everything a `run` needs. Sections of the INI file:
//   [run]       strategies, seeds, out
//   [sequence]  data::SequenceOptions plus the domain order
//   [model]     encoder sizes and prompt/adapter settings
//   [train]     TrainConfig, loss weights and distillation toggles
//   [backbone]  warm-up settings and the cache path
struct RunConfig {
  std::vector<std::string> strategies{"ptat"};
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs/default";

  data::SequenceOptions sequence;
  // 1-based domain indices in training order; empty keeps 1..num_domains.
  std::vector<std::size_t> order;

  ModelConfig model;
  continual::TrainConfig train;
  continual::PretrainConfig backbone;
  std::filesystem::path backbone_cache;  // empty: <out>/backbone.snap

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Parses INI text. Unknown sections or keys and malformed values are
// ValidationErrors naming "section.key"; missing keys keep their defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Every key, fixed order, doubles printed to round-trip exactly.
std::string to_ini(const RunConfig& cfg);

// Field-level checks; throws ValidationError listing every problem found.
void validate(const RunConfig& cfg);

// SHA-256 over the sections that determine the numbers a run produces
// ([sequence], [model], [train], [backbone] minus the cache path).
continual::ConfigHash config_hash(const RunConfig& cfg);
// Hash identifying a warm-up backbone: model shape and warm-up settings.
continual::ConfigHash backbone_hash(const RunConfig& cfg);

// Warm-up settings with the sequence's shapes and concept pool filled in.
continual::PretrainConfig resolved_backbone(const RunConfig& cfg);

// Model shapes follow the data: spectrogram size, vocabulary, text length.
ModelConfig resolved_model(const RunConfig& cfg);

}  // namespace ptat::config
