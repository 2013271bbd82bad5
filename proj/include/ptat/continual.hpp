#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ptat/baselines.hpp"
#include "ptat/data.hpp"
#include "ptat/eval.hpp"
#include "ptat/losses.hpp"
#include "ptat/params.hpp"

namespace ptat::continual {

using ConfigHash = std::array<std::uint8_t, 32>;

// SHA-256 of a canonical configuration text.
ConfigHash hash_config(std::string_view canonical);
std::string to_hex(const ConfigHash& hash);

struct TrainConfig {
  double learning_rate = 5e-5;
  double weight_decay = 1e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  losses::LossWeights weights;
  losses::LossToggles toggles;
  std::uint64_t seed = 0;

  // Throws ValidationError naming the offending field.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline constexpr std::uint32_t kSnapshotVersion = 1;

struct ModelSnapshot {
  ParameterStore params;  // values are float-representable
  ConfigHash config_hash{};
  std::uint32_t step = 0;
  std::uint32_t version = kSnapshotVersion;
};

struct ModelState {
  ModelConfig config;
  Strategy strategy;
  ParameterStore params;
  std::size_t step = 0;  // completed steps
  ConfigHash config_hash{};
};

// Backbone plus the strategy's prompts/adapters, partitioned for training.
// Extra parameters are drawn from a stream of `seed`.
ModelState init_state(const ModelConfig& cfg, const Strategy& strategy,
                      const ParameterStore& backbone, std::uint64_t seed,
                      const ConfigHash& hash);

ModelSnapshot make_snapshot(const ModelState& state);

// Atomic: writes `<path>.tmp` and renames it over `path`.
void save_snapshot(const ModelSnapshot& snapshot, const std::filesystem::path& path);
// SnapshotError kinds: io, format (bad magic), version, truncated, hash
// (payload CRC or expected config hash differs).
ModelSnapshot load_snapshot(const std::filesystem::path& path,
                            const std::optional<ConfigHash>& expected_hash = std::nullopt);

// Adam with decoupled weight decay over the trainable entries of a store.
class AdamW {
 public:
  AdamW(double learning_rate, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  // Frozen entries are never touched, even when a gradient is supplied.
  void step(ParameterStore& params, const std::map<std::string, Matrix>& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Matrix> m_, v_;
};

struct StepOutput {
  ModelState state;
  ModelSnapshot snapshot;
  std::vector<double> epoch_losses;           // mean batch loss per epoch
  std::vector<double> distillation_per_epoch;  // mean (L_FD + alpha L_SD) per epoch
};

// Trains step state.step + 1 on `train`. A teacher is required for
// distillation strategies after the first step, rejected on the first step,
// and must carry the state's config hash.
StepOutput run_step(const ModelState& state, const data::PairedDataset& train,
                    const ModelSnapshot* teacher, const TrainConfig& cfg);

struct SequenceHooks {
  // Returns a previously saved snapshot for a step, enabling resume.
  std::function<std::optional<ModelSnapshot>(std::size_t step)> load;
  std::function<void(std::size_t step, const ModelSnapshot&)> save;
  std::function<void(const std::string&)> log;
  // Called after every step's evaluation with the history so far.
  std::function<void(const eval::MetricsHistory&)> progress;
};

// The incremental protocol: train on each domain in order, then evaluate on
// the test split of every domain seen so far. finetune_joint trains once on
// the union; upper_bound trains an independent model per domain and scores
// each domain with its own model.
eval::MetricsHistory run_sequence(const std::vector<data::DomainData>& domains,
                                  const ModelConfig& model, const Strategy& strategy,
                                  const TrainConfig& cfg, const ParameterStore& backbone,
                                  const ConfigHash& hash, const SequenceHooks& hooks = {});

struct PretrainConfig {
  data::SequenceOptions data;  // held-out warm-up domains
  std::size_t epochs = 8;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 20240917;

  PretrainConfig() {
    data.num_domains = 4;
    data.overlap = 0.0;
  }

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

// Full-parameter contrastive warm-up of both encoders on held-out synthetic
// domains; returns the backbone rounded to snapshot precision, all frozen.
ParameterStore pretrain_backbone(const ModelConfig& model, const PretrainConfig& cfg,
                                 const std::function<void(const std::string&)>& log = {});

}  // namespace ptat::continual
