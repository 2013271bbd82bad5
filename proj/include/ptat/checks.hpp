#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ptat/encoder.hpp"

namespace ptat::checks {

using Log = std::function<void(const std::string&)>;

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct GradcheckOptions {
  std::vector<std::string> strategies{"ptat", "prompt_shallow", "low_rank"};
  ModelConfig model;  // desk configuration by default
  std::size_t batch = 4;
  double epsilon = 1e-6;  // 1e-5 steps across ReLU kinks in the 512-wide MLPs
  double tolerance = 1e-4;
  std::uint64_t seed = 7;
};

// Per strategy and loss term (kl, contrast, fd, sd, total): the largest
// |analytic - central difference| / max(1, |central difference|) over every
// trainable entry. Each perturbation runs one forward pass that yields all
// five terms; the teacher is a fixed perturbed copy of the model.
std::vector<CheckResult> gradcheck(const GradcheckOptions& opts, const Log& log = {});

// Property suites on small models: oracles, zero-at-teacher, partition law,
// parameter efficiency, determinism, snapshot integrity, config round trip.
std::vector<CheckResult> selftest(const Log& log = {});

// Individual suites, shared with the acceptance binary.
CheckResult check_recall_oracle();
CheckResult check_loss_oracles();
CheckResult check_zero_at_teacher();
CheckResult check_partition_law();
CheckResult check_parameter_efficiency();
CheckResult check_determinism();
CheckResult check_snapshot_integrity();
CheckResult check_config_round_trip();

}  // namespace ptat::checks
