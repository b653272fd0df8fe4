#pragma once

#include <cstdint>
#include <string>

#include "bevtrack/assign.hpp"
#include "bevtrack/loss.hpp"
#include "bevtrack/metrics.hpp"
#include "bevtrack/optim.hpp"
#include "bevtrack/sim.hpp"
#include "bevtrack/tracker.hpp"

namespace bevtrack {

struct TrainConfig {
  std::size_t clip_length = 3;
  std::size_t steps = 300;
  std::size_t checkpoint_interval = 100;

  void validate() const;
};

// One JSON document describes an entire run; it is validated up front and a
// verbatim snapshot lands in every run directory.
struct RunConfig {
  SimConfig sim;
  ModelConfig model;  // n_classes and half_range mirror the sim section
  AssignConfig assign;
  AuxAssignVariant variant;
  SupervisionToggles toggles;
  LifecycleConfig lifecycle;
  OptimConfig optim;
  TrainConfig train;
  LossWeights weights;
  EvalConfig eval;
  std::uint64_t seed = 1;

  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
std::string run_config_to_json(const RunConfig& cfg);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

}  // namespace bevtrack
