#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevtrack/config.hpp"
#include "bevtrack/metrics.hpp"

namespace bevtrack {

// Write `count` seeded scene files (scene_00000.json, ...) under out_dir.
void simulate_scenes(const RunConfig& cfg, std::size_t count, const std::string& out_dir);

std::vector<Scene> load_scenes_dir(const std::string& dir);

struct TrainArtifacts {
  std::string checkpoint;  // manifest path
  std::string log_csv;
  std::string config_snapshot;
  double final_total = 0.0;
};

// Clip-sampled training with one optimizer step per clip. Throws NumericError
// after writing a diagnostic dump if any op goes non-finite.
TrainArtifacts train_run(const RunConfig& cfg, const std::string& scenes_dir,
                         const std::string& out_dir);

// Inference over held-out scenes; writes per-scene emission JSONL files and a
// summary CSV. With `oracle`, ground truth is emitted directly (test hook).
TrackingSummary eval_run(const RunConfig& cfg, const std::string& checkpoint_path,
                         const std::string& scenes_dir, const std::string& out_dir,
                         bool oracle = false);

void write_summary_csv(const TrackingSummary& summary, const std::string& path);

enum class AblationGrid { Hybrid, Assignment, Both };

struct AblationCell {
  std::string grid;
  std::size_t row = 0;
  std::string label;
  std::uint64_t seed = 0;
  double amota = 0, amotp = 0, recall = 0;
};

struct AblationTable {
  std::vector<AblationCell> cells;    // per (row, seed)
  std::vector<AblationCell> medians;  // per row, seed field unused
};

// Trains and evaluates every (row, seed) cell of the supervision-toggle grid
// and/or the assignment-variant grid; cells may run in parallel.
AblationTable ablate_run(const RunConfig& base, AblationGrid grid,
                         const std::vector<std::uint64_t>& seeds,
                         const std::string& scenes_dir, const std::string& eval_scenes_dir,
                         const std::string& out_dir, std::size_t jobs = 1);

// Median by the order-statistic definition (mean of the two middle order
// statistics for even counts).
double median(std::vector<double> values);

struct GradCheckOutcome {
  bool pass = false;
  std::string report;  // one line per suite
};

// Finite-difference suites over the numeric core, the association head, and
// the full clip loss on a micro configuration. `corrupt` injects a defect
// into one analytic gradient to prove the harness can fail.
GradCheckOutcome gradcheck_run(bool corrupt = false);

}  // namespace bevtrack
