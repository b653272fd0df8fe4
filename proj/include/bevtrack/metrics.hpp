#pragma once

#include <optional>
#include <span>
#include <vector>

#include "bevtrack/sim.hpp"
#include "bevtrack/tracker.hpp"

namespace bevtrack {

struct EvalConfig {
  double d_match = 2.0;  // BEV center-distance gate, metres
  std::vector<double> map_thresholds = {0.5, 1.0, 2.0, 4.0};
  std::size_t amota_recall_points = 40;

  void validate() const;
};

struct ClearCounts {
  std::size_t tp = 0, fp = 0, fn = 0, ids = 0, gt = 0;
  double dist_sum = 0.0;  // accumulated matched distance

  double mota() const {
    return gt == 0 ? 0.0 : 1.0 - static_cast<double>(fp + fn + ids) / static_cast<double>(gt);
  }
  double motp() const { return tp == 0 ? 0.0 : dist_sum / static_cast<double>(tp); }
  double recall() const {
    return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
};

// CLEAR-MOT for one class over a scene set at one score threshold. Matching
// prefers each gt's previous prediction id, then runs Hungarian on BEV center
// distance among the rest; only pairs within d_match count.
ClearCounts clear_mot(std::span<const Scene> scenes,
                      std::span<const std::vector<Emission>> emissions, double d_match,
                      int class_id, double score_threshold);

struct AmotaResult {
  double amota = 0.0;
  double amotp = 0.0;
};

// Recall sweep: for each target recall, threshold the scored predictions to
// reach it, evaluate MOTAR at the achieved recall, and average. Unreachable
// targets contribute zero accuracy and are excluded from AMOTP.
AmotaResult amota(std::span<const Scene> scenes,
                  std::span<const std::vector<Emission>> emissions, double d_match,
                  int class_id, std::size_t recall_points);

// Greedy score-descending center-distance matching; area under the
// 101-point interpolated precision-recall curve.
double average_precision(std::span<const Scene> scenes,
                         std::span<const std::vector<Emission>> emissions, int class_id,
                         double dist_threshold);

struct TrackingSummary {
  struct PerClass {
    int class_id = 0;
    double amota = 0, amotp = 0, mota = 0, motp = 0, recall = 0, ap = 0;
    std::size_t ids = 0, fp = 0, fn = 0, tp = 0, gt = 0;
  };
  std::vector<PerClass> per_class;  // classes present in the ground truth
  double amota = 0, amotp = 0, mota = 0, recall = 0, map = 0;
  std::size_t ids = 0, fp = 0, fn = 0, tp = 0, gt = 0;
};

TrackingSummary evaluate_tracking(std::span<const Scene> scenes,
                                  std::span<const std::vector<Emission>> emissions,
                                  const EvalConfig& cfg);

}  // namespace bevtrack
