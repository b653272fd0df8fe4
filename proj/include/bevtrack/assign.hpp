#pragma once

#include <span>
#include <utility>
#include <vector>

#include "bevtrack/decoder.hpp"

namespace bevtrack {

// rows = ground-truth targets, cols = queries
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> cost;

  double at(std::size_t i, std::size_t j) const { return cost[i * cols + j]; }
  double& at(std::size_t i, std::size_t j) { return cost[i * cols + j]; }
};

enum class AssignStrategy { OneToOne, OneToMany };

struct AssignConfig {
  double tau = 2.0;
  std::size_t k = 4;
  AssignStrategy strategy = AssignStrategy::OneToMany;
  // whether one query may serve several ground truths in one-to-many matching
  bool allow_query_overlap = false;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
};

struct AssignmentResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (gt index, query index)
  std::vector<std::size_t> unmatched_queries;
  std::vector<std::size_t> unmatched_gts;
};

// Focal classification cost against the gt class plus L1 distance in the
// normalized box parameterization.
CostMatrix matching_cost(std::span<const GroundTruthTarget> gts,
                         std::span<const DetachedPrediction> preds, const AssignConfig& cfg,
                         double half_range, double vel_scale);

// Minimum-total-cost one-to-one matching of size min(rows, cols); the matrix
// may be rectangular.
AssignmentResult hungarian(const CostMatrix& cost);

// Identity-guided matching: pair (gt, track query) iff the ids agree.
// Track queries whose target disappeared stay unmatched.
AssignmentResult assign_track_queries(const QuerySet& queries,
                                      std::span<const GroundTruthTarget> gts);

// Drop pairs costing more than tau, then accept remaining pairs in ascending
// cost order while each gt holds fewer than k queries; ties break toward the
// lower gt index, then the lower query index.
AssignmentResult assign_one_to_many(const CostMatrix& cost, const AssignConfig& cfg);

}  // namespace bevtrack
