#pragma once

#include <vector>

#include "bevtrack/assign.hpp"
#include "bevtrack/param_store.hpp"
#include "bevtrack/tensor.hpp"

namespace bevtrack {

// Object-to-track association scores, row-stochastic over the track axis.
struct AffinityMatrix {
  Tensor probs;                // N x M
  Tensor logits;               // N x M, kept for the numerically stable CE path
  std::vector<char> row_mask;  // 1 = row participates in the loss

  std::size_t objects() const { return probs.rows(); }
  std::size_t tracks() const { return probs.cols(); }
};

// Per object query: the track column sharing its assigned gt id, or -1.
struct AssoTarget {
  std::vector<int> track_col;

  bool all_masked() const {
    for (int c : track_col)
      if (c >= 0) return false;
    return true;
  }
};

// Appearance features from an FFN, pairwise Hadamard products against the
// other query type, an MLP to scalar logits, softmax over the track axis.
AffinityMatrix affinity(const Tensor& object_emb, const Tensor& track_emb,
                        const ParamStore& params, bool ffn_on_track = false);

// Join the one-to-many object assignment with the identity-guided track
// assignment over the same gt list. With allow_unmatched_gt, object queries
// whose gt owns no live track query are masked instead of rejected.
AssoTarget build_asso_target(const AssignmentResult& object_assign,
                             const AssignmentResult& track_assign,
                             std::size_t n_object_queries, bool allow_unmatched_gt = false);

// Mean negative log probability of the target column over unmasked rows;
// exactly zero when every row is masked.
Tensor asso_loss(const AffinityMatrix& aff, const AssoTarget& target);

}  // namespace bevtrack
