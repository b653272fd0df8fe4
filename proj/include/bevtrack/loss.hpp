#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bevtrack/assign.hpp"
#include "bevtrack/association.hpp"
#include "bevtrack/decoder.hpp"

namespace bevtrack {

struct LossWeights {
  double det = 1.0;
  double track = 1.0;
  double asso = 1.0;

  void validate() const;
};

// Which auxiliary supervision the parallel decoder contributes. All off means
// plain standard-decoder training; the parallel forward is skipped entirely.
struct SupervisionToggles {
  bool o2m = true;   // one-to-many supervision for object queries
  bool o2o = true;   // one-to-one supervision for track queries
  bool asso = true;  // associative supervision
};

enum class AuxSource { SDecoder, UDecoder };
enum class AuxRange { Newborn, Consistent, All };

// Label-assignment variant for the auxiliary object-query supervision.
struct AuxAssignVariant {
  AuxSource source = AuxSource::UDecoder;
  AuxRange range = AuxRange::Consistent;
  AssignStrategy strategy = AssignStrategy::OneToMany;
};

// Binary-per-class focal loss over probabilities; `none` marks a pure
// background sample. Probabilities outside (0,1) violate the contract.
double focal_loss_value(std::span<const double> probs, std::optional<int> target,
                        double alpha, double gamma);
Tensor focal_loss(const Tensor& class_probs, std::optional<int> target, double alpha,
                  double gamma);

// L1 distance in the normalized box parameterization.
double box_l1_value(const Box3D& pred, const GroundTruthTarget& gt, double half_range,
                    double vel_scale);

struct FrameTerms {
  Tensor det_s, det_u, track_s, track_u, asso;  // undefined tensor = term absent
  bool has_u = false;
};

double term_value(const Tensor& t);

// Object-query assignment against a gt list: Hungarian for one-to-one,
// cost-filtered greedy for one-to-many. Query indices are local columns.
AssignmentResult object_assignment(std::span<const GroundTruthTarget> gts,
                                   std::span<const DetachedPrediction> preds,
                                   AssignStrategy strategy, const AssignConfig& acfg,
                                   const ModelConfig& mcfg);

struct FrameLossContext {
  const QuerySet* queries = nullptr;
  std::span<const GroundTruthTarget> targets;
  const FrameSplit* split = nullptr;
  const AssignmentResult* track_assign = nullptr;  // identity pairs vs the consistent list
  const AffinityMatrix* aff = nullptr;             // final-layer association, optional
  const AssoTarget* asso_target = nullptr;
};

// Per-layer auxiliary supervision: object-query assignments are recomputed
// from each layer's own predictions; the identity-guided track assignment is
// layer-independent. Each term is normalized by its matched-pair count
// (clamped to 1) and summed over layers.
FrameTerms frame_losses(const DecoderOutput& s_out, const DecoderOutput* u_out,
                        const FrameLossContext& ctx, const ParamStore& params,
                        const ModelConfig& mcfg, const AssignConfig& acfg,
                        const SupervisionToggles& toggles, const AuxAssignVariant& variant);

struct ClipLossReport {
  struct Row {
    std::size_t frame;  // 1-based within the clip
    std::string term;
    double value;
  };
  std::vector<Row> rows;
  double det_total = 0.0;
  double track_total = 0.0;
  double asso_total = 0.0;
  double total = 0.0;
  Tensor total_tensor;
};

// Weighted clip total: detection from frame 1, track and association from
// frame 2 onward.
ClipLossReport clip_loss(std::span<const FrameTerms> frames, const LossWeights& weights);

}  // namespace bevtrack
