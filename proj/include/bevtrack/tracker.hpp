#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bevtrack/loss.hpp"

namespace bevtrack {

struct LifecycleConfig {
  double spawn_threshold = 0.4;  // object query score needed to start a track
  double keep_threshold = 0.35;  // track score below this counts as a miss
  int max_miss_age = 5;          // misses tolerated before retirement

  void validate() const;
};

struct TrackEntry {
  std::int64_t id = 0;
  int class_id = 0;  // pinned at spawn
  Tensor embedding;   // 1 x C, graph-connected during training
  Tensor ref_tensor;  // 1 x 3, predicted center carried through propagation
  Tensor vel_tensor;  // 1 x 2
  Vec3 reference{};   // detached mirrors of the two tensors
  Vec2 velocity{};
  Box3D last_box;
  int age = 0;
  int miss_count = 0;
};

struct TrackState {
  std::vector<TrackEntry> tracks;
  std::int64_t next_id = 1;
};

struct Emission {
  std::size_t t = 0;
  std::int64_t id = 0;
  int class_id = 0;
  double score = 0.0;
  std::array<double, 9> box{};  // [cx cy cz l w h yaw vx vy]
};

// Constant-velocity advance in the previous vehicle frame, then re-expression
// in the current one. Embeddings are carried over unchanged. The transform is
// applied to the tracked center/velocity tensors (gradients flow through the
// motion within a training clip); `boxes` carry the same values and keep the
// one-box-per-track contract checkable.
void propagate(TrackState& state, std::span<const Box3D> boxes, double dt,
               const SE2& ego_prev, const SE2& ego_cur);

// The standard-decoder forward shared verbatim by training and inference.
struct FrameForward {
  QuerySet queries;
  DecoderOutput s_out;
  Prediction s_pred;  // final layer
};

FrameForward forward_frame(const TrackState& state, const TokenField& tokens,
                           const ParamStore& params, const ModelConfig& cfg);

// Inference step: decode, spawn confident object queries, age out stale
// tracks, emit one box per live confident track.
std::vector<Emission> step_frame(TrackState& state, const TokenField& tokens,
                                 const ParamStore& params, const ModelConfig& mcfg,
                                 const LifecycleConfig& lcfg, std::size_t frame_t);

struct ClipConfig {
  std::size_t clip_length = 3;
  LossWeights weights;
  SupervisionToggles toggles;
  AuxAssignVariant variant;
};

// K consecutive frames with teacher-forced identities: tracks spawned from
// Hungarian-matched object queries inherit the ground-truth id, so the
// identity-guided assignment at t+1 is well defined.
ClipLossReport run_clip_training(const Scene& scene, std::size_t start_frame,
                                 const ClipConfig& clip, const ParamStore& params,
                                 const ModelConfig& mcfg, const AssignConfig& acfg,
                                 const LifecycleConfig& lcfg);

}  // namespace bevtrack
