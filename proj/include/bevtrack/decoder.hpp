#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bevtrack/param_store.hpp"
#include "bevtrack/sim.hpp"
#include "bevtrack/tensor.hpp"

namespace bevtrack {

struct ModelConfig {
  std::size_t channels = 64;
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 128;
  std::size_t object_queries = 64;
  std::size_t n_classes = 7;
  double half_range = 50.0;  // normalization scale; must match the sim range
  double vel_scale = 10.0;
  bool asso_ffn_on_track = false;  // apply the association FFN to track
                                   // embeddings instead of object embeddings

  void validate() const;
};

enum class QueryKind { Track, Object };

struct QueryMeta {
  QueryKind kind = QueryKind::Object;
  std::optional<std::int64_t> track_id;  // Track queries only
  int age = 0;
  int miss_count = 0;
};

// Ordered query set; track queries occupy rows [0, n_track), object queries
// follow. Row i refers to the same query at every decoder layer.
struct QuerySet {
  Tensor embeddings;    // N x C
  Tensor references_t;  // N x 3; object rows may be the learned parameter
  std::vector<Vec3> references;
  std::vector<QueryMeta> meta;
  std::size_t n_track = 0;

  std::size_t size() const { return meta.size(); }
};

enum class DecoderKind { Standard, NoSelfAttention };

struct DecoderOutput {
  std::vector<Tensor> layers;  // block outputs, one N x C tensor per layer
};

struct Box3D {
  Vec3 center{};
  Vec3 size{};
  double yaw = 0.0;
  Vec2 velocity{};

  std::array<double, 9> flat() const {
    return {center[0], center[1], center[2], size[0], size[1],
            size[2],   yaw,       velocity[0], velocity[1]};
  }
};

struct ClassScores {
  std::vector<double> p;

  int argmax() const;
  double max_score() const;
};

// Normalized box parameterization used for matching costs and regression:
// [c/half_range, log size, sin yaw, cos yaw, v/vel_scale] (10 entries).
std::array<double, 10> normalized_box(const Box3D& b, double half_range, double vel_scale);
std::array<double, 10> normalized_box(const GroundTruthTarget& g, double half_range,
                                      double vel_scale);

struct DetachedPrediction {
  std::array<double, 10> norm_box{};
  std::vector<double> class_probs;
};

// Graph-connected head outputs for a query set at one decoder layer.
struct Prediction {
  Tensor center;       // N x 3 (reference + offset)
  Tensor size_log;     // N x 3
  Tensor yaw_sincos;   // N x 2
  Tensor velocity;     // N x 2
  Tensor class_probs;  // N x n_classes, per-class sigmoid
  double half_range = 50.0;
  double vel_scale = 10.0;

  std::size_t count() const { return center.rows(); }
  Tensor norm_box_tensor() const;  // N x 10
  Box3D box_at(std::size_t i) const;
  ClassScores scores_at(std::size_t i) const;
  DetachedPrediction detach(std::size_t i) const;
};

// Registers all trainable tensors. The U-decoder holds no storage of its own:
// its cross-attention, FFN and norm names alias the S-decoder's tensors.
void build_model_params(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed);

Tensor reference_posenc(std::span<const Vec3> positions, const ModelConfig& cfg);

Tensor s_decoder_block(const Tensor& e, const Tensor& tokens, const Tensor& ref_pos,
                       const Tensor& tok_pos, const ParamStore& params,
                       const ModelConfig& cfg, std::size_t layer);
Tensor u_decoder_block(const Tensor& e, const Tensor& tokens, const Tensor& ref_pos,
                       const Tensor& tok_pos, const ParamStore& params,
                       const ModelConfig& cfg, std::size_t layer);

DecoderOutput run_decoder(DecoderKind kind, const QuerySet& queries, const TokenField& tokens,
                          const ParamStore& params, const ModelConfig& cfg);

Prediction predict(const Tensor& embeddings, const Tensor& references_t,
                   const ParamStore& params, const ModelConfig& cfg);

// Replace every query's reference by its predicted center.
void refine_references(QuerySet& queries, std::span<const Box3D> boxes);

// Fresh per-frame object queries backed by the learned embedding/reference
// tables (gradients flow into both).
QuerySet make_object_queries(const ParamStore& params, const ModelConfig& cfg);

}  // namespace bevtrack
