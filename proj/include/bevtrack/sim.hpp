#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bevtrack/common.hpp"
#include "bevtrack/tensor.hpp"

namespace bevtrack {

// Synthetic BEV world: ground-truth tracklets with identities plus a
// position-aware token field standing in for encoder features.
struct SimConfig {
  double half_range = 50.0;  // perception square [-half_range, half_range]^2
  std::size_t grid_nx = 16;
  std::size_t grid_ny = 16;
  std::size_t channels = 64;
  std::size_t n_classes = 7;
  double dt = 0.5;
  std::size_t frames = 12;
  std::size_t init_targets_min = 4;
  std::size_t init_targets_max = 8;
  std::size_t max_targets = 10;
  double birth_rate = 0.25;      // per empty slot per frame
  double death_rate = 0.04;      // per live target per frame
  double accel_noise = 0.4;      // m/s^2, per axis
  double clutter_noise = 0.02;   // token noise std
  double signature_radius = 9.0; // BEV metres a target imprints over
  double signature_scale = 1.0;
  double speed_min = 0.0;
  double speed_max = 8.0;
  double ego_speed = 5.0;
  double ego_turn_rate = 0.08;       // rad/s heading drift
  double kill_range_factor = 1.3;    // forced death beyond factor*half_range
  double spawn_range_factor = 0.8;
  std::uint64_t class_embed_seed = 9001;  // class signatures, fixed across scenes

  void validate() const;
};

struct GroundTruthTarget {
  std::int64_t id = 0;
  int class_id = 0;
  Vec3 center{};   // vehicle frame, metres
  Vec3 size{};     // l, w, h
  double yaw = 0;  // [-pi, pi), vehicle frame
  Vec2 velocity{}; // BEV, vehicle frame, m/s
};

struct GroundTruthFrame {
  std::size_t t = 0;
  std::vector<GroundTruthTarget> targets;
  SE2 ego;          // pose of the vehicle in the world frame
  double dt = 0.5;  // seconds to the next frame
};

struct TokenField {
  Tensor tokens;                // T x C, constants
  std::vector<Vec3> positions;  // T BEV anchors, metres
};

struct Scene {
  std::uint64_t seed = 0;
  SimConfig config;
  std::vector<GroundTruthFrame> frames;
};

// Sinusoidal encoding of 3D positions into `channels` dims: the first half
// holds sines, the second half cosines, with (coordinate, frequency) pairs
// assigned round-robin to x/y/z and wavelengths running geometrically from
// max_wavelength down to min_wavelength. Differentiable in the positions.
Tensor posenc_tensor(const Tensor& positions, std::size_t channels, double max_wavelength,
                     double min_wavelength);

// Constant-value convenience wrapper over posenc_tensor.
Tensor sinusoidal_posenc(std::span<const Vec3> positions, std::size_t channels,
                         double max_wavelength, double min_wavelength);

Scene generate_scene(const SimConfig& cfg, std::uint64_t seed);

// Pure function of (frame, cfg, scene seed); not serialized with the scene.
TokenField render_tokens(const GroundTruthFrame& frame, const SimConfig& cfg,
                         std::uint64_t scene_seed);

struct FrameSplit {
  std::vector<std::size_t> consistent;  // indices into cur.targets
  std::vector<std::size_t> newborn;
};

FrameSplit split_consistent_newborn(std::span<const GroundTruthTarget> prev_targets,
                                    const GroundTruthFrame& cur);

void save_scene(const Scene& scene, const std::string& path);
Scene load_scene(const std::string& path);

}  // namespace bevtrack
