#include "bevtrack/sim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "bevtrack/rng.hpp"

namespace bevtrack {

using nlohmann::json;

void SimConfig::validate() const {
  if (half_range <= 0) throw ConfigError("sim: half_range must be positive");
  if (grid_nx == 0 || grid_ny == 0) throw ConfigError("sim: token grid must be non-empty");
  if (channels < 6 || channels % 2 != 0)
    throw ConfigError("sim: channels must be even and at least 6");
  if (n_classes == 0) throw ConfigError("sim: n_classes must be positive");
  if (dt <= 0) throw ConfigError("sim: dt must be positive");
  if (frames == 0) throw ConfigError("sim: frames must be positive");
  if (init_targets_min > init_targets_max)
    throw ConfigError("sim: init_targets_min > init_targets_max");
  if (max_targets < init_targets_max)
    throw ConfigError("sim: max_targets < init_targets_max");
  if (birth_rate < 0 || birth_rate > 1) throw ConfigError("sim: birth_rate outside [0,1]");
  if (death_rate < 0 || death_rate > 1) throw ConfigError("sim: death_rate outside [0,1]");
  if (speed_min < 0 || speed_max < speed_min) throw ConfigError("sim: bad speed range");
  if (signature_radius <= 0) throw ConfigError("sim: signature_radius must be positive");
}

Tensor posenc_tensor(const Tensor& positions, std::size_t channels, double max_wavelength,
                     double min_wavelength) {
  if (positions.rank() != 2 || positions.cols() != 3)
    throw ContractError("posenc: positions must be N x 3");
  if (channels % 2 != 0) throw ContractError("posenc: channels must be even");
  const std::size_t pairs = channels / 2;
  const std::size_t freqs_per_coord = (pairs + 2) / 3;

  // angles = positions * F with F selecting one coordinate per column at a
  // geometrically spaced frequency
  Tensor freq = Tensor::zeros({3, pairs});
  for (std::size_t j = 0; j < pairs; ++j) {
    const std::size_t coord = j % 3;
    const std::size_t k = j / 3;
    const double frac = freqs_per_coord > 1
                            ? static_cast<double>(k) / static_cast<double>(freqs_per_coord - 1)
                            : 0.0;
    const double wavelength = max_wavelength * std::pow(min_wavelength / max_wavelength, frac);
    freq.data()[coord * pairs + j] = 2.0 * M_PI / wavelength;
  }
  Tensor angles = matmul(positions, freq);
  std::vector<Tensor> halves = {sin(angles), cos(angles)};
  return concat_cols(halves);
}

Tensor sinusoidal_posenc(std::span<const Vec3> positions, std::size_t channels,
                         double max_wavelength, double min_wavelength) {
  NoGradGuard ng;
  Tensor pos = Tensor::zeros({positions.size(), 3});
  for (std::size_t n = 0; n < positions.size(); ++n)
    for (std::size_t d = 0; d < 3; ++d) pos.data()[n * 3 + d] = positions[n][d];
  return posenc_tensor(pos, channels, max_wavelength, min_wavelength);
}

namespace {

// Per-class box templates (l, w, h); jittered at spawn.
constexpr std::array<Vec3, 7> kClassSizes = {{
    {4.6, 1.9, 1.7},   // car
    {6.9, 2.5, 2.8},   // truck
    {11.0, 2.9, 3.5},  // bus
    {12.0, 2.9, 3.9},  // trailer
    {0.7, 0.7, 1.7},   // pedestrian
    {2.1, 0.8, 1.4},   // motorcycle
    {1.7, 0.6, 1.3},   // bicycle
}};

struct WorldTarget {
  std::int64_t id;
  int class_id;
  Vec2 pos;  // world frame
  double z;
  Vec3 size;
  double yaw;  // world frame
  Vec2 vel;    // world frame
};

WorldTarget spawn_target(std::int64_t id, const SE2& ego, const SimConfig& cfg,
                         std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cls(0, static_cast<int>(cfg.n_classes) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  std::uniform_real_distribution<double> speed(cfg.speed_min, cfg.speed_max);
  std::uniform_real_distribution<double> jitter(0.9, 1.1);

  WorldTarget t;
  t.id = id;
  t.class_id = cls(rng);
  const double r = cfg.spawn_range_factor * cfg.half_range * std::sqrt(unit(rng));
  const double a = angle(rng);
  const Vec2 local{r * std::cos(a), r * std::sin(a)};
  t.pos = ego.local_to_world(local);
  const Vec3 base = kClassSizes[static_cast<std::size_t>(t.class_id) % kClassSizes.size()];
  t.size = {base[0] * jitter(rng), base[1] * jitter(rng), base[2] * jitter(rng)};
  t.z = t.size[2] / 2.0;
  const double s = speed(rng);
  const double heading = angle(rng);
  t.vel = {s * std::cos(heading), s * std::sin(heading)};
  t.yaw = heading;
  return t;
}

GroundTruthTarget to_vehicle_frame(const WorldTarget& w, const SE2& ego) {
  GroundTruthTarget g;
  g.id = w.id;
  g.class_id = w.class_id;
  const Vec2 p = ego.world_to_local(w.pos);
  g.center = {p[0], p[1], w.z};
  g.size = w.size;
  g.yaw = wrap_angle(w.yaw - ego.heading);
  g.velocity = ego.rotate_world_to_local(w.vel);
  return g;
}

}  // namespace

Scene generate_scene(const SimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = make_rng(seed, "scene");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> accel(0.0, cfg.accel_noise);
  std::normal_distribution<double> turn(0.0, cfg.ego_turn_rate);

  Scene scene;
  scene.seed = seed;
  scene.config = cfg;

  SE2 ego;  // starts at world origin, heading 0
  std::vector<WorldTarget> live;
  std::int64_t next_id = 1;

  std::uniform_int_distribution<std::size_t> n0(cfg.init_targets_min, cfg.init_targets_max);
  const std::size_t initial = n0(rng);
  for (std::size_t i = 0; i < initial; ++i) live.push_back(spawn_target(next_id++, ego, cfg, rng));

  for (std::size_t t = 0; t < cfg.frames; ++t) {
    if (t > 0) {
      // ego advances along a smooth random heading drift
      ego.heading = wrap_angle(ego.heading + turn(rng) * cfg.dt);
      ego.x += cfg.ego_speed * cfg.dt * std::cos(ego.heading);
      ego.y += cfg.ego_speed * cfg.dt * std::sin(ego.heading);

      // constant velocity plus acceleration noise
      for (auto& w : live) {
        w.pos[0] += w.vel[0] * cfg.dt;
        w.pos[1] += w.vel[1] * cfg.dt;
        w.vel[0] += accel(rng) * cfg.dt;
        w.vel[1] += accel(rng) * cfg.dt;
        const double sp = std::hypot(w.vel[0], w.vel[1]);
        if (sp > 0.1) w.yaw = std::atan2(w.vel[1], w.vel[0]);
      }

      // deaths: sampled, plus forced retirement far outside the range
      std::vector<WorldTarget> kept;
      for (auto& w : live) {
        const Vec2 local = ego.world_to_local(w.pos);
        const bool out = std::max(std::abs(local[0]), std::abs(local[1])) >
                         cfg.kill_range_factor * cfg.half_range;
        const bool dies = unit(rng) < cfg.death_rate;
        if (!out && !dies) kept.push_back(w);
      }
      live.swap(kept);

      // births fill free slots
      const std::size_t free_slots =
          cfg.max_targets > live.size() ? cfg.max_targets - live.size() : 0;
      for (std::size_t s = 0; s < free_slots; ++s)
        if (unit(rng) < cfg.birth_rate) live.push_back(spawn_target(next_id++, ego, cfg, rng));
    }

    GroundTruthFrame frame;
    frame.t = t;
    frame.ego = ego;
    frame.dt = cfg.dt;
    for (const auto& w : live) frame.targets.push_back(to_vehicle_frame(w, ego));
    scene.frames.push_back(std::move(frame));
  }
  return scene;
}

TokenField render_tokens(const GroundTruthFrame& frame, const SimConfig& cfg,
                         std::uint64_t scene_seed) {
  const std::size_t T = cfg.grid_nx * cfg.grid_ny;
  const std::size_t C = cfg.channels;

  TokenField field;
  field.positions.reserve(T);
  const double step_x = 2.0 * cfg.half_range / static_cast<double>(cfg.grid_nx);
  const double step_y = 2.0 * cfg.half_range / static_cast<double>(cfg.grid_ny);
  for (std::size_t iy = 0; iy < cfg.grid_ny; ++iy)
    for (std::size_t ix = 0; ix < cfg.grid_nx; ++ix)
      field.positions.push_back({-cfg.half_range + (ix + 0.5) * step_x,
                                 -cfg.half_range + (iy + 0.5) * step_y, 0.0});

  field.tokens = sinusoidal_posenc(field.positions, C, 4.0 * cfg.half_range, 4.0);

  // per-class signature basis: fixed given the config, identical across scenes
  std::vector<std::vector<double>> class_embed(cfg.n_classes);
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    auto erng = make_rng(cfg.class_embed_seed, "class-embed", c);
    std::normal_distribution<double> n01(0.0, 1.0);
    class_embed[c].resize(C);
    for (auto& v : class_embed[c]) v = cfg.signature_scale * n01(erng);
  }

  for (const auto& g : frame.targets) {
    for (std::size_t i = 0; i < T; ++i) {
      const Vec3& anchor = field.positions[i];
      const double d = std::hypot(g.center[0] - anchor[0], g.center[1] - anchor[1]);
      if (d > cfg.signature_radius) continue;
      const double w = 1.0 - d / cfg.signature_radius;
      const Vec3 offset{g.center[0] - anchor[0], g.center[1] - anchor[1], g.center[2]};
      Tensor offenc = sinusoidal_posenc(std::span<const Vec3>(&offset, 1), C,
                                        4.0 * cfg.signature_radius, 0.5);
      double* row = field.tokens.data().data() + i * C;
      const auto& ce = class_embed[static_cast<std::size_t>(g.class_id)];
      for (std::size_t ch = 0; ch < C; ++ch) row[ch] += w * (ce[ch] + offenc.data()[ch]);
    }
  }

  auto nrng = make_rng(scene_seed, "tokens", frame.t);
  std::normal_distribution<double> noise(0.0, cfg.clutter_noise);
  for (auto& v : field.tokens.data()) v += noise(nrng);
  return field;
}

FrameSplit split_consistent_newborn(std::span<const GroundTruthTarget> prev_targets,
                                    const GroundTruthFrame& cur) {
  std::set<std::int64_t> prev_ids;
  for (const auto& g : prev_targets) prev_ids.insert(g.id);
  FrameSplit split;
  for (std::size_t i = 0; i < cur.targets.size(); ++i) {
    if (prev_ids.contains(cur.targets[i].id)) {
      split.consistent.push_back(i);
    } else {
      split.newborn.push_back(i);
    }
  }
  return split;
}

namespace {

json config_to_json(const SimConfig& c) {
  return json{{"half_range", c.half_range},
              {"grid_nx", c.grid_nx},
              {"grid_ny", c.grid_ny},
              {"channels", c.channels},
              {"n_classes", c.n_classes},
              {"dt", c.dt},
              {"frames", c.frames},
              {"init_targets_min", c.init_targets_min},
              {"init_targets_max", c.init_targets_max},
              {"max_targets", c.max_targets},
              {"birth_rate", c.birth_rate},
              {"death_rate", c.death_rate},
              {"accel_noise", c.accel_noise},
              {"clutter_noise", c.clutter_noise},
              {"signature_radius", c.signature_radius},
              {"signature_scale", c.signature_scale},
              {"speed_min", c.speed_min},
              {"speed_max", c.speed_max},
              {"ego_speed", c.ego_speed},
              {"ego_turn_rate", c.ego_turn_rate},
              {"kill_range_factor", c.kill_range_factor},
              {"spawn_range_factor", c.spawn_range_factor},
              {"class_embed_seed", c.class_embed_seed}};
}

SimConfig config_from_json(const json& j) {
  SimConfig c;
  c.half_range = j.at("half_range").get<double>();
  c.grid_nx = j.at("grid_nx").get<std::size_t>();
  c.grid_ny = j.at("grid_ny").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.dt = j.at("dt").get<double>();
  c.frames = j.at("frames").get<std::size_t>();
  c.init_targets_min = j.at("init_targets_min").get<std::size_t>();
  c.init_targets_max = j.at("init_targets_max").get<std::size_t>();
  c.max_targets = j.at("max_targets").get<std::size_t>();
  c.birth_rate = j.at("birth_rate").get<double>();
  c.death_rate = j.at("death_rate").get<double>();
  c.accel_noise = j.at("accel_noise").get<double>();
  c.clutter_noise = j.at("clutter_noise").get<double>();
  c.signature_radius = j.at("signature_radius").get<double>();
  c.signature_scale = j.at("signature_scale").get<double>();
  c.speed_min = j.at("speed_min").get<double>();
  c.speed_max = j.at("speed_max").get<double>();
  c.ego_speed = j.at("ego_speed").get<double>();
  c.ego_turn_rate = j.at("ego_turn_rate").get<double>();
  c.kill_range_factor = j.at("kill_range_factor").get<double>();
  c.spawn_range_factor = j.at("spawn_range_factor").get<double>();
  c.class_embed_seed = j.at("class_embed_seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_scene(const Scene& scene, const std::string& path) {
  json j;
  j["version"] = 1;
  j["seed"] = scene.seed;
  j["config"] = config_to_json(scene.config);
  json frames = json::array();
  for (const auto& f : scene.frames) {
    json jf;
    jf["t"] = f.t;
    jf["dt"] = f.dt;
    jf["ego"] = {f.ego.x, f.ego.y, f.ego.heading};
    json targets = json::array();
    for (const auto& g : f.targets) {
      targets.push_back(json{{"id", g.id},
                             {"class", g.class_id},
                             {"center", {g.center[0], g.center[1], g.center[2]}},
                             {"size", {g.size[0], g.size[1], g.size[2]}},
                             {"yaw", g.yaw},
                             {"vel", {g.velocity[0], g.velocity[1]}}});
    }
    jf["targets"] = std::move(targets);
    frames.push_back(std::move(jf));
  }
  j["frames"] = std::move(frames);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw ParseError("cannot open scene file for writing: " + path);
    f << j.dump(1) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

Scene load_scene(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open scene file: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError("scene parse error in " + path + ": " + e.what());
  }
  const int version = j.value("version", -1);
  if (version != 1)
    throw ParseError("scene " + path + ": unsupported schema version " +
                     std::to_string(version));

  Scene scene;
  try {
    scene.seed = j.at("seed").get<std::uint64_t>();
    scene.config = config_from_json(j.at("config"));
    for (const auto& jf : j.at("frames")) {
      GroundTruthFrame frame;
      frame.t = jf.at("t").get<std::size_t>();
      frame.dt = jf.at("dt").get<double>();
      const auto& ego = jf.at("ego");
      frame.ego = {ego.at(0).get<double>(), ego.at(1).get<double>(), ego.at(2).get<double>()};
      for (const auto& jt : jf.at("targets")) {
        GroundTruthTarget g;
        g.id = jt.at("id").get<std::int64_t>();
        g.class_id = jt.at("class").get<int>();
        const auto& c = jt.at("center");
        g.center = {c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()};
        const auto& s = jt.at("size");
        g.size = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
        g.yaw = jt.at("yaw").get<double>();
        const auto& v = jt.at("vel");
        g.velocity = {v.at(0).get<double>(), v.at(1).get<double>()};
        frame.targets.push_back(g);
      }
      scene.frames.push_back(std::move(frame));
    }
  } catch (const json::exception& e) {
    throw ParseError("scene " + path + ": malformed field: " + e.what());
  }
  return scene;
}

}  // namespace bevtrack
