#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "bevtrack/gradcheck.hpp"
#include "bevtrack/rng.hpp"
#include "bevtrack/tracker.hpp"
#include "test_util.hpp"

using namespace bevtrack;
using testutil::random_tensor;

namespace {

ModelConfig tiny_model(double half_range = 50.0) {
  ModelConfig cfg;
  cfg.channels = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn_hidden = 16;
  cfg.object_queries = 6;
  cfg.n_classes = 3;
  cfg.half_range = half_range;
  return cfg;
}

SimConfig tiny_sim() {
  SimConfig cfg;
  cfg.grid_nx = 4;
  cfg.grid_ny = 4;
  cfg.channels = 16;
  cfg.n_classes = 3;
  cfg.frames = 6;
  cfg.init_targets_min = 2;
  cfg.init_targets_max = 3;
  cfg.max_targets = 4;
  cfg.birth_rate = 0.3;
  cfg.death_rate = 0.1;
  return cfg;
}

TrackEntry make_track(std::int64_t id, Vec3 ref, Vec2 vel, std::size_t channels,
                      std::mt19937_64& rng) {
  TrackEntry tr;
  tr.id = id;
  tr.embedding = testutil::random_tensor({1, channels}, rng);
  tr.ref_tensor = Tensor::from_data({1, 3}, {ref[0], ref[1], ref[2]});
  tr.vel_tensor = Tensor::from_data({1, 2}, {vel[0], vel[1]});
  tr.reference = ref;
  tr.velocity = vel;
  tr.last_box.center = ref;
  tr.last_box.size = {4, 2, 1.6};
  tr.last_box.velocity = vel;
  return tr;
}

std::vector<Box3D> boxes_of(const TrackState& state) {
  std::vector<Box3D> boxes;
  for (const auto& tr : state.tracks) boxes.push_back(tr.last_box);
  return boxes;
}

}  // namespace

TEST_CASE("propagate") {
  std::mt19937_64 rng(1);
  SUBCASE("zero velocity and identical ego poses leave references unchanged") {
    TrackState state;
    state.tracks.push_back(make_track(1, {3.0, -4.0, 1.0}, {0, 0}, 8, rng));
    SE2 ego;
    propagate(state, boxes_of(state), 0.5, ego, ego);
    CHECK(state.tracks[0].reference[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(state.tracks[0].reference[1] == doctest::Approx(-4.0).epsilon(1e-15));
    CHECK(state.tracks[0].reference[2] == 1.0);
  }
  SUBCASE("constant velocity advances the BEV center") {
    TrackState state;
    state.tracks.push_back(make_track(1, {2.0, 1.0, 1.0}, {1.0, 0.0}, 8, rng));
    SE2 ego;
    propagate(state, boxes_of(state), 0.5, ego, ego);
    CHECK(state.tracks[0].reference[0] == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(state.tracks[0].reference[1] == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("a pure 90-degree ego rotation maps a static target exactly") {
    TrackState state;
    state.tracks.push_back(make_track(1, {5.0, 2.0, 1.0}, {0, 0}, 8, rng));
    SE2 prev;
    SE2 cur;
    cur.heading = M_PI / 2;
    propagate(state, boxes_of(state), 0.5, prev, cur);
    // world point (5, 2) seen from a frame rotated by +90deg is (2, -5)
    CHECK(state.tracks[0].reference[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(state.tracks[0].reference[1] == doctest::Approx(-5.0).epsilon(1e-12));
  }
  SUBCASE("propagation inverts exactly under reversed velocity") {
    TrackState state;
    state.tracks.push_back(make_track(1, {7.0, -3.0, 1.2}, {2.0, 1.5}, 8, rng));
    SE2 ego;
    propagate(state, boxes_of(state), 0.5, ego, ego);
    state.tracks[0].last_box.center = state.tracks[0].reference;
    state.tracks[0].last_box.velocity = {-2.0, -1.5};
    state.tracks[0].vel_tensor = Tensor::from_data({1, 2}, {-2.0, -1.5});
    propagate(state, boxes_of(state), 0.5, ego, ego);
    CHECK(state.tracks[0].reference[0] == doctest::Approx(7.0).epsilon(1e-12));
    CHECK(state.tracks[0].reference[1] == doctest::Approx(-3.0).epsilon(1e-12));
  }
  SUBCASE("contract violations") {
    TrackState state;
    state.tracks.push_back(make_track(1, {0, 0, 1}, {0, 0}, 8, rng));
    SE2 ego;
    CHECK_THROWS_AS(propagate(state, boxes_of(state), 0.0, ego, ego), ContractError);
    std::vector<Box3D> none;
    CHECK_THROWS_AS(propagate(state, none, 0.5, ego, ego), ContractError);
  }
}

TEST_CASE("training and inference share one bitwise-identical standard forward") {
  ModelConfig mcfg = tiny_model();
  SimConfig scfg = tiny_sim();
  ParamStore params;
  build_model_params(params, mcfg, 7);
  Scene scene = generate_scene(scfg, 3);
  TokenField tokens = render_tokens(scene.frames[0], scfg, scene.seed);

  std::mt19937_64 rng(9);
  TrackState state;
  state.tracks.push_back(make_track(4, {10, 5, 1}, {1, 0}, mcfg.channels, rng));
  state.tracks.push_back(make_track(9, {-12, 3, 1}, {0, -1}, mcfg.channels, rng));

  FrameForward taped = forward_frame(state, tokens, params, mcfg);
  Tensor taped_out = taped.s_out.layers.back();
  Tensor taped_center = taped.s_pred.center;
  {
    NoGradGuard ng;
    FrameForward plain = forward_frame(state, tokens, params, mcfg);
    CHECK(plain.s_out.layers.back().data() == taped_out.data());
    CHECK(plain.s_pred.center.data() == taped_center.data());
    CHECK(plain.s_pred.class_probs.data() == taped.s_pred.class_probs.data());
  }
}

TEST_CASE("step_frame lifecycle") {
  ModelConfig mcfg = tiny_model();
  SimConfig scfg = tiny_sim();
  ParamStore params;
  build_model_params(params, mcfg, 21);
  Scene scene = generate_scene(scfg, 4);
  LifecycleConfig lcfg;

  Tensor cls_bias = params.get("predictor.cls.fc2.b");

  SUBCASE("no confident queries and no live tracks emit nothing") {
    std::fill(cls_bias.data().begin(), cls_bias.data().end(), -10.0);
    TrackState state;
    TokenField tokens = render_tokens(scene.frames[0], scfg, scene.seed);
    auto ems = step_frame(state, tokens, params, mcfg, lcfg, 0);
    CHECK(ems.empty());
    CHECK(state.tracks.empty());
  }

  SUBCASE("confident object queries spawn tracks that re-enter as track queries") {
    std::fill(cls_bias.data().begin(), cls_bias.data().end(), 3.0);
    TrackState state;
    TokenField tokens = render_tokens(scene.frames[0], scfg, scene.seed);
    auto ems = step_frame(state, tokens, params, mcfg, lcfg, 0);
    CHECK(!ems.empty());
    CHECK(state.tracks.size() == ems.size());
    std::set<std::int64_t> ids;
    for (const auto& e : ems) ids.insert(e.id);
    CHECK(ids.size() == ems.size());

    const std::size_t live = state.tracks.size();
    std::vector<Box3D> boxes = boxes_of(state);
    propagate(state, boxes, scene.frames[0].dt, scene.frames[0].ego, scene.frames[1].ego);
    TokenField tokens1 = render_tokens(scene.frames[1], scfg, scene.seed);
    auto ems1 = step_frame(state, tokens1, params, mcfg, lcfg, 1);
    std::set<std::int64_t> ids1;
    for (const auto& e : ems1) ids1.insert(e.id);
    for (std::int64_t id : ids) CHECK(ids1.contains(id));
    CHECK(state.tracks.size() >= live);
  }

  SUBCASE("a track starved of confidence retires and its id never returns") {
    std::fill(cls_bias.data().begin(), cls_bias.data().end(), 3.0);
    lcfg.max_miss_age = 2;
    TrackState state;
    TokenField tokens = render_tokens(scene.frames[0], scfg, scene.seed);
    auto ems0 = step_frame(state, tokens, params, mcfg, lcfg, 0);
    REQUIRE(!ems0.empty());
    std::set<std::int64_t> spawned;
    for (const auto& e : ems0) spawned.insert(e.id);

    // starve every query of confidence from now on
    std::fill(cls_bias.data().begin(), cls_bias.data().end(), -10.0);
    bool emitted_after = false;
    for (std::size_t t = 1; t < 5; ++t) {
      const auto& prev = scene.frames[(t - 1) % scene.frames.size()];
      const auto& cur = scene.frames[t % scene.frames.size()];
      std::vector<Box3D> boxes = boxes_of(state);
      propagate(state, boxes, prev.dt, prev.ego, cur.ego);
      auto ems = step_frame(state, render_tokens(cur, scfg, scene.seed), params, mcfg, lcfg,
                            t);
      for (const auto& e : ems)
        if (spawned.contains(e.id)) emitted_after = true;
    }
    CHECK_FALSE(emitted_after);
    CHECK(state.tracks.empty());  // all retired after max_miss_age misses
  }
}

TEST_CASE("inference is deterministic") {
  ModelConfig mcfg = tiny_model();
  SimConfig scfg = tiny_sim();
  ParamStore params;
  build_model_params(params, mcfg, 33);
  Tensor cls_bias = params.get("predictor.cls.fc2.b");
  std::fill(cls_bias.data().begin(), cls_bias.data().end(), 1.0);
  Scene scene = generate_scene(scfg, 8);
  LifecycleConfig lcfg;

  auto run = [&] {
    TrackState state;
    std::vector<Emission> all;
    for (std::size_t t = 0; t < scene.frames.size(); ++t) {
      if (t > 0) {
        std::vector<Box3D> boxes = boxes_of(state);
        propagate(state, boxes, scene.frames[t - 1].dt, scene.frames[t - 1].ego,
                  scene.frames[t].ego);
      }
      auto ems = step_frame(state, render_tokens(scene.frames[t], scfg, scene.seed), params,
                            mcfg, lcfg, t);
      all.insert(all.end(), ems.begin(), ems.end());
    }
    return all;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].t == b[i].t);
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].box == b[i].box);
  }
}

TEST_CASE("live track ids form contiguous spans and classes never flip") {
  ModelConfig mcfg = tiny_model();
  SimConfig scfg = tiny_sim();
  scfg.frames = 8;
  ParamStore params;
  build_model_params(params, mcfg, 55);
  Tensor cls_bias = params.get("predictor.cls.fc2.b");
  std::fill(cls_bias.data().begin(), cls_bias.data().end(), 0.5);
  Scene scene = generate_scene(scfg, 5);
  LifecycleConfig lcfg;
  lcfg.max_miss_age = 1;

  TrackState state;
  std::map<std::int64_t, std::vector<std::size_t>> live_frames;
  std::map<std::int64_t, std::set<int>> classes;
  for (std::size_t t = 0; t < scene.frames.size(); ++t) {
    if (t > 0) {
      std::vector<Box3D> boxes = boxes_of(state);
      propagate(state, boxes, scene.frames[t - 1].dt, scene.frames[t - 1].ego,
                scene.frames[t].ego);
    }
    auto ems =
        step_frame(state, render_tokens(scene.frames[t], scfg, scene.seed), params, mcfg,
                   lcfg, t);
    for (const auto& tr : state.tracks) live_frames[tr.id].push_back(t);
    for (const auto& e : ems) classes[e.id].insert(e.class_id);
  }
  for (const auto& [id, frames] : live_frames)
    for (std::size_t i = 1; i < frames.size(); ++i) CHECK(frames[i] == frames[i - 1] + 1);
  for (const auto& [id, cls] : classes) CHECK(cls.size() == 1);
}

TEST_CASE("run_clip_training") {
  ModelConfig mcfg = tiny_model();
  SimConfig scfg = tiny_sim();
  ParamStore params;
  build_model_params(params, mcfg, 77);
  AssignConfig acfg;
  LifecycleConfig lcfg;
  ClipConfig clip;
  clip.clip_length = 2;

  SUBCASE("a scene without targets yields detection background loss only") {
    SimConfig empty_cfg = scfg;
    empty_cfg.init_targets_min = 0;
    empty_cfg.init_targets_max = 0;
    empty_cfg.max_targets = 0;
    empty_cfg.birth_rate = 0.0;
    Scene scene = generate_scene(empty_cfg, 6);
    ClipLossReport r = run_clip_training(scene, 0, clip, params, mcfg, acfg, lcfg);
    CHECK(r.det_total > 0.0);
    CHECK(r.track_total == 0.0);
    CHECK(r.asso_total == 0.0);
    for (const auto& row : r.rows)
      CHECK((row.term == "det_s" || row.term == "det_u"));  // all-negative focal only
  }

  SUBCASE("frame 1 never runs the parallel decoder") {
    Scene scene = generate_scene(scfg, 7);
    ClipLossReport r = run_clip_training(scene, 0, clip, params, mcfg, acfg, lcfg);
    for (const auto& row : r.rows) {
      if (row.frame == 1) {
        CHECK(row.term != "det_u");
        CHECK(row.term != "track_u");
        CHECK(row.term != "asso");
        CHECK(row.term != "track_s");
      }
    }
    // later frames do carry parallel-decoder terms
    bool has_u = false;
    for (const auto& row : r.rows) has_u |= row.frame == 2 && row.term == "det_u";
    CHECK(has_u);
  }

  SUBCASE("a scene shorter than the clip violates the contract") {
    Scene scene = generate_scene(scfg, 8);
    ClipConfig long_clip = clip;
    long_clip.clip_length = scene.frames.size() + 1;
    CHECK_THROWS_AS(run_clip_training(scene, 0, long_clip, params, mcfg, acfg, lcfg),
                    ContractError);
  }

  SUBCASE("baseline toggles skip the parallel decoder entirely") {
    Scene scene = generate_scene(scfg, 9);
    ClipConfig baseline = clip;
    baseline.toggles = {false, false, false};
    ClipLossReport r = run_clip_training(scene, 0, baseline, params, mcfg, acfg, lcfg);
    for (const auto& row : r.rows) {
      CHECK(row.term != "det_u");
      CHECK(row.term != "track_u");
      CHECK(row.term != "asso");
    }
  }

  SUBCASE("clip gradients match finite differences on a micro scene") {
    ModelConfig micro = tiny_model(20.0);
    micro.channels = 8;
    micro.layers = 1;
    micro.heads = 2;
    micro.ffn_hidden = 8;
    micro.object_queries = 2;
    micro.n_classes = 2;

    SimConfig msim;
    msim.half_range = 20.0;
    msim.grid_nx = 2;
    msim.grid_ny = 1;
    msim.channels = 8;
    msim.n_classes = 2;
    msim.frames = 2;
    msim.init_targets_min = 1;
    msim.init_targets_max = 1;
    msim.max_targets = 2;
    msim.birth_rate = 0.0;
    msim.death_rate = 0.0;
    msim.accel_noise = 0.0;
    msim.clutter_noise = 0.01;
    msim.signature_radius = 15.0;
    msim.speed_max = 2.0;
    Scene scene = generate_scene(msim, 11);

    ParamStore micro_params;
    build_model_params(micro_params, micro, 13);
    ClipConfig micro_clip;
    micro_clip.clip_length = 2;

    auto make_loss = [&] {
      return run_clip_training(scene, 0, micro_clip, micro_params, micro, acfg, lcfg)
          .total_tensor;
    };
    // the shared cross-attention weight named by the contract, plus a few more
    std::vector<std::pair<std::string, Tensor>> inputs;
    for (const char* n : {"s_decoder.layer0.ca.q.w", "s_decoder.layer0.ffn.fc1.w",
                          "predictor.offset.fc2.w", "object_queries.embed"})
      inputs.emplace_back(n, micro_params.get(n));
    auto rep = finite_diff_check(make_loss, inputs, 1e-6, 8);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("per-layer auxiliary losses scale linearly when layers are identical") {
  // zero CA output projections and FFN second layers make every decoder layer
  // an identity map, so all layers emit identical predictions
  SimConfig scfg = tiny_sim();
  Scene scene = generate_scene(scfg, 15);
  AssignConfig acfg;
  LifecycleConfig lcfg;

  auto loss_with_layers = [&](std::size_t layers) {
    ModelConfig mcfg = tiny_model();
    mcfg.layers = layers;
    ParamStore params;
    build_model_params(params, mcfg, 19);
    for (std::size_t l = 0; l < layers; ++l) {
      for (const char* part : {".sa.o.w", ".sa.o.b", ".ca.o.w", ".ca.o.b", ".ffn.fc2.w",
                               ".ffn.fc2.b"}) {
        Tensor t = params.get("s_decoder.layer" + std::to_string(l) + part);
        std::fill(t.data().begin(), t.data().end(), 0.0);
      }
    }
    ClipConfig clip;
    clip.clip_length = 2;
    return run_clip_training(scene, 0, clip, params, mcfg, acfg, lcfg);
  };

  ClipLossReport one = loss_with_layers(1);
  ClipLossReport three = loss_with_layers(3);
  // association is final-layer only; compare the per-layer terms
  CHECK(three.det_total == doctest::Approx(3.0 * one.det_total).epsilon(1e-9));
  CHECK(three.track_total == doctest::Approx(3.0 * one.track_total).epsilon(1e-9));
}
