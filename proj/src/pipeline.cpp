#include "bevtrack/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "bevtrack/gradcheck.hpp"
#include "bevtrack/rng.hpp"

namespace bevtrack {

namespace fs = std::filesystem;
using nlohmann::json;

void simulate_scenes(const RunConfig& cfg, std::size_t count, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = split_seed(cfg.seed, "scene", i);
    Scene scene = generate_scene(cfg.sim, seed);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05zu.json", i);
    save_scene(scene, (fs::path(out_dir) / name).string());
  }
}

std::vector<Scene> load_scenes_dir(const std::string& dir) {
  std::vector<std::string> paths;
  if (!fs::is_directory(dir)) throw ConfigError("not a scene directory: " + dir);
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw ConfigError("no scene files in " + dir);
  std::vector<Scene> scenes;
  scenes.reserve(paths.size());
  for (const auto& p : paths) scenes.push_back(load_scene(p));
  return scenes;
}

namespace {

void check_scene_compat(const RunConfig& cfg, const std::vector<Scene>& scenes) {
  for (const Scene& s : scenes) {
    if (s.config.channels != cfg.sim.channels || s.config.half_range != cfg.sim.half_range ||
        s.config.n_classes != cfg.sim.n_classes)
      throw ConfigError("scene/config mismatch (channels, half_range or n_classes)");
    if (s.frames.size() < cfg.train.clip_length)
      throw ConfigError("scene shorter than the configured clip length");
  }
}

std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

TrainArtifacts train_run(const RunConfig& cfg, const std::string& scenes_dir,
                         const std::string& out_dir) {
  cfg.validate();
  std::vector<Scene> scenes = load_scenes_dir(scenes_dir);
  check_scene_compat(cfg, scenes);
  fs::create_directories(out_dir);

  TrainArtifacts artifacts;
  artifacts.config_snapshot = (fs::path(out_dir) / "config.json").string();
  save_run_config(cfg, artifacts.config_snapshot);
  artifacts.checkpoint = (fs::path(out_dir) / "checkpoint.json").string();
  artifacts.log_csv = (fs::path(out_dir) / "train_log.csv").string();

  ParamStore params;
  build_model_params(params, cfg.model, cfg.seed);
  OptimConfig ocfg = cfg.optim;
  ocfg.total_steps = cfg.train.steps;
  AdamW opt(ocfg);

  ClipConfig clip;
  clip.clip_length = cfg.train.clip_length;
  clip.weights = cfg.weights;
  clip.toggles = cfg.toggles;
  clip.variant = cfg.variant;

  std::ofstream log(artifacts.log_csv, std::ios::trunc);
  log << "step,frame,term,value\n";

  auto rng = make_rng(cfg.seed, "train");
  std::uniform_int_distribution<std::size_t> pick_scene(0, scenes.size() - 1);

  for (std::size_t step = 1; step <= cfg.train.steps; ++step) {
    const std::size_t si = pick_scene(rng);
    const Scene& scene = scenes[si];
    const std::size_t max_start = scene.frames.size() - cfg.train.clip_length;
    std::uniform_int_distribution<std::size_t> pick_start(0, max_start);
    const std::size_t start = pick_start(rng);

    try {
      ClipLossReport report =
          run_clip_training(scene, start, clip, params, cfg.model, cfg.assign, cfg.lifecycle);
      params.zero_grads();
      backward(report.total_tensor);
      opt.step(params);

      for (const auto& row : report.rows)
        log << step << ',' << row.frame << ',' << row.term << ',' << csv_num(row.value) << '\n';
      log << step << ",0,total," << csv_num(report.total) << '\n';
      artifacts.final_total = report.total;
    } catch (const NumericError& e) {
      json dump;
      dump["step"] = step;
      dump["scene_seed"] = scene.seed;
      dump["start_frame"] = start;
      dump["error"] = e.what();
      std::ofstream d((fs::path(out_dir) / "nan_dump.json").string(), std::ios::trunc);
      d << dump.dump(2) << "\n";
      throw;
    }

    if (step % cfg.train.checkpoint_interval == 0 && step != cfg.train.steps)
      params.save_checkpoint(artifacts.checkpoint);
  }
  params.save_checkpoint(artifacts.checkpoint);
  return artifacts;
}

namespace {

std::vector<Emission> oracle_emissions(const Scene& scene) {
  std::vector<Emission> out;
  for (const auto& frame : scene.frames) {
    for (const auto& g : frame.targets) {
      Emission e;
      e.t = frame.t;
      e.id = g.id;
      e.class_id = g.class_id;
      e.score = 1.0;
      e.box = {g.center[0], g.center[1], g.center[2], g.size[0], g.size[1],
               g.size[2],   g.yaw,       g.velocity[0], g.velocity[1]};
      out.push_back(e);
    }
  }
  return out;
}

std::vector<Emission> run_scene_inference(const Scene& scene, const ParamStore& params,
                                          const RunConfig& cfg) {
  TrackState state;
  std::vector<Emission> all;
  for (std::size_t t = 0; t < scene.frames.size(); ++t) {
    const GroundTruthFrame& frame = scene.frames[t];
    if (t > 0) {
      const GroundTruthFrame& prev = scene.frames[t - 1];
      std::vector<Box3D> boxes;
      boxes.reserve(state.tracks.size());
      for (const auto& tr : state.tracks) boxes.push_back(tr.last_box);
      propagate(state, boxes, prev.dt, prev.ego, frame.ego);
    }
    const TokenField tokens = render_tokens(frame, scene.config, scene.seed);
    auto ems = step_frame(state, tokens, params, cfg.model, cfg.lifecycle, t);
    all.insert(all.end(), ems.begin(), ems.end());
  }
  return all;
}

void write_emissions_jsonl(const std::vector<Emission>& emissions, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  for (const Emission& e : emissions) {
    json j;
    j["t"] = e.t;
    j["id"] = e.id;
    j["class"] = e.class_id;
    j["score"] = e.score;
    j["box"] = e.box;
    f << j.dump() << "\n";
  }
}

}  // namespace

void write_summary_csv(const TrackingSummary& summary, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  f << "class,AMOTA,AMOTP,MOTA,Recall,IDS,FP,FN,mAP\n";
  char buf[256];
  for (const auto& pc : summary.per_class) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%zu,%zu,%zu,%.6f\n", pc.class_id,
                  pc.amota, pc.amotp, pc.mota, pc.recall, pc.ids, pc.fp, pc.fn, pc.ap);
    f << buf;
  }
  std::snprintf(buf, sizeof(buf), "all,%.6f,%.6f,%.6f,%.6f,%zu,%zu,%zu,%.6f\n", summary.amota,
                summary.amotp, summary.mota, summary.recall, summary.ids, summary.fp,
                summary.fn, summary.map);
  f << buf;
}

TrackingSummary eval_run(const RunConfig& cfg, const std::string& checkpoint_path,
                         const std::string& scenes_dir, const std::string& out_dir,
                         bool oracle) {
  cfg.validate();
  std::vector<Scene> scenes = load_scenes_dir(scenes_dir);
  fs::create_directories(out_dir);

  ParamStore params;
  if (!oracle) {
    build_model_params(params, cfg.model, cfg.seed);
    params.load_checkpoint(checkpoint_path);
    check_scene_compat(cfg, scenes);
  }

  std::vector<std::vector<Emission>> emissions;
  emissions.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::vector<Emission> ems =
        oracle ? oracle_emissions(scenes[i]) : run_scene_inference(scenes[i], params, cfg);
    char name[48];
    std::snprintf(name, sizeof(name), "emissions_scene_%05zu.jsonl", i);
    write_emissions_jsonl(ems, (fs::path(out_dir) / name).string());
    emissions.push_back(std::move(ems));
  }

  TrackingSummary summary = evaluate_tracking(scenes, emissions, cfg.eval);
  write_summary_csv(summary, (fs::path(out_dir) / "eval.csv").string());
  return summary;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median: empty sample");
  const std::size_t n = values.size();
  auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  if (n % 2 == 1) return *mid;
  const double hi = *mid;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(n / 2 - 1),
                   values.end());
  return (values[n / 2 - 1] + hi) / 2.0;
}

namespace {

struct GridRow {
  std::string grid;
  std::size_t row;
  std::string label;
  SupervisionToggles toggles;
  AuxAssignVariant variant;
};

std::vector<GridRow> grid_rows(AblationGrid grid) {
  std::vector<GridRow> rows;
  const AuxAssignVariant def;
  if (grid == AblationGrid::Hybrid || grid == AblationGrid::Both) {
    rows.push_back({"hybrid", 1, "baseline", {false, false, false}, def});
    rows.push_back({"hybrid", 2, "o2m", {true, false, false}, def});
    rows.push_back({"hybrid", 3, "o2o", {false, true, false}, def});
    rows.push_back({"hybrid", 4, "o2m+o2o", {true, true, false}, def});
    rows.push_back({"hybrid", 5, "full", {true, true, true}, def});
  }
  if (grid == AblationGrid::Assignment || grid == AblationGrid::Both) {
    rows.push_back({"assignment", 1, "s_decoder_newborn_o2m",
                    {true, false, false},
                    {AuxSource::SDecoder, AuxRange::Newborn, AssignStrategy::OneToMany}});
    rows.push_back({"assignment", 2, "u_decoder_all_o2m",
                    {true, true, true},
                    {AuxSource::UDecoder, AuxRange::All, AssignStrategy::OneToMany}});
    rows.push_back({"assignment", 3, "u_decoder_consistent_o2o",
                    {true, true, true},
                    {AuxSource::UDecoder, AuxRange::Consistent, AssignStrategy::OneToOne}});
    rows.push_back({"assignment", 4, "u_decoder_consistent_o2m",
                    {true, true, true},
                    {AuxSource::UDecoder, AuxRange::Consistent, AssignStrategy::OneToMany}});
  }
  return rows;
}

}  // namespace

AblationTable ablate_run(const RunConfig& base, AblationGrid grid,
                         const std::vector<std::uint64_t>& seeds,
                         const std::string& scenes_dir, const std::string& eval_scenes_dir,
                         const std::string& out_dir, std::size_t jobs) {
  if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
  fs::create_directories(out_dir);

  const std::vector<GridRow> rows = grid_rows(grid);
  struct Cell {
    const GridRow* row;
    std::uint64_t seed;
    AblationCell result;
    std::string error;
  };
  std::vector<Cell> cells;
  for (const GridRow& row : rows)
    for (std::uint64_t seed : seeds) cells.push_back({&row, seed, {}, {}});

  const int n_jobs = static_cast<int>(std::max<std::size_t>(jobs, 1));
#pragma omp parallel for schedule(dynamic) num_threads(n_jobs)
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    Cell& cell = cells[ci];
    try {
      RunConfig cfg = base;
      cfg.toggles = cell.row->toggles;
      cfg.variant = cell.row->variant;
      cfg.seed = cell.seed;

      const fs::path cell_dir = fs::path(out_dir) / cell.row->grid /
                                (cell.row->label + "_seed" + std::to_string(cell.seed));
      TrainArtifacts art = train_run(cfg, scenes_dir, cell_dir.string());
      TrackingSummary summary = eval_run(cfg, art.checkpoint, eval_scenes_dir,
                                         (cell_dir / "eval").string(), false);
      cell.result = {cell.row->grid, cell.row->row,    cell.row->label,
                     cell.seed,      summary.amota,    summary.amotp,
                     summary.recall};
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  }

  for (const Cell& cell : cells)
    if (!cell.error.empty())
      throw NumericError("ablation cell " + cell.row->label + " seed " +
                         std::to_string(cell.seed) + " failed: " + cell.error);

  AblationTable table;
  for (const Cell& cell : cells) table.cells.push_back(cell.result);
  for (const GridRow& row : rows) {
    std::vector<double> am, ap, rc;
    for (const Cell& cell : cells) {
      if (cell.row != &row) continue;
      am.push_back(cell.result.amota);
      ap.push_back(cell.result.amotp);
      rc.push_back(cell.result.recall);
    }
    AblationCell med;
    med.grid = row.grid;
    med.row = row.row;
    med.label = row.label;
    med.amota = median(am);
    med.amotp = median(ap);
    med.recall = median(rc);
    table.medians.push_back(med);
  }

  std::ofstream f((fs::path(out_dir) / "ablation.csv").string(), std::ios::trunc);
  f << "grid,row,label,seed,AMOTA,AMOTP,Recall\n";
  char buf[256];
  for (const auto& c : table.cells) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%s,%llu,%.6f,%.6f,%.6f\n", c.grid.c_str(), c.row,
                  c.label.c_str(), static_cast<unsigned long long>(c.seed), c.amota, c.amotp,
                  c.recall);
    f << buf;
  }
  for (const auto& c : table.medians) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%s,median,%.6f,%.6f,%.6f\n", c.grid.c_str(), c.row,
                  c.label.c_str(), c.amota, c.amotp, c.recall);
    f << buf;
  }
  return table;
}

// ---- gradient checking ------------------------------------------------

namespace {

struct SuiteResult {
  std::string name;
  FdReport rep;
  double tol;

  bool pass() const { return rep.pass(tol); }
};

SuiteResult numcore_suite() {
  auto rng = make_rng(99, "gradcheck-numcore");
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  auto rand_tensor = [&](Shape shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> data(n);
    for (auto& v : data) v = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(data), true);
  };

  Tensor a = rand_tensor({3, 4});
  Tensor b = rand_tensor({4, 3});
  Tensor g = rand_tensor({4});
  Tensor bb = rand_tensor({4});
  auto make_loss = [&] {
    Tensor h = relu(matmul(a, b));                   // 3x3
    Tensor s = softmax(matmul(h, transpose(b)), 1);  // 3x4 rows
    Tensor ln = layer_norm(s, g, bb);
    return add(reduce_mean(mul(ln, ln)), reduce_sum(abs(sigmoid(a))));
  };
  SuiteResult r;
  r.name = "numcore";
  r.tol = 1e-5;
  r.rep = finite_diff_check(make_loss, {{"a", a}, {"b", b}, {"gain", g}, {"bias", bb}});
  return r;
}

SuiteResult association_suite() {
  ModelConfig mcfg;
  mcfg.channels = 8;
  mcfg.layers = 1;
  mcfg.heads = 2;
  mcfg.ffn_hidden = 8;
  mcfg.object_queries = 3;
  mcfg.n_classes = 2;
  ParamStore params;
  build_model_params(params, mcfg, 4242);

  auto rng = make_rng(17, "gradcheck-asso");
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor obj = Tensor::zeros({3, 8}, true);
  Tensor trk = Tensor::zeros({2, 8}, true);
  for (auto& v : obj.data()) v = dist(rng);
  for (auto& v : trk.data()) v = dist(rng);

  AssoTarget target;
  target.track_col = {1, -1, 0};
  auto make_loss = [&] {
    AffinityMatrix aff = affinity(obj, trk, params, false);
    return asso_loss(aff, target);
  };
  std::vector<std::pair<std::string, Tensor>> inputs = {{"object_emb", obj},
                                                        {"track_emb", trk}};
  for (const char* n : {"asso.ffn.fc1.w", "asso.ffn.fc2.w", "asso.mlp.fc1.w", "asso.mlp.fc2.w",
                        "asso.mlp.fc2.b"})
    inputs.emplace_back(n, params.get(n));

  SuiteResult r;
  r.name = "association";
  r.tol = 1e-5;
  r.rep = finite_diff_check(make_loss, inputs);
  return r;
}

SuiteResult clip_suite(bool corrupt) {
  // micro configuration: 2 tokens, 2 object queries, K = 2
  SimConfig sim;
  sim.half_range = 20.0;
  sim.grid_nx = 2;
  sim.grid_ny = 1;
  sim.channels = 8;
  sim.n_classes = 2;
  sim.frames = 2;
  sim.init_targets_min = 1;
  sim.init_targets_max = 1;
  sim.max_targets = 2;
  sim.birth_rate = 0.0;
  sim.death_rate = 0.0;
  sim.accel_noise = 0.0;
  sim.clutter_noise = 0.01;
  sim.signature_radius = 15.0;
  sim.speed_max = 2.0;
  sim.ego_speed = 1.0;
  Scene scene = generate_scene(sim, 5);

  ModelConfig mcfg;
  mcfg.channels = 8;
  mcfg.layers = 1;
  mcfg.heads = 2;
  mcfg.ffn_hidden = 8;
  mcfg.object_queries = 2;
  mcfg.n_classes = 2;
  mcfg.half_range = sim.half_range;

  ParamStore params;
  build_model_params(params, mcfg, 17);

  AssignConfig acfg;
  LifecycleConfig lcfg;
  ClipConfig clip;
  clip.clip_length = 2;

  auto make_loss = [&] {
    return run_clip_training(scene, 0, clip, params, mcfg, acfg, lcfg).total_tensor;
  };
  std::vector<std::pair<std::string, Tensor>> inputs;
  for (const auto& [name, t] : params.canonical()) inputs.emplace_back(name, t);

  SuiteResult r;
  r.name = "clip_loss";
  r.tol = 1e-4;

  // manual sweep so the corruption hook can poison the analytic gradient
  Tensor loss = make_loss();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& [_, t] : inputs) analytic.push_back(t.grad());
  if (corrupt && !analytic.empty()) analytic[0][0] += 0.5;

  const double h = 1e-6;
  FdReport rep;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor t = inputs[ti].second;
    const std::size_t n = t.numel();
    const std::size_t max_entries = 6;
    const std::size_t stride = n <= max_entries ? 1 : (n + max_entries - 1) / max_entries;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = t.data()[i];
      double fp, fm;
      t.data()[i] = saved + h;
      {
        NoGradGuard ng;
        fp = make_loss().value();
      }
      t.data()[i] = saved - h;
      {
        NoGradGuard ng;
        fm = make_loss().value();
      }
      t.data()[i] = saved;
      const double fd = (fp - fm) / (2 * h);
      const double an = analytic[ti][i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      ++rep.entries_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_entry = inputs[ti].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  r.rep = rep;
  return r;
}

}  // namespace

GradCheckOutcome gradcheck_run(bool corrupt) {
  GradCheckOutcome outcome;
  outcome.pass = true;
  std::ostringstream os;
  for (SuiteResult r : {numcore_suite(), association_suite(), clip_suite(corrupt)}) {
    const bool ok = r.pass();
    outcome.pass = outcome.pass && ok;
    os << (ok ? "[PASS] " : "[FAIL] ") << "gradcheck " << r.name << ": max rel err "
       << csv_num(r.rep.max_rel_err) << " over " << r.rep.entries_checked << " entries (tol "
       << csv_num(r.tol) << ", worst " << (r.rep.worst_entry.empty() ? "-" : r.rep.worst_entry)
       << ")\n";
  }
  outcome.report = os.str();
  return outcome;
}

}  // namespace bevtrack
