#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bevtrack/pipeline.hpp"

using namespace bevtrack;

namespace {

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig cfg;
    cfg.optim.total_steps = cfg.train.steps;
    cfg.validate();
    return cfg;
  }
  return load_run_config(path);
}

void apply_toggles(RunConfig& cfg, const std::vector<std::string>& toggles) {
  for (const std::string& t : toggles) {
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("bad --toggle, expected name=on|off: " + t);
    const std::string name = t.substr(0, eq);
    const std::string value = t.substr(eq + 1);
    bool on;
    if (value == "on") {
      on = true;
    } else if (value == "off") {
      on = false;
    } else {
      throw ConfigError("bad --toggle value, expected on|off: " + t);
    }
    if (name == "o2m") {
      cfg.toggles.o2m = on;
    } else if (name == "o2o") {
      cfg.toggles.o2o = on;
    } else if (name == "asso") {
      cfg.toggles.asso = on;
    } else {
      throw ConfigError("unknown --toggle name: " + name);
    }
  }
}

std::vector<std::uint64_t> parse_seed_range(const std::string& spec) {
  const auto dots = spec.find("..");
  if (dots == std::string::npos) return {std::stoull(spec)};
  const std::uint64_t lo = std::stoull(spec.substr(0, dots));
  const std::uint64_t hi = std::stoull(spec.substr(dots + 2));
  if (hi < lo) throw ConfigError("bad --seeds range: " + spec);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-propagation multi-object tracking on synthetic BEV scenes"};
  app.require_subcommand(1);

  std::string config_path, scenes_dir, eval_scenes_dir, out_dir, checkpoint;
  std::vector<std::string> toggle_flags;
  std::size_t count = 10;
  std::uint64_t seed = 0;
  bool seed_set = false, oracle = false, corrupt = false;
  std::string seeds_spec;
  std::string grid_name = "hybrid";
  std::size_t jobs = 1;
  long long clip_k = -1;
  double tau = -1.0;
  long long match_k = -1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration JSON");
    cmd->add_option("--seed", seed, "override the base seed")->each([&](const std::string&) {
      seed_set = true;
    });
    cmd->add_option("--k", clip_k, "override the training clip length K");
    cmd->add_option("--tau", tau, "override the one-to-many cost threshold");
    cmd->add_option("--match-k", match_k, "override the per-target match budget k");
    cmd->add_option("--toggle", toggle_flags,
                    "supervision toggle, e.g. --toggle o2m=off (repeatable)");
  };

  CLI::App* sim_cmd = app.add_subcommand("simulate", "generate seeded scene files");
  add_common(sim_cmd);
  sim_cmd->add_option("--out", out_dir, "output directory")->required();
  sim_cmd->add_option("--count", count, "number of scenes");

  CLI::App* train_cmd = app.add_subcommand("train", "train on K-frame clips");
  add_common(train_cmd);
  train_cmd->add_option("--scenes", scenes_dir, "training scene directory")->required();
  train_cmd->add_option("--out", out_dir, "run output directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "track held-out scenes and score them");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint manifest path");
  eval_cmd->add_option("--scenes", scenes_dir, "evaluation scene directory")->required();
  eval_cmd->add_option("--out", out_dir, "output directory")->required();
  eval_cmd->add_flag("--oracle", oracle, "emit ground truth directly (pipeline test hook)");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run a supervision/assignment grid");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--scenes", scenes_dir, "training scene directory")->required();
  ablate_cmd->add_option("--eval-scenes", eval_scenes_dir, "held-out scene directory")
      ->required();
  ablate_cmd->add_option("--out", out_dir, "output directory")->required();
  ablate_cmd->add_option("--seeds", seeds_spec, "seed or range, e.g. 1..5");
  ablate_cmd->add_option("--grid", grid_name, "hybrid | assignment | both");
  ablate_cmd->add_option("--jobs", jobs, "parallel cells");

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  add_common(grad_cmd);
  grad_cmd->add_flag("--corrupt", corrupt, "poison one analytic gradient (must fail)");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = load_config_or_default(config_path);
    if (seed_set) cfg.seed = seed;
    if (clip_k > 0) cfg.train.clip_length = static_cast<std::size_t>(clip_k);
    if (tau > 0) cfg.assign.tau = tau;
    if (match_k > 0) cfg.assign.k = static_cast<std::size_t>(match_k);
    apply_toggles(cfg, toggle_flags);
    cfg.optim.total_steps = cfg.train.steps;
    cfg.validate();

    if (sim_cmd->parsed()) {
      simulate_scenes(cfg, count, out_dir);
      std::printf("wrote %zu scenes to %s\n", count, out_dir.c_str());
    } else if (train_cmd->parsed()) {
      TrainArtifacts art = train_run(cfg, scenes_dir, out_dir);
      std::printf("trained %zu steps, final clip loss %.6f\ncheckpoint: %s\n",
                  cfg.train.steps, art.final_total, art.checkpoint.c_str());
    } else if (eval_cmd->parsed()) {
      if (!oracle && checkpoint.empty())
        throw ConfigError("eval: --checkpoint is required unless --oracle is set");
      TrackingSummary s = eval_run(cfg, checkpoint, scenes_dir, out_dir, oracle);
      std::printf("AMOTA %.4f AMOTP %.4f MOTA %.4f Recall %.4f IDS %zu FP %zu FN %zu mAP %.4f\n",
                  s.amota, s.amotp, s.mota, s.recall, s.ids, s.fp, s.fn, s.map);
    } else if (ablate_cmd->parsed()) {
      AblationGrid grid;
      if (grid_name == "hybrid") {
        grid = AblationGrid::Hybrid;
      } else if (grid_name == "assignment") {
        grid = AblationGrid::Assignment;
      } else if (grid_name == "both") {
        grid = AblationGrid::Both;
      } else {
        throw ConfigError("unknown --grid: " + grid_name);
      }
      std::vector<std::uint64_t> seeds =
          seeds_spec.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_seed_range(seeds_spec);
      AblationTable table = ablate_run(cfg, grid, seeds, scenes_dir, eval_scenes_dir, out_dir,
                                       jobs);
      for (const auto& m : table.medians)
        std::printf("%s %zu %-26s median AMOTA %.4f AMOTP %.4f Recall %.4f\n", m.grid.c_str(),
                    m.row, m.label.c_str(), m.amota, m.amotp, m.recall);
    } else if (grad_cmd->parsed()) {
      GradCheckOutcome outcome = gradcheck_run(corrupt);
      std::fputs(outcome.report.c_str(), stdout);
      if (!outcome.pass) return 2;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 2;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "internal contract violation: %s\n", e.what());
    return 2;
  }
  return 0;
}
