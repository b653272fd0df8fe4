#include "bevtrack/config.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace bevtrack {

using nlohmann::json;

void TrainConfig::validate() const {
  if (clip_length == 0) throw ConfigError("train: clip_length must be positive");
  if (steps == 0) throw ConfigError("train: steps must be positive");
  if (checkpoint_interval == 0) throw ConfigError("train: checkpoint_interval must be positive");
}

void RunConfig::validate() const {
  sim.validate();
  model.validate();
  assign.validate();
  lifecycle.validate();
  train.validate();
  weights.validate();
  eval.validate();
  if (model.channels != sim.channels)
    throw ConfigError("config: model.channels must equal sim.channels");
  if (model.n_classes != sim.n_classes)
    throw ConfigError("config: model.n_classes must equal sim.n_classes");
  if (model.half_range != sim.half_range)
    throw ConfigError("config: model.half_range must equal sim.half_range");
  if (train.clip_length > sim.frames)
    throw ConfigError("config: clip_length exceeds the scene length");
  if (optim.lr <= 0) throw ConfigError("optim: lr must be positive");
  if (optim.weight_decay < 0) throw ConfigError("optim: weight_decay must be non-negative");
}

namespace {

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

const char* aux_source_name(AuxSource s) {
  return s == AuxSource::SDecoder ? "s_decoder" : "u_decoder";
}
const char* aux_range_name(AuxRange r) {
  switch (r) {
    case AuxRange::Newborn: return "newborn";
    case AuxRange::Consistent: return "consistent";
    case AuxRange::All: return "all";
  }
  return "consistent";
}
const char* strategy_name(AssignStrategy s) {
  return s == AssignStrategy::OneToOne ? "one_to_one" : "one_to_many";
}

AuxSource parse_aux_source(const std::string& s) {
  if (s == "s_decoder") return AuxSource::SDecoder;
  if (s == "u_decoder") return AuxSource::UDecoder;
  throw ConfigError("config: unknown aux source '" + s + "'");
}
AuxRange parse_aux_range(const std::string& s) {
  if (s == "newborn") return AuxRange::Newborn;
  if (s == "consistent") return AuxRange::Consistent;
  if (s == "all") return AuxRange::All;
  throw ConfigError("config: unknown aux range '" + s + "'");
}
AssignStrategy parse_strategy(const std::string& s) {
  if (s == "one_to_one") return AssignStrategy::OneToOne;
  if (s == "one_to_many") return AssignStrategy::OneToMany;
  throw ConfigError("config: unknown assignment strategy '" + s + "'");
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config parse error: ") + e.what());
  }

  RunConfig cfg;
  try {
    if (j.contains("sim")) {
      const json& s = j.at("sim");
      get_if(s, "half_range", cfg.sim.half_range);
      get_if(s, "grid_nx", cfg.sim.grid_nx);
      get_if(s, "grid_ny", cfg.sim.grid_ny);
      get_if(s, "channels", cfg.sim.channels);
      get_if(s, "n_classes", cfg.sim.n_classes);
      get_if(s, "dt", cfg.sim.dt);
      get_if(s, "frames", cfg.sim.frames);
      get_if(s, "init_targets_min", cfg.sim.init_targets_min);
      get_if(s, "init_targets_max", cfg.sim.init_targets_max);
      get_if(s, "max_targets", cfg.sim.max_targets);
      get_if(s, "birth_rate", cfg.sim.birth_rate);
      get_if(s, "death_rate", cfg.sim.death_rate);
      get_if(s, "accel_noise", cfg.sim.accel_noise);
      get_if(s, "clutter_noise", cfg.sim.clutter_noise);
      get_if(s, "signature_radius", cfg.sim.signature_radius);
      get_if(s, "signature_scale", cfg.sim.signature_scale);
      get_if(s, "speed_min", cfg.sim.speed_min);
      get_if(s, "speed_max", cfg.sim.speed_max);
      get_if(s, "ego_speed", cfg.sim.ego_speed);
      get_if(s, "ego_turn_rate", cfg.sim.ego_turn_rate);
      get_if(s, "kill_range_factor", cfg.sim.kill_range_factor);
      get_if(s, "spawn_range_factor", cfg.sim.spawn_range_factor);
      get_if(s, "class_embed_seed", cfg.sim.class_embed_seed);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      get_if(m, "channels", cfg.model.channels);
      get_if(m, "layers", cfg.model.layers);
      get_if(m, "heads", cfg.model.heads);
      get_if(m, "ffn_hidden", cfg.model.ffn_hidden);
      get_if(m, "object_queries", cfg.model.object_queries);
      get_if(m, "vel_scale", cfg.model.vel_scale);
      get_if(m, "asso_ffn_on_track", cfg.model.asso_ffn_on_track);
    }
    cfg.model.n_classes = cfg.sim.n_classes;
    cfg.model.half_range = cfg.sim.half_range;
    if (j.contains("assign")) {
      const json& a = j.at("assign");
      get_if(a, "tau", cfg.assign.tau);
      get_if(a, "k", cfg.assign.k);
      get_if(a, "allow_query_overlap", cfg.assign.allow_query_overlap);
      get_if(a, "focal_alpha", cfg.assign.focal_alpha);
      get_if(a, "focal_gamma", cfg.assign.focal_gamma);
    }
    if (j.contains("aux")) {
      const json& a = j.at("aux");
      if (a.contains("source")) cfg.variant.source = parse_aux_source(a.at("source"));
      if (a.contains("range")) cfg.variant.range = parse_aux_range(a.at("range"));
      if (a.contains("strategy")) cfg.variant.strategy = parse_strategy(a.at("strategy"));
    }
    if (j.contains("toggles")) {
      const json& t = j.at("toggles");
      get_if(t, "o2m", cfg.toggles.o2m);
      get_if(t, "o2o", cfg.toggles.o2o);
      get_if(t, "asso", cfg.toggles.asso);
    }
    if (j.contains("lifecycle")) {
      const json& l = j.at("lifecycle");
      get_if(l, "spawn_threshold", cfg.lifecycle.spawn_threshold);
      get_if(l, "keep_threshold", cfg.lifecycle.keep_threshold);
      get_if(l, "max_miss_age", cfg.lifecycle.max_miss_age);
    }
    if (j.contains("optim")) {
      const json& o = j.at("optim");
      get_if(o, "lr", cfg.optim.lr);
      get_if(o, "weight_decay", cfg.optim.weight_decay);
      get_if(o, "beta1", cfg.optim.beta1);
      get_if(o, "beta2", cfg.optim.beta2);
      get_if(o, "eps", cfg.optim.eps);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      get_if(t, "clip_length", cfg.train.clip_length);
      get_if(t, "steps", cfg.train.steps);
      get_if(t, "checkpoint_interval", cfg.train.checkpoint_interval);
    }
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      get_if(l, "lambda_det", cfg.weights.det);
      get_if(l, "lambda_track", cfg.weights.track);
      get_if(l, "lambda_asso", cfg.weights.asso);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      get_if(e, "d_match", cfg.eval.d_match);
      get_if(e, "map_thresholds", cfg.eval.map_thresholds);
      get_if(e, "amota_recall_points", cfg.eval.amota_recall_points);
    }
    get_if(j, "seed", cfg.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: malformed field: ") + e.what());
  }

  cfg.optim.total_steps = cfg.train.steps;
  cfg.validate();
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["sim"] = {{"half_range", cfg.sim.half_range},
              {"grid_nx", cfg.sim.grid_nx},
              {"grid_ny", cfg.sim.grid_ny},
              {"channels", cfg.sim.channels},
              {"n_classes", cfg.sim.n_classes},
              {"dt", cfg.sim.dt},
              {"frames", cfg.sim.frames},
              {"init_targets_min", cfg.sim.init_targets_min},
              {"init_targets_max", cfg.sim.init_targets_max},
              {"max_targets", cfg.sim.max_targets},
              {"birth_rate", cfg.sim.birth_rate},
              {"death_rate", cfg.sim.death_rate},
              {"accel_noise", cfg.sim.accel_noise},
              {"clutter_noise", cfg.sim.clutter_noise},
              {"signature_radius", cfg.sim.signature_radius},
              {"signature_scale", cfg.sim.signature_scale},
              {"speed_min", cfg.sim.speed_min},
              {"speed_max", cfg.sim.speed_max},
              {"ego_speed", cfg.sim.ego_speed},
              {"ego_turn_rate", cfg.sim.ego_turn_rate},
              {"kill_range_factor", cfg.sim.kill_range_factor},
              {"spawn_range_factor", cfg.sim.spawn_range_factor},
              {"class_embed_seed", cfg.sim.class_embed_seed}};
  j["model"] = {{"channels", cfg.model.channels},
                {"layers", cfg.model.layers},
                {"heads", cfg.model.heads},
                {"ffn_hidden", cfg.model.ffn_hidden},
                {"object_queries", cfg.model.object_queries},
                {"vel_scale", cfg.model.vel_scale},
                {"asso_ffn_on_track", cfg.model.asso_ffn_on_track}};
  j["assign"] = {{"tau", cfg.assign.tau},
                 {"k", cfg.assign.k},
                 {"allow_query_overlap", cfg.assign.allow_query_overlap},
                 {"focal_alpha", cfg.assign.focal_alpha},
                 {"focal_gamma", cfg.assign.focal_gamma}};
  j["aux"] = {{"source", aux_source_name(cfg.variant.source)},
              {"range", aux_range_name(cfg.variant.range)},
              {"strategy", strategy_name(cfg.variant.strategy)}};
  j["toggles"] = {{"o2m", cfg.toggles.o2m}, {"o2o", cfg.toggles.o2o}, {"asso", cfg.toggles.asso}};
  j["lifecycle"] = {{"spawn_threshold", cfg.lifecycle.spawn_threshold},
                    {"keep_threshold", cfg.lifecycle.keep_threshold},
                    {"max_miss_age", cfg.lifecycle.max_miss_age}};
  j["optim"] = {{"lr", cfg.optim.lr},
                {"weight_decay", cfg.optim.weight_decay},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps}};
  j["train"] = {{"clip_length", cfg.train.clip_length},
                {"steps", cfg.train.steps},
                {"checkpoint_interval", cfg.train.checkpoint_interval}};
  j["loss"] = {{"lambda_det", cfg.weights.det},
               {"lambda_track", cfg.weights.track},
               {"lambda_asso", cfg.weights.asso}};
  j["eval"] = {{"d_match", cfg.eval.d_match},
               {"map_thresholds", cfg.eval.map_thresholds},
               {"amota_recall_points", cfg.eval.amota_recall_points}};
  j["seed"] = cfg.seed;
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw ParseError("cannot open config file for writing: " + path);
    f << run_config_to_json(cfg);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace bevtrack
