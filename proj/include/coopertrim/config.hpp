#pragma once

// JSON scenario and run-configuration files.
//
// Both carry a versioned header: {"format": "coopertrim-scenario" or
// "coopertrim-config", "version": 1, ...}. Unknown keys are rejected so a
// misspelt setting cannot silently fall back to its default.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "coopertrim/error.hpp"
#include "coopertrim/harness.hpp"
#include "coopertrim/model.hpp"
#include "coopertrim/netsim.hpp"
#include "coopertrim/protocol.hpp"
#include "coopertrim/scenario.hpp"
#include "coopertrim/training.hpp"

namespace coopertrim {

using Json = nlohmann::json;

inline constexpr std::string_view kScenarioFormat = "coopertrim-scenario";
inline constexpr std::string_view kConfigFormat = "coopertrim-config";
inline constexpr int kFileVersion = 1;

// Everything the CLI needs for train, run and experiment.
struct RunConfig {
  ModelShape model;
  std::uint64_t model_seed = 3;
  TrainConfig training;
  std::vector<ScenarioConfig> training_scenarios;
  ScenarioConfig evaluation_scenario;
  EpisodeConfig episode;
  std::string checkpoint = "checkpoint.bin";
  std::string out_dir = "out";
};

namespace json_detail {

inline void check_keys(const Json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ValidationError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || a == key;
    if (!known) throw ValidationError(std::string(where) + ": unknown key \"" + key + "\"");
  }
}

template <typename T>
void read(const Json& j, std::string_view key, T& out, std::string_view where) {
  const auto it = j.find(std::string(key));
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string(where) + "." + std::string(key) + ": " + e.what());
  }
}

inline void check_header(const Json& j, std::string_view format) {
  if (!j.is_object() || !j.contains("format") || !j.contains("version")) {
    throw ValidationError("missing \"format\"/\"version\" header (expected format \"" + std::string(format) + "\")");
  }
  if (j["format"] != format) {
    throw ValidationError("format is " + j["format"].dump() + ", expected \"" + std::string(format) + "\"");
  }
  if (j["version"] != kFileVersion) {
    throw ValidationError("unsupported version " + j["version"].dump() + " (this build reads version 1)");
  }
}

inline std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace json_detail

// ---------------------------------------------------------------------------
// Enumerations as strings

inline std::string to_string(PenaltyForm f) { return f == PenaltyForm::kSigned ? "signed" : "hinge"; }
inline std::string to_string(ChannelReduction r) {
  switch (r) {
    case ChannelReduction::kMean: return "mean";
    case ChannelReduction::kMax: return "max";
    case ChannelReduction::kFractionAbove: return "fraction_above";
  }
  return "mean";
}
inline std::string to_string(BlendRule b) {
  switch (b) {
    case BlendRule::kAverage: return "average";
    case BlendRule::kOverwrite: return "overwrite";
    case BlendRule::kMax: return "max";
  }
  return "average";
}
inline std::string to_string(LossGranularity g) { return g == LossGranularity::kPerChannel ? "per_channel" : "per_message"; }

inline PenaltyForm penalty_form_from(const std::string& s) {
  if (s == "signed") return PenaltyForm::kSigned;
  if (s == "hinge") return PenaltyForm::kHinge;
  throw ValidationError("penalty must be \"signed\" or \"hinge\", got \"" + s + "\"");
}
inline ChannelReduction reduction_from(const std::string& s) {
  if (s == "mean") return ChannelReduction::kMean;
  if (s == "max") return ChannelReduction::kMax;
  if (s == "fraction_above") return ChannelReduction::kFractionAbove;
  throw ValidationError("reduction must be mean, max or fraction_above, got \"" + s + "\"");
}
inline BlendRule blend_from(const std::string& s) {
  if (s == "average") return BlendRule::kAverage;
  if (s == "overwrite") return BlendRule::kOverwrite;
  if (s == "max") return BlendRule::kMax;
  throw ValidationError("blend must be average, overwrite or max, got \"" + s + "\"");
}
inline LossGranularity granularity_from(const std::string& s) {
  if (s == "per_channel") return LossGranularity::kPerChannel;
  if (s == "per_message") return LossGranularity::kPerMessage;
  throw ValidationError("loss_granularity must be per_channel or per_message, got \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// Scenario

inline ScenarioConfig scenario_from_json(const Json& j, std::string_view where = "scenario") {
  using namespace json_detail;
  check_keys(j, where,
             {"format", "version", "seed", "channels", "height", "width", "cell_size", "agents", "visibility_radius",
              "static_visibility_radius", "road_half_width", "junction_x", "phases", "object_speed", "object_radius",
              "arena_half_length", "sensor_noise", "feature_gain"});
  ScenarioConfig c;
  read(j, "seed", c.seed, where);
  read(j, "channels", c.channels, where);
  read(j, "height", c.height, where);
  read(j, "width", c.width, where);
  read(j, "cell_size", c.cell_size, where);
  read(j, "visibility_radius", c.visibility_radius, where);
  read(j, "static_visibility_radius", c.static_visibility_radius, where);
  read(j, "road_half_width", c.road_half_width, where);
  read(j, "junction_x", c.junction_x, where);
  read(j, "object_speed", c.object_speed, where);
  read(j, "object_radius", c.object_radius, where);
  read(j, "arena_half_length", c.arena_half_length, where);
  read(j, "sensor_noise", c.sensor_noise, where);
  read(j, "feature_gain", c.feature_gain, where);
  if (j.contains("agents")) {
    c.agents.clear();
    for (const auto& a : j["agents"]) {
      check_keys(a, "agent", {"id", "x", "y", "yaw", "vx", "vy", "yaw_rate"});
      AgentSpec s;
      double x = 0.0, y = 0.0, yaw = 0.0;
      read(a, "id", s.id, "agent");
      read(a, "x", x, "agent");
      read(a, "y", y, "agent");
      read(a, "yaw", yaw, "agent");
      read(a, "vx", s.vx, "agent");
      read(a, "vy", s.vy, "agent");
      read(a, "yaw_rate", s.yaw_rate, "agent");
      s.start = Pose::make(x, y, yaw);
      c.agents.push_back(s);
    }
  }
  if (j.contains("phases")) {
    c.phases.clear();
    for (const auto& p : j["phases"]) {
      check_keys(p, "phase", {"frames", "objects"});
      PhaseSpec s;
      read(p, "frames", s.frames, "phase");
      read(p, "objects", s.objects, "phase");
      c.phases.push_back(s);
    }
  }
  c.validate();
  return c;
}

inline Json scenario_to_json(const ScenarioConfig& c, bool with_header = true) {
  Json j;
  if (with_header) {
    j["format"] = kScenarioFormat;
    j["version"] = kFileVersion;
  }
  j["seed"] = c.seed;
  j["channels"] = c.channels;
  j["height"] = c.height;
  j["width"] = c.width;
  j["cell_size"] = c.cell_size;
  Json agents = Json::array();
  for (const auto& a : c.agents) {
    agents.push_back({{"id", a.id}, {"x", a.start.x}, {"y", a.start.y}, {"yaw", a.start.yaw}, {"vx", a.vx},
                      {"vy", a.vy}, {"yaw_rate", a.yaw_rate}});
  }
  j["agents"] = agents;
  j["visibility_radius"] = c.visibility_radius;
  j["static_visibility_radius"] = c.static_visibility_radius;
  j["road_half_width"] = c.road_half_width;
  j["junction_x"] = c.junction_x;
  Json phases = Json::array();
  for (const auto& p : c.phases) phases.push_back({{"frames", p.frames}, {"objects", p.objects}});
  j["phases"] = phases;
  j["object_speed"] = c.object_speed;
  j["object_radius"] = c.object_radius;
  j["arena_half_length"] = c.arena_half_length;
  j["sensor_noise"] = c.sensor_noise;
  j["feature_gain"] = c.feature_gain;
  return j;
}

// ---------------------------------------------------------------------------
// Run configuration sections

inline TrainConfig training_from_json(const Json& j) {
  using namespace json_detail;
  constexpr std::string_view where = "training";
  check_keys(j, where,
             {"epsilon", "learning_rate", "epochs", "temperature", "gate_temperature", "clip_norm", "frames_per_step",
              "seed", "penalty", "reduction", "itc", "lambda_seed", "c_target"});
  TrainConfig t;
  read(j, "epsilon", t.epsilon, where);
  read(j, "learning_rate", t.learning_rate, where);
  read(j, "epochs", t.epochs, where);
  read(j, "gate_temperature", t.gate_temperature, where);
  read(j, "clip_norm", t.clip_norm, where);
  read(j, "frames_per_step", t.frames_per_step, where);
  read(j, "seed", t.seed, where);
  read(j, "itc", t.itc, where);
  read(j, "lambda_seed", t.lambda_seed, where);
  read(j, "c_target", t.c_target, where);
  if (j.contains("temperature")) {
    const Json& tj = j["temperature"];
    check_keys(tj, "training.temperature", {"initial", "decay", "floor"});
    read(tj, "initial", t.temperature_initial, "training.temperature");
    read(tj, "decay", t.temperature_decay, "training.temperature");
    read(tj, "floor", t.temperature_floor, "training.temperature");
  }
  std::string s;
  if (j.contains("penalty")) {
    read(j, "penalty", s, where);
    t.penalty_form = penalty_form_from(s);
  }
  if (j.contains("reduction")) {
    read(j, "reduction", s, where);
    t.reduction = reduction_from(s);
  }
  t.validate();
  return t;
}

inline Json training_to_json(const TrainConfig& t) {
  return {{"epsilon", t.epsilon},
          {"learning_rate", t.learning_rate},
          {"epochs", t.epochs},
          {"temperature",
           {{"initial", t.temperature_initial}, {"decay", t.temperature_decay}, {"floor", t.temperature_floor}}},
          {"gate_temperature", t.gate_temperature},
          {"clip_norm", t.clip_norm},
          {"frames_per_step", t.frames_per_step},
          {"seed", t.seed},
          {"penalty", to_string(t.penalty_form)},
          {"reduction", to_string(t.reduction)},
          {"itc", t.itc},
          {"lambda_seed", t.lambda_seed},
          {"c_target", t.c_target}};
}

inline NetworkConfig network_from_json(const Json& j) {
  using namespace json_detail;
  constexpr std::string_view where = "episode.network";
  check_keys(j, where,
             {"loss_rate", "latency_ms", "jitter_ms", "frame_period_ms", "full_link_mbps", "loss_granularity",
              "delay_requests"});
  NetworkConfig n;
  read(j, "loss_rate", n.loss_rate, where);
  read(j, "latency_ms", n.latency_ms, where);
  read(j, "jitter_ms", n.jitter_ms, where);
  read(j, "frame_period_ms", n.frame_period_ms, where);
  read(j, "full_link_mbps", n.full_link_mbps, where);
  read(j, "delay_requests", n.delay_requests, where);
  if (j.contains("loss_granularity")) {
    std::string s;
    read(j, "loss_granularity", s, where);
    n.loss_granularity = granularity_from(s);
  }
  n.validate();
  return n;
}

inline Json network_to_json(const NetworkConfig& n) {
  return {{"loss_rate", n.loss_rate},
          {"latency_ms", n.latency_ms},
          {"jitter_ms", n.jitter_ms},
          {"frame_period_ms", n.frame_period_ms},
          {"full_link_mbps", n.full_link_mbps},
          {"loss_granularity", to_string(n.loss_granularity)},
          {"delay_requests", n.delay_requests}};
}

inline EpisodeConfig episode_from_json(const Json& j) {
  using namespace json_detail;
  constexpr std::string_view where = "episode";
  check_keys(j, where,
             {"network", "use_network", "cooperation", "compression", "lossless", "blend", "reduction",
              "reference_ema", "verify_reference_chain", "seed"});
  EpisodeConfig e;
  if (j.contains("network")) e.network = network_from_json(j["network"]);
  read(j, "use_network", e.use_network, where);
  read(j, "cooperation", e.cooperation, where);
  read(j, "reference_ema", e.reference_ema, where);
  read(j, "verify_reference_chain", e.verify_reference_chain, where);
  read(j, "seed", e.seed, where);
  bool lossless = true;
  read(j, "lossless", lossless, where);
  std::string rate = "1x";
  read(j, "compression", rate, where);
  e.compression = CompressionConfig::from_label(rate, lossless);
  std::string s;
  if (j.contains("blend")) {
    read(j, "blend", s, where);
    e.blend = blend_from(s);
  }
  if (j.contains("reduction")) {
    read(j, "reduction", s, where);
    e.selection.reduction = reduction_from(s);
  }
  if (!(e.reference_ema >= 0.0 && e.reference_ema < 1.0)) {
    throw ValidationError("episode.reference_ema must lie in [0, 1)");
  }
  return e;
}

inline Json episode_to_json(const EpisodeConfig& e) {
  return {{"network", network_to_json(e.network)},
          {"use_network", e.use_network},
          {"cooperation", e.cooperation},
          {"compression", e.compression.label()},
          {"lossless", e.compression.lossless},
          {"blend", to_string(e.blend)},
          {"reduction", to_string(e.selection.reduction)},
          {"reference_ema", e.reference_ema},
          {"verify_reference_chain", e.verify_reference_chain},
          {"seed", e.seed}};
}

inline RunConfig run_config_from_json(const Json& j) {
  using namespace json_detail;
  check_header(j, kConfigFormat);
  check_keys(j, "config",
             {"format", "version", "model", "training", "training_scenarios", "evaluation_scenario", "episode",
              "checkpoint", "out_dir"});
  RunConfig rc;
  if (j.contains("model")) {
    const Json& m = j["model"];
    check_keys(m, "model", {"d_k", "d_v", "seed"});
    read(m, "d_k", rc.model.d_k, "model");
    read(m, "d_v", rc.model.d_v, "model");
    read(m, "seed", rc.model_seed, "model");
    if (rc.model.d_k == 0 || rc.model.d_v == 0) throw ValidationError("model: d_k and d_v must be positive");
  }
  if (j.contains("training")) rc.training = training_from_json(j["training"]);
  if (j.contains("training_scenarios")) {
    for (const auto& s : j["training_scenarios"]) rc.training_scenarios.push_back(scenario_from_json(s, "training_scenarios[]"));
  }
  if (j.contains("evaluation_scenario")) rc.evaluation_scenario = scenario_from_json(j["evaluation_scenario"], "evaluation_scenario");
  if (j.contains("episode")) rc.episode = episode_from_json(j["episode"]);
  read(j, "checkpoint", rc.checkpoint, "config");
  read(j, "out_dir", rc.out_dir, "config");

  const ScenarioConfig& ev = rc.evaluation_scenario;
  rc.model.channels = ev.channels;
  rc.model.height = ev.height;
  rc.model.width = ev.width;
  for (const auto& s : rc.training_scenarios) {
    if (s.channels != ev.channels || s.height != ev.height || s.width != ev.width) {
      throw DimensionError("training and evaluation scenarios must share channels, height and width");
    }
  }
  return rc;
}

inline Json run_config_to_json(const RunConfig& rc) {
  Json j;
  j["format"] = kConfigFormat;
  j["version"] = kFileVersion;
  j["model"] = {{"d_k", rc.model.d_k}, {"d_v", rc.model.d_v}, {"seed", rc.model_seed}};
  j["training"] = training_to_json(rc.training);
  Json ts = Json::array();
  for (const auto& s : rc.training_scenarios) ts.push_back(scenario_to_json(s, false));
  j["training_scenarios"] = ts;
  j["evaluation_scenario"] = scenario_to_json(rc.evaluation_scenario, false);
  j["episode"] = episode_to_json(rc.episode);
  j["checkpoint"] = rc.checkpoint;
  j["out_dir"] = rc.out_dir;
  return j;
}

// ---------------------------------------------------------------------------
// Files

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline ScenarioConfig load_scenario(const std::string& path) {
  const Json j = read_json_file(path);
  try {
    json_detail::check_header(j, kScenarioFormat);
    return scenario_from_json(j);
  } catch (const Error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  const Json j = read_json_file(path);
  try {
    return run_config_from_json(j);
  } catch (const Error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path);
}

inline Bytes read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace coopertrim
