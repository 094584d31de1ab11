#pragma once

// Synthetic driving scenes and the fixed feature encoder.
//
// World: a horizontal road along y = 0 (plus optional vertical roads at
// `junction_x`), dynamic objects driving along two lanes at y = -1 and y = +1
// and wrapping inside [-arena_half_length, arena_half_length). Each agent owns
// an H x W BEV grid centred on its pose. It sees dynamic objects within
// `visibility_radius` meters and the road layout within
// `static_visibility_radius` meters.
//
// Encoder: channel c has a spatial blur width sigma_c and weights a_c
// (dynamic content) and b_c (road content). For a cell at world point w:
//   F[c](w) = gain * (a_c * D_c(w) + b_c * S_c(w) + sensor_noise * N(0, 1))
//   D_c(w) = min(1, sum_obj exp(-|w - o|^2 / (2 sigma_c^2)))     if w is in dynamic range, else 0
//   S_c(w) = logistic((road_half_width - dist_to_road(w)) / sigma_c)  if w is in static range, else 0
// Cells outside both ranges are 0. Channels cycle through four response
// types by c mod 4: dynamic-dominant, road-dominant, mixed, weak. The
// per-channel constants come from a fixed encoder seed and do not depend on
// the scene.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/feature_grid.hpp"
#include "coopertrim/protocol.hpp"
#include "coopertrim/rng.hpp"

namespace coopertrim {

struct AgentSpec {
  std::uint32_t id = 0;
  Pose start;
  double vx = 0.0;        // meters per frame, world frame
  double vy = 0.0;
  double yaw_rate = 0.0;  // radians per frame
};

struct PhaseSpec {
  std::size_t frames = 0;
  std::size_t objects = 0;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  std::size_t channels = 128;
  std::size_t height = 16;
  std::size_t width = 16;
  double cell_size = 1.0;
  std::vector<AgentSpec> agents{{0, {0.0, 0.0, 0.0}}, {1, {8.0, 0.0, 0.0}}, {2, {-8.0, 0.0, 0.0}}};
  double visibility_radius = 5.0;        // dynamic objects
  double static_visibility_radius = 12.0; // road layout, map-like range
  double road_half_width = 2.0;
  std::vector<double> junction_x;
  std::vector<PhaseSpec> phases{{40, 4}};
  double object_speed = 1.0;  // mean meters per frame
  double object_radius = 1.0;
  double arena_half_length = 8.0;
  double sensor_noise = 0.02;
  double feature_gain = 1.0;

  std::size_t frames() const {
    std::size_t n = 0;
    for (const auto& p : phases) n += p.frames;
    return n;
  }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) throw ValidationError("ScenarioConfig: grid dims must be positive");
    if (channels > 0xFFFF) throw ValidationError("ScenarioConfig: too many channels for the wire format");
    if (!(cell_size > 0.0)) throw ValidationError("ScenarioConfig: cell_size must be positive");
    if (agents.empty()) throw ValidationError("ScenarioConfig: at least the ego agent is required");
    if (phases.empty() || frames() == 0) throw ValidationError("ScenarioConfig: scenario needs at least one frame");
    if (!(visibility_radius > 0.0) || !(static_visibility_radius > 0.0) || !(road_half_width >= 0.0) || !(object_radius > 0.0) ||
        !(arena_half_length > 0.0) || !(sensor_noise >= 0.0)) {
      throw ValidationError("ScenarioConfig: geometric parameters out of range");
    }
  }
};

struct DynamicObject {
  double x = 0.0;
  double y = 0.0;
};

struct Scenario {
  ScenarioConfig config;
  std::vector<std::vector<Pose>> trajectories;      // [agent][frame]
  std::vector<std::vector<DynamicObject>> objects;  // [frame]
  std::vector<std::size_t> complexity_schedule;     // [frame]

  std::size_t frames() const noexcept { return complexity_schedule.size(); }
  std::size_t agent_count() const noexcept { return trajectories.size(); }
};

namespace encoder {

inline constexpr std::uint64_t kEncoderSeed = 0xC0015EEDULL;
inline constexpr std::array<double, 4> kSigmas{0.5, 0.8, 1.2, 2.0};

struct ChannelResponse {
  std::size_t sigma_index = 0;
  double dynamic_weight = 0.0;
  double road_weight = 0.0;
};

inline ChannelResponse channel_response(std::size_t c) {
  Rng rng = Rng(kEncoderSeed).substream(c);
  ChannelResponse r;
  r.sigma_index = (c / 4) % kSigmas.size();
  switch (c % 4) {
    case 0: r.dynamic_weight = rng.uniform(0.6, 1.2); r.road_weight = rng.uniform(0.0, 0.1); break;
    case 1: r.dynamic_weight = rng.uniform(0.0, 0.1); r.road_weight = rng.uniform(0.6, 1.2); break;
    case 2: r.dynamic_weight = rng.uniform(0.3, 0.7); r.road_weight = rng.uniform(0.3, 0.7); break;
    default: r.dynamic_weight = rng.uniform(0.0, 0.2); r.road_weight = rng.uniform(0.0, 0.2); break;
  }
  return r;
}

}  // namespace encoder

inline double distance_to_road(const ScenarioConfig& cfg, double x, double y) {
  double d = std::abs(y);
  for (double jx : cfg.junction_x) d = std::min(d, std::abs(x - jx));
  return d;
}

inline double wrap_into(double x, double half) {
  const double span = 2.0 * half;
  double r = std::fmod(x + half, span);
  if (r < 0.0) r += span;
  return r - half;
}

// World coordinates of cell (r, col) in a grid attached to `pose`.
inline std::pair<double, double> cell_center_world(const ScenarioConfig& cfg, const Pose& pose, std::size_t r,
                                                   std::size_t col) {
  const double gx = (static_cast<double>(col) - (static_cast<double>(cfg.width) - 1.0) / 2.0) * cfg.cell_size;
  const double gy = (static_cast<double>(r) - (static_cast<double>(cfg.height) - 1.0) / 2.0) * cfg.cell_size;
  const double c = std::cos(pose.yaw);
  const double s = std::sin(pose.yaw);
  return {pose.x + c * gx - s * gy, pose.y + s * gx + c * gy};
}

inline std::size_t count_in_view(const ScenarioConfig& cfg, const Pose& ego, const std::vector<DynamicObject>& objs) {
  const double hx = static_cast<double>(cfg.width) * cfg.cell_size / 2.0;
  const double hy = static_cast<double>(cfg.height) * cfg.cell_size / 2.0;
  const double c = std::cos(ego.yaw);
  const double s = std::sin(ego.yaw);
  auto inside = [&](double wx, double wy) {
    const double dx = wx - ego.x;
    const double dy = wy - ego.y;
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    return std::abs(lx) < hx && std::abs(ly) < hy;
  };
  std::size_t n = 0;
  for (const auto& o : objs) n += inside(o.x, o.y) ? 1 : 0;
  for (double jx : cfg.junction_x) n += inside(jx, 0.0) ? 1 : 0;
  return n;
}

inline Scenario generate_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  Scenario sc;
  sc.config = cfg;
  const std::size_t frames = cfg.frames();
  const Rng root(cfg.seed);

  for (const auto& a : cfg.agents) {
    std::vector<Pose> traj(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      const double ft = static_cast<double>(t);
      traj[t] = Pose::make(a.start.x + a.vx * ft, a.start.y + a.vy * ft, a.start.yaw + a.yaw_rate * ft);
    }
    sc.trajectories.push_back(std::move(traj));
  }

  sc.objects.resize(frames);
  std::size_t phase_start = 0;
  for (std::size_t p = 0; p < cfg.phases.size(); ++p) {
    const PhaseSpec& phase = cfg.phases[p];
    Rng rng = root.substream(0x0B1EC7, p);
    struct Mover {
      double x0, y, v;
    };
    std::vector<Mover> movers;
    for (std::size_t k = 0; k < phase.objects; ++k) {
      const bool upper = rng.bernoulli(0.5);
      const double x0 = rng.uniform(-cfg.arena_half_length, cfg.arena_half_length);
      const double speed = cfg.object_speed * rng.uniform(0.5, 1.5);
      movers.push_back({x0, upper ? 1.0 : -1.0, upper ? -speed : speed});
    }
    for (std::size_t t = 0; t < phase.frames; ++t) {
      auto& out = sc.objects[phase_start + t];
      for (const auto& m : movers) {
        out.push_back({wrap_into(m.x0 + m.v * static_cast<double>(t), cfg.arena_half_length), m.y});
      }
    }
    phase_start += phase.frames;
  }

  sc.complexity_schedule.resize(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    sc.complexity_schedule[t] = count_in_view(cfg, sc.trajectories[0][t], sc.objects[t]);
  }
  return sc;
}

// Features of `agent` at `frame` in the agent's own grid.
inline FeatureGrid encode_features(const Scenario& sc, std::size_t agent, std::size_t frame) {
  const ScenarioConfig& cfg = sc.config;
  const Pose& pose = sc.trajectories.at(agent).at(frame);
  const auto& objs = sc.objects.at(frame);
  const std::size_t plane = cfg.height * cfg.width;
  constexpr std::size_t kS = encoder::kSigmas.size();

  std::vector<std::uint8_t> sees_dynamic(plane, 0), sees_static(plane, 0);
  std::vector<std::array<double, kS>> dyn(plane), road(plane);
  for (std::size_t r = 0; r < cfg.height; ++r) {
    for (std::size_t col = 0; col < cfg.width; ++col) {
      const std::size_t i = r * cfg.width + col;
      const auto [wx, wy] = cell_center_world(cfg, pose, r, col);
      const double range = std::hypot(wx - pose.x, wy - pose.y);
      sees_dynamic[i] = range <= cfg.visibility_radius ? 1 : 0;
      sees_static[i] = range <= cfg.static_visibility_radius ? 1 : 0;
      const double dr = distance_to_road(cfg, wx, wy);
      for (std::size_t s = 0; s < kS; ++s) {
        const double sigma = encoder::kSigmas[s];
        double acc = 0.0;
        if (sees_dynamic[i]) {
          for (const auto& o : objs) {
            const double d2 = (wx - o.x) * (wx - o.x) + (wy - o.y) * (wy - o.y);
            acc += std::exp(-d2 / (2.0 * sigma * sigma));
          }
        }
        dyn[i][s] = std::min(1.0, acc);
        road[i][s] = sees_static[i] ? logistic((cfg.road_half_width - dr) / sigma) : 0.0;
      }
    }
  }

  Rng noise = Rng(cfg.seed).substream(0x5E25 + agent, frame);
  std::vector<double> values(cfg.channels * plane, 0.0);
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    const auto resp = encoder::channel_response(c);
    double* dst = values.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      if (!sees_dynamic[i] && !sees_static[i]) continue;
      dst[i] = resp.dynamic_weight * dyn[i][resp.sigma_index] + resp.road_weight * road[i][resp.sigma_index];
      if (cfg.sensor_noise > 0.0) dst[i] += cfg.sensor_noise * noise.normal();
      dst[i] *= cfg.feature_gain;
    }
  }
  return FeatureGrid(cfg.channels, cfg.height, cfg.width, std::move(values));
}

// Ground-truth labels in the ego grid at `frame`, class-major: dynamic then road.
inline std::vector<std::uint8_t> ground_truth(const Scenario& sc, std::size_t frame, std::size_t agent = 0) {
  const ScenarioConfig& cfg = sc.config;
  const Pose& pose = sc.trajectories.at(agent).at(frame);
  const std::size_t plane = cfg.height * cfg.width;
  std::vector<std::uint8_t> labels(2 * plane, 0);
  for (std::size_t r = 0; r < cfg.height; ++r) {
    for (std::size_t col = 0; col < cfg.width; ++col) {
      const std::size_t i = r * cfg.width + col;
      const auto [wx, wy] = cell_center_world(cfg, pose, r, col);
      for (const auto& o : sc.objects[frame]) {
        if (std::hypot(wx - o.x, wy - o.y) <= cfg.object_radius) {
          labels[i] = 1;
          break;
        }
      }
      labels[plane + i] = distance_to_road(cfg, wx, wy) <= cfg.road_half_width ? 1 : 0;
    }
  }
  return labels;
}

}  // namespace coopertrim
