#pragma once

// Named sweeps over episode settings, written as one CSV per sweep.

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/harness.hpp"
#include "coopertrim/model.hpp"
#include "coopertrim/protocol.hpp"
#include "coopertrim/scenario.hpp"
#include "coopertrim/training.hpp"

namespace coopertrim {

inline constexpr std::string_view kExperimentNames[] = {"adaptation", "loss_sweep", "latency_sweep",
                                                        "compression_sweep"};

inline bool is_experiment_name(std::string_view name) {
  for (auto n : kExperimentNames) {
    if (n == name) return true;
  }
  return false;
}

// kind "frame": one row per frame. kind "aggregate": episode means (sums for
// loss events and payload bytes, max for latency) with aggregate IoU in
// `value`. Other kinds carry a single derived number in `value`.
struct ExperimentRow {
  std::string sweep;
  std::string setting;
  std::string kind;
  std::optional<std::size_t> frame;
  std::optional<std::size_t> complexity;
  double fraction_selected = 0.0;
  double bandwidth_mbps = 0.0;
  double iou_dynamic = 0.0;
  double iou_static = 0.0;
  std::size_t loss_events = 0;
  std::size_t latency_frames = 0;
  std::size_t payload_bytes = 0;
  std::optional<double> value;
};

struct SweepLeg {
  std::string setting;
  EpisodeMetrics metrics;
};

struct ExperimentResult {
  std::string name;
  std::vector<SweepLeg> legs;
  std::vector<ExperimentRow> rows;
};

inline ExperimentRow make_row(const std::string& sweep, const std::string& setting, const std::string& kind) {
  ExperimentRow row;
  row.sweep = sweep;
  row.setting = setting;
  row.kind = kind;
  return row;
}

inline ExperimentRow aggregate_row(const std::string& sweep, const std::string& setting, const EpisodeMetrics& m) {
  ExperimentRow row = make_row(sweep, setting, "aggregate");
  const double n = m.frames.empty() ? 1.0 : static_cast<double>(m.frames.size());
  for (const auto& f : m.frames) {
    row.fraction_selected += f.fraction_selected / n;
    row.bandwidth_mbps += f.bandwidth_mbps / n;
    row.iou_dynamic += f.iou_dynamic / n;
    row.iou_static += f.iou_static / n;
    row.loss_events += f.loss_events;
    row.latency_frames = std::max(row.latency_frames, f.latency_frames);
    row.payload_bytes += f.payload_bytes;
  }
  row.value = m.aggregate_iou();
  return row;
}

inline void append_leg_rows(ExperimentResult& result, const Scenario& sc, const SweepLeg& leg) {
  for (const auto& f : leg.metrics.frames) {
    ExperimentRow row = make_row(result.name, leg.setting, "frame");
    row.frame = f.frame_id;
    row.complexity = sc.complexity_schedule.at(f.frame_id);
    row.fraction_selected = f.fraction_selected;
    row.bandwidth_mbps = f.bandwidth_mbps;
    row.iou_dynamic = f.iou_dynamic;
    row.iou_static = f.iou_static;
    row.loss_events = f.loss_events;
    row.latency_frames = f.latency_frames;
    row.payload_bytes = f.payload_bytes;
    result.rows.push_back(row);
  }
  result.rows.push_back(aggregate_row(result.name, leg.setting, leg.metrics));
}

inline ExperimentRow derived_row(const std::string& sweep, const std::string& setting, const std::string& kind,
                                 std::optional<double> value) {
  ExperimentRow row = make_row(sweep, setting, kind);
  row.value = value;
  return row;
}

// Payload bytes a responder would send for `features` under `mask` at the
// given compression; used to compare rates on identical masks.
inline std::size_t payload_size(const FeatureGrid& features, const ChannelMask& mask, const CompressionConfig& cc) {
  return make_response(0, 0, mask, features, Pose{}, cc).payload.size();
}

// Replays the request masks of `reference_run` against each responder's
// warped features and sums payload bytes per compression setting.
inline std::size_t replay_payload_bytes(const Scenario& sc, const EpisodeMetrics& reference_run,
                                        const CompressionConfig& cc) {
  const ScenarioConfig& scfg = sc.config;
  std::size_t total = 0;
  for (const auto& f : reference_run.frames) {
    if (f.request_mask.count() == 0) continue;
    for (std::size_t a = 1; a < sc.agent_count(); ++a) {
      const Pose rel = relative_pose(sc.trajectories[a][f.frame_id], sc.trajectories[0][f.frame_id]);
      const WarpResult w = spatial_transform(encode_features(sc, a, f.frame_id), rel, scfg.cell_size);
      total += payload_size(w.grid, f.request_mask, cc);
    }
  }
  return total;
}

// Runs sweep `name` on `sc` with `base` as the shared episode settings.
inline ExperimentResult experiment_suite(std::string_view name, const Scenario& sc, const Model& model,
                                         const EpisodeConfig& base) {
  if (!is_experiment_name(name)) {
    throw ValidationError("unknown experiment \"" + std::string(name) +
                          "\" (expected adaptation, loss_sweep, latency_sweep or compression_sweep)");
  }
  ExperimentResult result;
  result.name = std::string(name);
  auto run_leg = [&](const std::string& setting, const EpisodeConfig& cfg) {
    SweepLeg leg{setting, run_episode(sc, model, cfg)};
    append_leg_rows(result, sc, leg);
    result.legs.push_back(std::move(leg));
  };

  if (name == "adaptation") {
    run_leg("default", base);
    result.rows.push_back(derived_row(result.name, "default", "spearman",
                                      adaptation_correlation(result.legs[0].metrics, sc)));
  } else if (name == "loss_sweep") {
    for (int pct : {0, 10}) {
      EpisodeConfig cfg = base;
      cfg.use_network = true;
      cfg.network.loss_rate = pct / 100.0;
      run_leg("loss_pct=" + std::to_string(pct), cfg);
    }
    result.rows.push_back(derived_row(result.name, "loss_pct=10 vs loss_pct=0", "iou_delta",
                                      result.legs[1].metrics.aggregate_iou() - result.legs[0].metrics.aggregate_iou()));
  } else if (name == "latency_sweep") {
    for (int ms : {0, 50, 100, 200}) {
      EpisodeConfig cfg = base;
      cfg.use_network = true;
      cfg.network.latency_ms = ms;
      run_leg("latency_ms=" + std::to_string(ms), cfg);
    }
    EpisodeConfig direct = base;
    direct.use_network = false;
    const bool identical = run_episode(sc, model, direct) == result.legs[0].metrics;
    result.rows.push_back(derived_row(result.name, "latency_ms=0 vs direct", "bit_identical", identical ? 1.0 : 0.0));
  } else {
    const char* labels[] = {"1x", "8x", "32x"};
    for (const char* label : labels) {
      EpisodeConfig cfg = base;
      cfg.compression = CompressionConfig::from_label(label, base.compression.lossless);
      run_leg(label, cfg);
    }
    const std::size_t full = replay_payload_bytes(sc, result.legs[0].metrics, CompressionConfig::from_label("1x", base.compression.lossless));
    for (const char* label : {"8x", "32x"}) {
      const std::size_t bytes =
          replay_payload_bytes(sc, result.legs[0].metrics, CompressionConfig::from_label(label, base.compression.lossless));
      std::optional<double> ratio;
      if (full > 0) ratio = static_cast<double>(bytes) / static_cast<double>(full);
      result.rows.push_back(derived_row(result.name, std::string(label) + " vs 1x", "payload_ratio", ratio));
    }
  }
  return result;
}

inline constexpr std::string_view kExperimentCsvHeader =
    "sweep,setting,kind,frame,complexity,fraction_selected,bandwidth_mbps,iou_dynamic,iou_static,loss_events,"
    "latency_frames,payload_bytes,value";

// Undefined values (e.g. a correlation over a constant series) are written as "nan".
inline void write_experiment_csv(std::ostream& os, const ExperimentResult& result) {
  os << kExperimentCsvHeader << '\n';
  for (const auto& r : result.rows) {
    os << r.sweep << ',' << r.setting << ',' << r.kind << ',';
    if (r.frame) os << *r.frame;
    os << ',';
    if (r.complexity) os << *r.complexity;
    os << ',' << format_double(r.fraction_selected) << ',' << format_double(r.bandwidth_mbps) << ','
       << format_double(r.iou_dynamic) << ',' << format_double(r.iou_static) << ',' << r.loss_events << ','
       << r.latency_frames << ',' << r.payload_bytes << ',' << (r.value ? format_double(*r.value) : "nan") << '\n';
  }
}

}  // namespace coopertrim
