#pragma once

// End-to-end episodes over synthetic scenarios: request, respond, transmit,
// fuse, read out; plus the metrics and sweeps built on top of them.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/feature_grid.hpp"
#include "coopertrim/model.hpp"
#include "coopertrim/netsim.hpp"
#include "coopertrim/protocol.hpp"
#include "coopertrim/rng.hpp"
#include "coopertrim/scenario.hpp"
#include "coopertrim/training.hpp"

namespace coopertrim {

// |pred & truth| / |pred | truth|, 1 when both are empty.
inline double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw DimensionError("iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool t = truth[i] != 0;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Rank correlation

// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson: length mismatch");
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Spearman correlation; empty when either series is constant.
inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeConfig {
  NetworkConfig network;
  bool use_network = true;   // false: responses arrive instantly, nothing is lost
  bool cooperation = true;   // false: ego-only baseline
  CompressionConfig compression;
  BlendRule blend = BlendRule::kAverage;
  SelectionConfig selection;
  double reference_ema = 0.0;  // 0: reference is exactly the previous fused grid
  bool verify_reference_chain = false;
  std::uint64_t seed = 11;
};

struct FrameMetrics {
  std::size_t frame_id = 0;
  double fraction_selected = 0.0;
  double bandwidth_mbps = 0.0;
  double iou_dynamic = 0.0;
  double iou_static = 0.0;
  std::size_t loss_events = 0;
  std::size_t latency_frames = 0;
  std::size_t payload_bytes = 0;
  ChannelMask request_mask;  // empty without cooperation

  friend bool operator==(const FrameMetrics&, const FrameMetrics&) = default;
};

struct EpisodeMetrics {
  std::vector<FrameMetrics> frames;

  std::vector<double> fractions() const {
    std::vector<double> out;
    for (const auto& f : frames) out.push_back(f.fraction_selected);
    return out;
  }
  double mean_fraction() const {
    double s = 0.0;
    for (const auto& f : frames) s += f.fraction_selected;
    return frames.empty() ? 0.0 : s / static_cast<double>(frames.size());
  }
  double mean_bandwidth() const {
    double s = 0.0;
    for (const auto& f : frames) s += f.bandwidth_mbps;
    return frames.empty() ? 0.0 : s / static_cast<double>(frames.size());
  }
  // Mean over frames of the two class IoUs, in [0, 1].
  double aggregate_iou() const {
    double s = 0.0;
    for (const auto& f : frames) s += 0.5 * (f.iou_dynamic + f.iou_static);
    return frames.empty() ? 0.0 : s / static_cast<double>(frames.size());
  }

  friend bool operator==(const EpisodeMetrics&, const EpisodeMetrics&) = default;
};

inline std::uint64_t fnv1a(std::span<const double> values) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFFU;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

// Predicted class cells from head logits (class-major, logit > 0).
inline std::vector<std::uint8_t> predict_cells(const Model& model, const FeatureGrid& fused) {
  const auto logits = model.head.logits(fused);
  std::vector<std::uint8_t> pred(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) pred[i] = logits[i] > 0.0 ? 1 : 0;
  return pred;
}

namespace detail {

struct PendingRequest {
  std::uint64_t arrival = 0;
  std::size_t responder = 0;
  Bytes bytes;
};

struct PendingResponse {
  std::uint64_t arrival = 0;
  std::uint64_t sent = 0;
  Bytes bytes;
};

}  // namespace detail

inline void check_episode_inputs(const Scenario& sc, const Model& model) {
  const auto& cfg = sc.config;
  if (model.channels() != cfg.channels || model.attention.plane_size() != cfg.height * cfg.width) {
    throw DimensionError("run_episode: model shape (" + std::to_string(model.channels()) + " channels, plane " +
                         std::to_string(model.attention.plane_size()) + ") does not match scenario (" +
                         std::to_string(cfg.channels) + ", " + std::to_string(cfg.height * cfg.width) + ")");
  }
}

// Agent 0 is the ego; every other agent responds to its requests.
inline EpisodeMetrics run_episode(const Scenario& sc, const Model& model, const EpisodeConfig& cfg) {
  check_episode_inputs(sc, model);
  cfg.network.validate();
  const ScenarioConfig& scfg = sc.config;
  const std::size_t channels = scfg.channels;
  const std::size_t frames = sc.frames();
  const Rng root(cfg.seed);
  Rng transport = root.substream(0x7A45);
  Rng loss = root.substream(0x1055);

  // Per-channel loss is applied at the receiver; the transport only drops
  // whole messages in per-message mode.
  NetworkConfig transport_cfg = cfg.network;
  if (cfg.network.loss_granularity == LossGranularity::kPerChannel) transport_cfg.loss_rate = 0.0;
  NetworkConfig request_cfg = transport_cfg;
  if (!cfg.network.delay_requests) {
    request_cfg.latency_ms = 0.0;
    request_cfg.jitter_ms = 0.0;
  }

  FeatureGrid reference = FeatureGrid::zeros(channels, scfg.height, scfg.width);
  std::uint64_t reference_hash = fnv1a(reference.values());
  std::vector<detail::PendingRequest> requests;
  std::vector<detail::PendingResponse> responses;
  EpisodeMetrics metrics;

  for (std::size_t t = 0; t < frames; ++t) {
    try {
      if (cfg.verify_reference_chain && fnv1a(reference.values()) != reference_hash) {
        throw Error("temporal reference does not match the stored fused grid");
      }
      const FeatureGrid ego = encode_features(sc, 0, t);
      const Pose& ego_pose = sc.trajectories[0][t];
      FrameMetrics row;
      row.frame_id = t;

      std::vector<Contribution> received;
      if (cfg.cooperation && sc.agent_count() > 1) {
        const Selection sel = select_request(model, ego, reference, cfg.selection);
        row.fraction_selected = selected_fraction(sel.mask);
        row.request_mask = sel.mask;
        row.bandwidth_mbps = bandwidth_mbps(row.fraction_selected, cfg.network);

        const Bytes req = encode_request(scfg.agents[0].id, t, sel.mask, ego_pose);
        for (std::size_t a = 1; a < sc.agent_count(); ++a) {
          std::uint64_t arrival = t;
          if (cfg.use_network) {
            const DeliveryRecord rec = transmit(req.size(), t, request_cfg, transport);
            if (rec.dropped()) {
              ++row.loss_events;
              continue;
            }
            arrival = *rec.delivered_frame;
          }
          requests.push_back({arrival, a, req});
        }

        // Responders answer requests that have reached them by now.
        std::vector<detail::PendingRequest> waiting;
        for (auto& pr : requests) {
          if (pr.arrival > t) {
            waiting.push_back(std::move(pr));
            continue;
          }
          const RequestMessage msg = decode_request(pr.bytes);
          const Pose& own = sc.trajectories[pr.responder][t];
          const Pose rel = relative_pose(own, msg.pose.to_pose());
          const WarpResult warped = spatial_transform(encode_features(sc, pr.responder, t), rel, scfg.cell_size);
          const ResponseMessage resp = make_response(scfg.agents[pr.responder].id, msg.frame_id, msg.mask,
                                                     warped.grid, own, cfg.compression);
          Bytes bytes = encode_response(resp);
          std::uint64_t arrival = t;
          if (cfg.use_network) {
            const DeliveryRecord rec = transmit(bytes.size(), t, transport_cfg, transport);
            if (rec.dropped()) {
              ++row.loss_events;
              continue;
            }
            arrival = *rec.delivered_frame;
          }
          responses.push_back({arrival, msg.frame_id, std::move(bytes)});
        }
        requests = std::move(waiting);

        // Fuse whatever arrives this frame, however stale.
        std::vector<detail::PendingResponse> in_flight;
        for (auto& pr : responses) {
          if (pr.arrival > t) {
            in_flight.push_back(std::move(pr));
            continue;
          }
          const ResponseMessage resp = decode_response(pr.bytes);
          row.payload_bytes += resp.payload.size();
          row.latency_frames = std::max<std::size_t>(row.latency_frames, t - pr.sent);
          const Pose& ego_then = sc.trajectories[0][pr.sent];
          const Pose rel = relative_pose(resp.pose.to_pose(), ego_then);
          Contribution c{response_features(resp), transform_validity(scfg.height, scfg.width, rel, scfg.cell_size),
                         resp.mask};
          if (cfg.use_network && cfg.network.loss_granularity == LossGranularity::kPerChannel) {
            LossMaskResult lost = apply_loss_mask(c.grid, c.mask, cfg.network.loss_rate, loss);
            row.loss_events += c.mask.count() - lost.mask.count();
            c.grid = std::move(lost.grid);
            c.mask = std::move(lost.mask);
          }
          received.push_back(std::move(c));
        }
        responses = std::move(in_flight);
      }

      const FeatureGrid fused = fuse(ego, received, cfg.blend);
      const auto pred = predict_cells(model, fused);
      const auto truth = ground_truth(sc, t);
      const std::size_t plane = scfg.height * scfg.width;
      row.iou_dynamic = iou(std::span(pred).first(plane), std::span(truth).first(plane));
      row.iou_static = iou(std::span(pred).subspan(plane), std::span(truth).subspan(plane));
      metrics.frames.push_back(row);

      if (cfg.reference_ema > 0.0) {
        std::vector<double> mixed(fused.size());
        for (std::size_t i = 0; i < mixed.size(); ++i) {
          mixed[i] = cfg.reference_ema * reference.values()[i] + (1.0 - cfg.reference_ema) * fused.values()[i];
        }
        reference = FeatureGrid(channels, scfg.height, scfg.width, std::move(mixed));
      } else {
        reference = fused;
      }
      reference_hash = fnv1a(reference.values());
    } catch (const Error& e) {
      throw Error("frame " + std::to_string(t) + ": " + e.what());
    }
  }
  return metrics;
}

// Spearman correlation between the scene's complexity and the ego's request volume.
inline std::optional<double> adaptation_correlation(const EpisodeMetrics& metrics, const Scenario& sc) {
  if (metrics.frames.size() != sc.complexity_schedule.size()) {
    throw DimensionError("adaptation_correlation: metrics and schedule lengths differ");
  }
  std::vector<double> complexity(sc.complexity_schedule.begin(), sc.complexity_schedule.end());
  return spearman(complexity, metrics.fractions());
}

// ---------------------------------------------------------------------------
// Training data from scenarios

// The exchange delta assumes every responder sends every channel, lossless and
// on time; the pipeline then scales it per channel by the mask.
inline TrainingEpisode prepare_training_episode(const Scenario& sc, BlendRule blend = BlendRule::kAverage) {
  const ScenarioConfig& scfg = sc.config;
  TrainingEpisode episode;
  for (std::size_t t = 0; t < sc.frames(); ++t) {
    FeatureGrid ego = encode_features(sc, 0, t);
    std::vector<Contribution> received;
    for (std::size_t a = 1; a < sc.agent_count(); ++a) {
      const Pose rel = relative_pose(sc.trajectories[a][t], sc.trajectories[0][t]);
      WarpResult w = spatial_transform(encode_features(sc, a, t), rel, scfg.cell_size);
      received.push_back({std::move(w.grid), std::move(w.valid), ChannelMask::full(scfg.channels)});
    }
    const FeatureGrid full = fuse(ego, received, blend);
    std::vector<double> delta(full.size());
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = full.values()[i] - ego.values()[i];
    FeatureGrid d(scfg.channels, scfg.height, scfg.width, std::move(delta));
    episode.push_back({std::move(ego), std::move(d), ground_truth(sc, t)});
  }
  return episode;
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline void write_episode_csv(std::ostream& os, const EpisodeMetrics& m) {
  os << "frame_id,fraction_selected,bandwidth_mbps,iou_dynamic,iou_static,loss_events,latency_frames,payload_bytes\n";
  for (const auto& f : m.frames) {
    os << f.frame_id << ',' << format_double(f.fraction_selected) << ',' << format_double(f.bandwidth_mbps) << ','
       << format_double(f.iou_dynamic) << ',' << format_double(f.iou_static) << ',' << f.loss_events << ','
       << f.latency_frames << ',' << f.payload_bytes << '\n';
  }
}

}  // namespace coopertrim
