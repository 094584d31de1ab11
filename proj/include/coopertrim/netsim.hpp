#pragma once

// Simulated V2V channel: per-message delay in whole frames, random loss, and
// bandwidth accounting on the fraction-of-full-link convention.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "coopertrim/error.hpp"
#include "coopertrim/feature_grid.hpp"
#include "coopertrim/relevance.hpp"
#include "coopertrim/rng.hpp"

namespace coopertrim {

enum class LossGranularity { kPerChannel, kPerMessage };

struct NetworkConfig {
  double loss_rate = 0.0;
  double latency_ms = 0.0;
  double jitter_ms = 0.0;  // extra delay ~ U[0, jitter_ms) per message
  double frame_period_ms = 100.0;
  double full_link_mbps = 40.0;
  LossGranularity loss_granularity = LossGranularity::kPerChannel;
  bool delay_requests = false;  // responses are always delayed

  void validate() const {
    if (!(loss_rate >= 0.0 && loss_rate <= 1.0)) throw ValidationError("NetworkConfig: loss_rate must lie in [0, 1]");
    if (!(latency_ms >= 0.0) || !(jitter_ms >= 0.0)) throw ValidationError("NetworkConfig: latency must be >= 0");
    if (!(frame_period_ms > 0.0)) throw ValidationError("NetworkConfig: frame_period_ms must be positive");
    if (!(full_link_mbps > 0.0)) throw ValidationError("NetworkConfig: full_link_mbps must be positive");
  }
};

struct DeliveryRecord {
  std::uint64_t sent_frame = 0;
  std::optional<std::uint64_t> delivered_frame;  // empty when dropped
  std::size_t bytes_on_wire = 0;

  bool dropped() const noexcept { return !delivered_frame.has_value(); }
};

inline std::uint64_t latency_frames(double delay_ms, const NetworkConfig& cfg) {
  // 1e-9 slack so 100 ms at a 100 ms period is one frame, not two.
  return static_cast<std::uint64_t>(std::ceil(delay_ms / cfg.frame_period_ms - 1e-9));
}

// Drop decision honours cfg.loss_rate regardless of granularity; callers that
// model per-channel loss pass a config with loss_rate 0 here.
inline DeliveryRecord transmit(std::size_t msg_bytes, std::uint64_t sent_frame, const NetworkConfig& cfg, Rng& rng) {
  cfg.validate();
  DeliveryRecord rec;
  rec.sent_frame = sent_frame;
  rec.bytes_on_wire = msg_bytes;
  const bool drop = rng.bernoulli(cfg.loss_rate);
  double delay = cfg.latency_ms;
  if (cfg.jitter_ms > 0.0) delay += rng.uniform(0.0, cfg.jitter_ms);
  if (!drop) rec.delivered_frame = sent_frame + latency_frames(delay, cfg);
  return rec;
}

inline double bandwidth_mbps(double fraction_selected, const NetworkConfig& cfg = {}) {
  if (!(fraction_selected >= 0.0 && fraction_selected <= 1.0)) {
    throw ValidationError("bandwidth_mbps: fraction must lie in [0, 1]");
  }
  return fraction_selected * cfg.full_link_mbps;
}

inline double budget_fraction(double target_mbps, const NetworkConfig& cfg = {}) {
  if (!(target_mbps >= 0.0 && target_mbps <= cfg.full_link_mbps)) {
    throw ValidationError("budget_fraction: target " + std::to_string(target_mbps) + " Mbps outside [0, " +
                          std::to_string(cfg.full_link_mbps) + "]");
  }
  return target_mbps / cfg.full_link_mbps;
}

struct LossMaskResult {
  FeatureGrid grid;
  ChannelMask mask;
};

// Each selected channel is independently lost with probability loss_rate.
// Lost channels leave the effective mask and are zeroed in the grid, so fusion
// falls back to the ego's own values there.
inline LossMaskResult apply_loss_mask(const FeatureGrid& grid, const ChannelMask& mask, double loss_rate, Rng& rng) {
  if (mask.size() != grid.channels()) throw DimensionError("apply_loss_mask: mask length mismatch");
  if (!(loss_rate >= 0.0 && loss_rate <= 1.0)) throw ValidationError("apply_loss_mask: loss_rate must lie in [0, 1]");
  ChannelMask effective = mask;
  bool any_lost = false;
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (mask[c] && rng.bernoulli(loss_rate)) {
      effective.set(c, false);
      any_lost = true;
    }
  }
  if (!any_lost) return {grid, effective};
  std::vector<double> values(grid.values().begin(), grid.values().end());
  const std::size_t plane = grid.plane_size();
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (mask[c] && !effective[c]) std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, 0.0);
  }
  return {FeatureGrid(grid.channels(), grid.height(), grid.width(), std::move(values)), effective};
}

}  // namespace coopertrim
