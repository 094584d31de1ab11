#pragma once

// Temporal uncertainty: quantile gating of nonconformity scores and the
// per-channel reduction that feeds the relevance queries.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/feature_grid.hpp"

namespace coopertrim {

// Learnable quantile level; the raw parameter is unbounded and squashed
// through a logistic so the level stays strictly inside (0, 1).
struct QuantileGate {
  double raw_level = 0.0;

  double level() const noexcept {
    // Keep the level representable as strictly inside (0, 1) in f64.
    return std::clamp(logistic(raw_level), 1e-12, 1.0 - 1e-12);
  }
  // d level / d raw_level
  double level_slope() const noexcept {
    const double l = logistic(raw_level);
    return l * (1.0 - l);
  }

  friend bool operator==(const QuantileGate&, const QuantileGate&) = default;
};

struct UncertaintyVector {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const noexcept { return values[i]; }
  friend bool operator==(const UncertaintyVector&, const UncertaintyVector&) = default;
};

enum class ChannelReduction { kMean, kMax, kFractionAbove };

// 1-based nearest rank ceil(level * n), clamped to [1, n]. The 1e-9 slack keeps
// products like 0.3 * 10 from rounding up to the next rank.
inline std::size_t nearest_rank(double level, std::size_t n) {
  const double pos = std::ceil(level * static_cast<double>(n) - 1e-9);
  if (pos < 1.0) return 1;
  if (pos > static_cast<double>(n)) return n;
  return static_cast<std::size_t>(pos);
}

inline double quantile_threshold(std::span<const double> scores, double level) {
  if (scores.empty()) throw ValidationError("quantile_threshold: empty score map");
  if (!(level > 0.0 && level <= 1.0)) {
    throw ValidationError("quantile_threshold: level must lie in (0, 1], got " + std::to_string(level));
  }
  std::vector<double> work(scores.begin(), scores.end());
  const std::size_t k = nearest_rank(level, work.size()) - 1;
  std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(k), work.end());
  return work[k];
}

inline double quantile_threshold(const NonconformityMap& scores, double level) {
  return quantile_threshold(scores.values(), level);
}

// Piecewise-linear quantile through the points (k/n, s_(k)). Agrees with the
// nearest-rank value at level = k/n and is differentiable between them;
// `slope` is d value / d level on the current segment.
struct InterpolatedQuantile {
  double value = 0.0;
  double slope = 0.0;
};

inline InterpolatedQuantile interpolated_quantile(std::span<const double> sorted_scores, double level) {
  const std::size_t n = sorted_scores.size();
  if (n == 0) throw ValidationError("interpolated_quantile: empty score map");
  const double pos = level * static_cast<double>(n);
  if (pos <= 1.0) return {sorted_scores.front(), 0.0};
  if (pos >= static_cast<double>(n)) return {sorted_scores.back(), 0.0};
  const auto k = static_cast<std::size_t>(std::floor(pos));  // 1-based lower rank
  const double lo = sorted_scores[k - 1];
  const double hi = sorted_scores[k];
  const double frac = pos - static_cast<double>(k);
  return {lo + frac * (hi - lo), static_cast<double>(n) * (hi - lo)};
}

// Nearest-rank threshold and interpolated quantile of unsorted scores in one
// selection pass; same results as sorting first.
struct QuantilePair {
  double nearest = 0.0;
  InterpolatedQuantile interpolated;
};

inline QuantilePair quantile_pair(std::span<const double> scores, double level) {
  const std::size_t n = scores.size();
  if (n == 0) throw ValidationError("quantile_pair: empty score map");
  std::vector<double> work(scores.begin(), scores.end());
  const double pos = level * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::clamp(std::floor(pos), 1.0, static_cast<double>(n)));
  auto kth = work.begin() + static_cast<std::ptrdiff_t>(k - 1);
  std::nth_element(work.begin(), kth, work.end());
  const double lo = *kth;
  const double hi = k < n ? *std::min_element(kth + 1, work.end()) : lo;
  QuantilePair out;
  const std::size_t rank = nearest_rank(level, n);
  out.nearest = rank == k ? lo : (rank == k + 1 ? hi : quantile_threshold(scores, level));
  if (pos <= 1.0) {
    out.interpolated = {lo, 0.0};
  } else if (pos >= static_cast<double>(n)) {
    out.interpolated = {lo, 0.0};
  } else {
    const double frac = pos - static_cast<double>(k);
    out.interpolated = {lo + frac * (hi - lo), static_cast<double>(n) * (hi - lo)};
  }
  return out;
}

inline NonconformityMap gate_scores(const NonconformityMap& scores, double q) {
  if (!std::isfinite(q)) throw ValidationError("gate_scores: threshold must be finite");
  const auto& g = scores.grid();
  std::vector<double> out(g.size());
  const auto in = g.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > q ? in[i] : 0.0;
  return NonconformityMap(FeatureGrid(g.channels(), g.height(), g.width(), std::move(out)));
}

// Smooth gate s * logistic((s - q) / temperature), used for the training relaxation.
inline double soft_gate(double score, double q, double temperature) noexcept {
  return score * logistic((score - q) / temperature);
}

inline UncertaintyVector channel_uncertainty(const NonconformityMap& gated,
                                             ChannelReduction reduction = ChannelReduction::kMean) {
  const auto& g = gated.grid();
  const std::size_t plane = g.plane_size();
  UncertaintyVector u{std::vector<double>(g.channels(), 0.0)};
  for (std::size_t c = 0; c < g.channels(); ++c) {
    const auto block = g.channel(c);
    double acc = 0.0;
    switch (reduction) {
      case ChannelReduction::kMean:
        for (double v : block) acc += v;
        acc /= static_cast<double>(plane);
        break;
      case ChannelReduction::kMax:
        for (double v : block) acc = std::max(acc, v);
        break;
      case ChannelReduction::kFractionAbove:
        for (double v : block) acc += v > 0.0 ? 1.0 : 0.0;
        acc /= static_cast<double>(plane);
        break;
    }
    u.values[c] = acc;
  }
  return u;
}

}  // namespace coopertrim
