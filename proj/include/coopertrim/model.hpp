#pragma once

// The learnable selection model and its inference-time request path.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "coopertrim/feature_grid.hpp"
#include "coopertrim/relevance.hpp"
#include "coopertrim/rng.hpp"
#include "coopertrim/uncertainty.hpp"

namespace coopertrim {

// Per-cell linear read-out over channels: two logits per cell, one for the
// dynamic-object class and one for the static-road class.
struct ToyTaskHead {
  static constexpr std::size_t kClasses = 2;
  LinearMap map;  // C -> 2

  static ToyTaskHead initialize(std::size_t channels, Rng& rng) {
    return {LinearMap::uniform_init(channels, kClasses, rng)};
  }

  // Logits laid out class-major: [class][H*W].
  std::vector<double> logits(const FeatureGrid& fused) const {
    const std::size_t plane = fused.plane_size();
    const std::size_t channels = fused.channels();
    std::vector<double> out(kClasses * plane);
    const auto w = map.weights();
    const auto b = map.bias();
    const auto v = fused.values();
    for (std::size_t k = 0; k < kClasses; ++k) {
      double* dst = out.data() + k * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = b[k];
      for (std::size_t c = 0; c < channels; ++c) {
        const double wkc = w[k * channels + c];
        const double* src = v.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += wkc * src[i];
      }
    }
    return out;
  }

  friend bool operator==(const ToyTaskHead&, const ToyTaskHead&) = default;
};

struct ModelShape {
  std::size_t channels = 128;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t d_k = 16;
  std::size_t d_v = 16;
};

struct Model {
  AttentionParams attention;
  QuantileGate gate;
  MaskThreshold threshold;
  ToyTaskHead head;

  std::size_t channels() const noexcept { return head.map.in_dim(); }

  static Model initialize(const ModelShape& shape, std::uint64_t seed) {
    Rng rng = Rng(seed).substream(0x5E1EC7);
    Model m;
    m.attention = AttentionParams::initialize(shape.height * shape.width, shape.d_k, shape.d_v, rng);
    m.head = ToyTaskHead::initialize(shape.channels, rng);
    return m;
  }

  // Same shapes, every parameter zero; doubles as a gradient accumulator.
  static Model zeros_like(const Model& m) {
    Model z;
    z.attention = AttentionParams::zeros_like(m.attention);
    z.head.map = LinearMap::zeros(m.head.map.in_dim(), m.head.map.out_dim());
    return z;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

// Every learnable parameter as a flat list of mutable blocks, in a fixed order.
inline std::vector<std::span<double>> parameter_blocks(Model& m) {
  return {m.attention.query_proj.weights_mut(),
          m.attention.query_proj.bias_mut(),
          m.attention.key_proj.weights_mut(),
          m.attention.key_proj.bias_mut(),
          m.attention.value_proj.weights_mut(),
          m.attention.value_proj.bias_mut(),
          m.attention.out_proj.weights_mut(),
          m.attention.out_proj.bias_mut(),
          std::span<double>(&m.threshold.raw_tau, 1),
          std::span<double>(&m.gate.raw_level, 1),
          m.head.map.weights_mut(),
          m.head.map.bias_mut()};
}

inline std::vector<double> flatten_parameters(Model& m) {
  std::vector<double> flat;
  for (auto block : parameter_blocks(m)) flat.insert(flat.end(), block.begin(), block.end());
  return flat;
}

inline void assign_parameters(Model& m, std::span<const double> flat) {
  std::size_t k = 0;
  for (auto block : parameter_blocks(m)) {
    for (double& x : block) x = flat[k++];
  }
}

struct SelectionConfig {
  ChannelReduction reduction = ChannelReduction::kMean;
};

struct Selection {
  NonconformityMap scores;
  double q = 0.0;
  UncertaintyVector uncertainty;
  RelevanceScores relevance;
  ChannelMask mask;
};

// Hard inference path: deviation from the temporal reference, quantile gate,
// channel reduction, relevance, strict threshold.
inline Selection select_request(const Model& model, const FeatureGrid& current, const FeatureGrid& reference,
                                const SelectionConfig& cfg = {}) {
  Selection s;
  s.scores = l1_deviation(current, reference);
  s.q = quantile_threshold(s.scores, model.gate.level());
  const NonconformityMap gated = gate_scores(s.scores, s.q);
  s.uncertainty = channel_uncertainty(gated, cfg.reduction);
  s.relevance = cross_attention_relevance(s.uncertainty, current, model.attention);
  s.mask = select_channels(s.relevance, model.threshold.tau());
  return s;
}

}  // namespace coopertrim
