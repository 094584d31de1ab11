#pragma once

// Cross-attention relevance over channel tokens and the learned mask
// threshold that turns relevance into a per-channel request mask.
//
// Each channel is one token. Its query is lifted from the channel's scalar
// uncertainty (1 -> d_k); keys and values are projections of the channel's
// flattened H*W feature plane. Attention runs channel-to-channel:
//
//   Z = Q K^T / sqrt(d_k),  A = softmax_rows(Z),  O = A V,  R[c] = out(O[c])

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/feature_grid.hpp"
#include "coopertrim/rng.hpp"
#include "coopertrim/uncertainty.hpp"

namespace coopertrim {

struct AttentionParams {
  LinearMap query_proj;  // 1 -> d_k
  LinearMap key_proj;    // H*W -> d_k
  LinearMap value_proj;  // H*W -> d_v
  LinearMap out_proj;    // d_v -> 1

  std::size_t d_k() const noexcept { return query_proj.out_dim(); }
  std::size_t d_v() const noexcept { return value_proj.out_dim(); }
  std::size_t plane_size() const noexcept { return key_proj.in_dim(); }

  void validate() const {
    if (query_proj.in_dim() != 1) throw DimensionError("AttentionParams: query_proj must map 1 -> d_k");
    if (key_proj.out_dim() != d_k()) throw DimensionError("AttentionParams: key_proj output must be d_k");
    if (value_proj.in_dim() != key_proj.in_dim()) {
      throw DimensionError("AttentionParams: key and value projections must share input size");
    }
    if (out_proj.in_dim() != d_v() || out_proj.out_dim() != 1) {
      throw DimensionError("AttentionParams: out_proj must map d_v -> 1");
    }
  }

  static AttentionParams initialize(std::size_t plane_size, std::size_t d_k, std::size_t d_v, Rng& rng) {
    AttentionParams p{LinearMap::uniform_init(1, d_k, rng), LinearMap::uniform_init(plane_size, d_k, rng),
                      LinearMap::uniform_init(plane_size, d_v, rng), LinearMap::uniform_init(d_v, 1, rng)};
    return p;
  }

  static AttentionParams zeros_like(const AttentionParams& p) {
    return {LinearMap::zeros(1, p.d_k()), LinearMap::zeros(p.plane_size(), p.d_k()),
            LinearMap::zeros(p.plane_size(), p.d_v()), LinearMap::zeros(p.d_v(), 1)};
  }

  friend bool operator==(const AttentionParams&, const AttentionParams&) = default;
};

struct RelevanceScores {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const noexcept { return values[i]; }
};

// The learned quantity cutoff; unconstrained, tau() is the identity.
struct MaskThreshold {
  double raw_tau = 0.0;
  double tau() const noexcept { return raw_tau; }

  friend bool operator==(const MaskThreshold&, const MaskThreshold&) = default;
};

class ChannelMask {
 public:
  ChannelMask() = default;
  explicit ChannelMask(std::size_t channels, bool value = false) : bits_(channels, value) {}
  explicit ChannelMask(std::vector<bool> bits) : bits_(std::move(bits)) {}

  static ChannelMask full(std::size_t channels) { return ChannelMask(channels, true); }

  std::size_t size() const noexcept { return bits_.size(); }
  bool operator[](std::size_t c) const { return bits_[c]; }
  void set(std::size_t c, bool value) { bits_.at(c) = value; }
  const std::vector<bool>& bits() const noexcept { return bits_; }

  std::size_t count() const noexcept { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), true)); }

  bool is_subset_of(const ChannelMask& other) const {
    if (other.size() != size()) return false;
    for (std::size_t c = 0; c < size(); ++c) {
      if (bits_[c] && !other.bits_[c]) return false;
    }
    return true;
  }

  friend bool operator==(const ChannelMask&, const ChannelMask&) = default;

 private:
  std::vector<bool> bits_;
};

// Intermediate tensors of one attention pass, kept for the backward pass.
struct AttentionCache {
  std::size_t channels = 0;
  std::vector<double> q;  // C x d_k
  std::vector<double> k;  // C x d_k
  std::vector<double> v;  // C x d_v
  std::vector<double> a;  // C x C, row-stochastic
  std::vector<double> o;  // C x d_v
};

inline void softmax_rows(std::span<double> m, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = m.data() + r * cols;
    const double peak = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - peak);
      total += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= total;
  }
}

inline RelevanceScores cross_attention_relevance(const UncertaintyVector& u, const FeatureGrid& f,
                                                 const AttentionParams& p, AttentionCache* cache = nullptr) {
  p.validate();
  const std::size_t channels = f.channels();
  if (u.size() != channels) {
    throw DimensionError("cross_attention_relevance: uncertainty length " + std::to_string(u.size()) +
                         " does not match " + std::to_string(channels) + " channels");
  }
  if (f.plane_size() != p.plane_size()) {
    throw DimensionError("cross_attention_relevance: feature plane size " + std::to_string(f.plane_size()) +
                         " does not match projection input " + std::to_string(p.plane_size()));
  }
  const std::size_t dk = p.d_k();
  const std::size_t dv = p.d_v();
  AttentionCache local;
  AttentionCache& c = cache != nullptr ? *cache : local;
  c.channels = channels;
  c.q.assign(channels * dk, 0.0);
  c.k.assign(channels * dk, 0.0);
  c.v.assign(channels * dv, 0.0);
  c.a.assign(channels * channels, 0.0);
  c.o.assign(channels * dv, 0.0);

  for (std::size_t ch = 0; ch < channels; ++ch) {
    const double uc = u[ch];
    p.query_proj.apply_into(std::span<const double>(&uc, 1), std::span<double>(c.q).subspan(ch * dk, dk));
    p.key_proj.apply_into(f.channel(ch), std::span<double>(c.k).subspan(ch * dk, dk));
    p.value_proj.apply_into(f.channel(ch), std::span<double>(c.v).subspan(ch * dv, dv));
  }

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t i = 0; i < channels; ++i) {
    const double* qi = c.q.data() + i * dk;
    for (std::size_t j = 0; j < channels; ++j) {
      const double* kj = c.k.data() + j * dk;
      double dot = 0.0;
      for (std::size_t d = 0; d < dk; ++d) dot += qi[d] * kj[d];
      c.a[i * channels + j] = dot * inv_scale;
    }
  }
  softmax_rows(c.a, channels, channels);

  for (std::size_t i = 0; i < channels; ++i) {
    double* oi = c.o.data() + i * dv;
    for (std::size_t j = 0; j < channels; ++j) {
      const double w = c.a[i * channels + j];
      const double* vj = c.v.data() + j * dv;
      for (std::size_t d = 0; d < dv; ++d) oi[d] += w * vj[d];
    }
  }

  RelevanceScores r{std::vector<double>(channels)};
  for (std::size_t i = 0; i < channels; ++i) {
    p.out_proj.apply_into(std::span<const double>(c.o).subspan(i * dv, dv), std::span<double>(&r.values[i], 1));
  }
  for (double x : r.values) {
    if (!std::isfinite(x)) throw ValidationError("cross_attention_relevance: non-finite relevance");
  }
  return r;
}

// Accumulates dLoss/dparams into `grad` and returns dLoss/du, given dLoss/dR.
inline std::vector<double> cross_attention_backward(const UncertaintyVector& u, const FeatureGrid& f,
                                                    const AttentionParams& p, const AttentionCache& c,
                                                    std::span<const double> d_r, AttentionParams& grad) {
  const std::size_t channels = c.channels;
  const std::size_t dk = p.d_k();
  const std::size_t dv = p.d_v();
  const std::size_t plane = p.plane_size();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));

  // R[i] = wo . O[i] + bo
  std::vector<double> d_o(channels * dv);
  {
    auto gw = grad.out_proj.weights_mut();
    auto gb = grad.out_proj.bias_mut();
    const auto wo = p.out_proj.weights();
    for (std::size_t i = 0; i < channels; ++i) {
      gb[0] += d_r[i];
      for (std::size_t d = 0; d < dv; ++d) {
        gw[d] += d_r[i] * c.o[i * dv + d];
        d_o[i * dv + d] = d_r[i] * wo[d];
      }
    }
  }

  // O = A V
  std::vector<double> d_a(channels * channels, 0.0);
  std::vector<double> d_v(channels * dv, 0.0);
  for (std::size_t i = 0; i < channels; ++i) {
    const double* doi = d_o.data() + i * dv;
    for (std::size_t j = 0; j < channels; ++j) {
      const double* vj = c.v.data() + j * dv;
      double dot = 0.0;
      for (std::size_t d = 0; d < dv; ++d) dot += doi[d] * vj[d];
      d_a[i * channels + j] = dot;
      const double w = c.a[i * channels + j];
      double* dvj = d_v.data() + j * dv;
      for (std::size_t d = 0; d < dv; ++d) dvj[d] += w * doi[d];
    }
  }

  // Row-wise softmax; fold the 1/sqrt(d_k) scale into d_z.
  std::vector<double> d_z(channels * channels);
  for (std::size_t i = 0; i < channels; ++i) {
    const double* ai = c.a.data() + i * channels;
    const double* dai = d_a.data() + i * channels;
    double inner = 0.0;
    for (std::size_t j = 0; j < channels; ++j) inner += ai[j] * dai[j];
    for (std::size_t j = 0; j < channels; ++j) d_z[i * channels + j] = ai[j] * (dai[j] - inner) * inv_scale;
  }

  std::vector<double> d_q(channels * dk, 0.0);
  std::vector<double> d_k(channels * dk, 0.0);
  for (std::size_t i = 0; i < channels; ++i) {
    const double* qi = c.q.data() + i * dk;
    double* dqi = d_q.data() + i * dk;
    for (std::size_t j = 0; j < channels; ++j) {
      const double g = d_z[i * channels + j];
      if (g == 0.0) continue;
      const double* kj = c.k.data() + j * dk;
      double* dkj = d_k.data() + j * dk;
      for (std::size_t d = 0; d < dk; ++d) {
        dqi[d] += g * kj[d];
        dkj[d] += g * qi[d];
      }
    }
  }

  std::vector<double> d_u(channels, 0.0);
  {
    auto gw = grad.query_proj.weights_mut();
    auto gb = grad.query_proj.bias_mut();
    const auto wq = p.query_proj.weights();
    for (std::size_t i = 0; i < channels; ++i) {
      for (std::size_t d = 0; d < dk; ++d) {
        const double g = d_q[i * dk + d];
        gw[d] += g * u[i];
        gb[d] += g;
        d_u[i] += wq[d] * g;
      }
    }
  }

  auto accumulate_plane_map = [&](LinearMap& g, std::span<const double> d_out, std::size_t out_dim) {
    auto gw = g.weights_mut();
    auto gb = g.bias_mut();
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const auto x = f.channel(ch);
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double go = d_out[ch * out_dim + o];
        if (go == 0.0) continue;
        gb[o] += go;
        double* row = gw.data() + o * plane;
        for (std::size_t i = 0; i < plane; ++i) row[i] += go * x[i];
      }
    }
  };
  accumulate_plane_map(grad.key_proj, d_k, dk);
  accumulate_plane_map(grad.value_proj, d_v, dv);
  return d_u;
}

inline ChannelMask select_channels(const RelevanceScores& r, double tau) {
  ChannelMask mask(r.size());
  for (std::size_t c = 0; c < r.size(); ++c) mask.set(c, r[c] > tau);
  return mask;
}

inline std::vector<double> soft_mask(const RelevanceScores& r, double tau, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("soft_mask: temperature must be positive");
  std::vector<double> m(r.size());
  for (std::size_t c = 0; c < r.size(); ++c) m[c] = logistic((r[c] - tau) / temperature);
  return m;
}

inline double selected_fraction(const ChannelMask& mask) {
  if (mask.size() == 0) return 0.0;
  return static_cast<double>(mask.count()) / static_cast<double>(mask.size());
}

}  // namespace coopertrim
