#pragma once

// Dense C x H x W feature grids and small affine maps.
//
// Layout is row-major by (channel, row, column): element (c, r, col) lives at
// c*H*W + r*W + col. The wire format in protocol.hpp serializes channels in
// this same order.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/rng.hpp"

namespace coopertrim {

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ValidationError(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

}  // namespace detail

class FeatureGrid {
 public:
  FeatureGrid() = default;

  FeatureGrid(std::size_t channels, std::size_t height, std::size_t width, std::vector<double> values)
      : channels_(channels), height_(height), width_(width), values_(std::move(values)) {
    if (channels == 0 || height == 0 || width == 0) {
      throw DimensionError("FeatureGrid: dimensions must be positive");
    }
    const std::size_t expected = channels * height * width;
    if (values_.size() != expected) {
      throw DimensionError("FeatureGrid: expected " + std::to_string(expected) + ", got " +
                           std::to_string(values_.size()));
    }
    detail::require_finite(values_, "FeatureGrid");
  }

  static FeatureGrid zeros(std::size_t channels, std::size_t height, std::size_t width) {
    return FeatureGrid(channels, height, width, std::vector<double>(channels * height * width, 0.0));
  }

  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t plane_size() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::size_t index(std::size_t c, std::size_t r, std::size_t col) const noexcept {
    return (c * height_ + r) * width_ + col;
  }

  double at(std::size_t c, std::size_t r, std::size_t col) const { return values_.at(index(c, r, col)); }

  std::span<const double> values() const noexcept { return values_; }

  // The H*W block of one channel.
  std::span<const double> channel(std::size_t c) const noexcept {
    return std::span<const double>(values_).subspan(c * plane_size(), plane_size());
  }

  bool same_shape(const FeatureGrid& other) const noexcept {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> values_;
};

inline FeatureGrid new_feature_grid(std::size_t channels, std::size_t height, std::size_t width,
                                    std::vector<double> values) {
  return FeatureGrid(channels, height, width, std::move(values));
}

inline void require_same_shape(const FeatureGrid& a, const FeatureGrid& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch (" + std::to_string(a.channels()) + "x" +
                         std::to_string(a.height()) + "x" + std::to_string(a.width()) + " vs " +
                         std::to_string(b.channels()) + "x" + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + ")");
  }
}

// Elementwise deviation scores; same shape as the grids they came from, all >= 0.
class NonconformityMap {
 public:
  NonconformityMap() = default;

  explicit NonconformityMap(FeatureGrid scores) : grid_(std::move(scores)) {
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      if (grid_.values()[i] < 0.0) {
        throw ValidationError("NonconformityMap: negative score at index " + std::to_string(i));
      }
    }
  }

  const FeatureGrid& grid() const noexcept { return grid_; }
  std::span<const double> values() const noexcept { return grid_.values(); }
  std::size_t size() const noexcept { return grid_.size(); }
  std::size_t channels() const noexcept { return grid_.channels(); }
  std::size_t plane_size() const noexcept { return grid_.plane_size(); }

  friend bool operator==(const NonconformityMap&, const NonconformityMap&) = default;

 private:
  FeatureGrid grid_;
};

inline NonconformityMap l1_deviation(const FeatureGrid& current, const FeatureGrid& previous_fused) {
  require_same_shape(current, previous_fused, "l1_deviation");
  std::vector<double> out(current.size());
  const auto a = current.values();
  const auto b = previous_fused.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a[i] - b[i]);
  return NonconformityMap(FeatureGrid(current.channels(), current.height(), current.width(), std::move(out)));
}

// y = W x + b with W stored row-major (out_dim x in_dim).
class LinearMap {
 public:
  LinearMap() = default;

  LinearMap(std::size_t in_dim, std::size_t out_dim, std::vector<double> weights, std::vector<double> bias)
      : in_dim_(in_dim), out_dim_(out_dim), weights_(std::move(weights)), bias_(std::move(bias)) {
    if (in_dim == 0 || out_dim == 0) throw DimensionError("LinearMap: dimensions must be positive");
    if (weights_.size() != in_dim * out_dim) {
      throw DimensionError("LinearMap: expected " + std::to_string(in_dim * out_dim) + " weights, got " +
                           std::to_string(weights_.size()));
    }
    if (bias_.size() != out_dim) {
      throw DimensionError("LinearMap: expected " + std::to_string(out_dim) + " bias entries, got " +
                           std::to_string(bias_.size()));
    }
    detail::require_finite(weights_, "LinearMap weights");
    detail::require_finite(bias_, "LinearMap bias");
  }

  static LinearMap zeros(std::size_t in_dim, std::size_t out_dim) {
    return LinearMap(in_dim, out_dim, std::vector<double>(in_dim * out_dim, 0.0), std::vector<double>(out_dim, 0.0));
  }

  // Weights ~ U(-1/sqrt(in), 1/sqrt(in)), zero bias.
  static LinearMap uniform_init(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    std::vector<double> w(in_dim * out_dim);
    for (auto& x : w) x = rng.uniform(-bound, bound);
    return LinearMap(in_dim, out_dim, std::move(w), std::vector<double>(out_dim, 0.0));
  }

  std::size_t in_dim() const noexcept { return in_dim_; }
  std::size_t out_dim() const noexcept { return out_dim_; }
  std::span<const double> weights() const noexcept { return weights_; }
  std::span<const double> bias() const noexcept { return bias_; }
  // Parameter access for the training loop (single owner).
  std::span<double> weights_mut() noexcept { return weights_; }
  std::span<double> bias_mut() noexcept { return bias_; }

  double weight(std::size_t row, std::size_t col) const noexcept { return weights_[row * in_dim_ + col]; }

  // Writes W x + b into `out` (length out_dim); no allocation.
  void apply_into(std::span<const double> x, std::span<double> out) const {
    if (x.size() != in_dim_) {
      throw DimensionError("LinearMap: expected input of length " + std::to_string(in_dim_) + ", got " +
                           std::to_string(x.size()));
    }
    for (std::size_t o = 0; o < out_dim_; ++o) {
      const double* row = weights_.data() + o * in_dim_;
      double acc = bias_[o];
      for (std::size_t i = 0; i < in_dim_; ++i) acc += row[i] * x[i];
      out[o] = acc;
    }
  }

  friend bool operator==(const LinearMap&, const LinearMap&) = default;

 private:
  std::size_t in_dim_ = 0;
  std::size_t out_dim_ = 0;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

inline std::vector<double> apply_linear(const LinearMap& map, std::span<const double> x) {
  std::vector<double> out(map.out_dim());
  map.apply_into(x, out);
  return out;
}

inline double logistic(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace coopertrim
