#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "coopertrim/relevance.hpp"
#include "coopertrim/rng.hpp"

using namespace coopertrim;

namespace {

// Plain matrix arithmetic over the explicit weights, no shared helpers.
std::vector<double> oracle_relevance(const std::vector<double>& u, const FeatureGrid& f, const AttentionParams& p) {
  const std::size_t C = f.channels(), P = f.plane_size(), dk = p.d_k(), dv = p.d_v();
  std::vector<std::vector<double>> q(C, std::vector<double>(dk)), k(C, std::vector<double>(dk)),
      v(C, std::vector<double>(dv));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t d = 0; d < dk; ++d) {
      q[c][d] = p.query_proj.weight(d, 0) * u[c] + p.query_proj.bias()[d];
      double acc = p.key_proj.bias()[d];
      for (std::size_t i = 0; i < P; ++i) acc += p.key_proj.weight(d, i) * f.channel(c)[i];
      k[c][d] = acc;
    }
    for (std::size_t d = 0; d < dv; ++d) {
      double acc = p.value_proj.bias()[d];
      for (std::size_t i = 0; i < P; ++i) acc += p.value_proj.weight(d, i) * f.channel(c)[i];
      v[c][d] = acc;
    }
  }
  std::vector<double> r(C);
  for (std::size_t i = 0; i < C; ++i) {
    std::vector<double> logits(C);
    double mx = -1e300;
    for (std::size_t j = 0; j < C; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dk; ++d) dot += q[i][d] * k[j][d];
      logits[j] = dot / std::sqrt(static_cast<double>(dk));
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    double out = p.out_proj.bias()[0];
    for (std::size_t d = 0; d < dv; ++d) {
      double o = 0.0;
      for (std::size_t j = 0; j < C; ++j) o += logits[j] / z * v[j][d];
      out += p.out_proj.weight(0, d) * o;
    }
    r[i] = out;
  }
  return r;
}

FeatureGrid random_grid(Rng& rng, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> v(c * h * w);
  for (auto& x : v) x = rng.normal();
  return FeatureGrid(c, h, w, std::move(v));
}

}  // namespace

TEST(CrossAttention, UniformAttentionAveragesValues) {
  // Zero query gives equal logits, so each output is the mean of the values.
  AttentionParams p{LinearMap::zeros(1, 1), LinearMap(1, 1, {1}, {0}), LinearMap(1, 1, {1}, {0}),
                    LinearMap(1, 1, {1}, {0})};
  const auto r = cross_attention_relevance(UncertaintyVector{{0.3, 0.9}}, new_feature_grid(2, 1, 1, {2, 4}), p);
  EXPECT_DOUBLE_EQ(r[0], 3.0);
  EXPECT_DOUBLE_EQ(r[1], 3.0);
}

TEST(CrossAttention, ZeroOutputProjectionGivesZeros) {
  Rng rng(1);
  AttentionParams p = AttentionParams::initialize(4, 3, 5, rng);
  p.out_proj = LinearMap::zeros(5, 1);
  const auto r = cross_attention_relevance(UncertaintyVector{{1, 2, 3}}, random_grid(rng, 3, 2, 2), p);
  for (double x : r.values) EXPECT_EQ(x, 0.0);
}

TEST(CrossAttention, MatchesLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t C = 1 + rng.below(8), H = 1 + rng.below(3), W = 1 + rng.below(3);
    const std::size_t dk = 1 + rng.below(6), dv = 1 + rng.below(6);
    AttentionParams p = AttentionParams::initialize(H * W, dk, dv, rng);
    for (auto& b : p.key_proj.bias_mut()) b = rng.normal();
    for (auto& b : p.out_proj.bias_mut()) b = rng.normal();
    std::vector<double> u(C);
    for (auto& x : u) x = rng.uniform(0, 2);
    const FeatureGrid f = random_grid(rng, C, H, W);
    const auto got = cross_attention_relevance(UncertaintyVector{u}, f, p);
    const auto want = oracle_relevance(u, f, p);
    for (std::size_t c = 0; c < C; ++c) ASSERT_NEAR(got[c], want[c], 1e-12 * (1.0 + std::fabs(want[c])));
  }
}

TEST(CrossAttention, DimensionChecks) {
  Rng rng(3);
  const AttentionParams p = AttentionParams::initialize(4, 2, 2, rng);
  EXPECT_THROW(cross_attention_relevance(UncertaintyVector{{1, 2}}, random_grid(rng, 3, 2, 2), p), DimensionError);
  EXPECT_THROW(cross_attention_relevance(UncertaintyVector{{1, 2, 3}}, random_grid(rng, 3, 3, 3), p),
               DimensionError);
}

TEST(SelectChannels, StrictThreshold) {
  const auto m = select_channels(RelevanceScores{{0.2, 0.8, 0.5}}, 0.5);
  EXPECT_EQ(m, ChannelMask(std::vector<bool>{false, true, false}));
}

TEST(SelectChannels, ExtremeThresholds) {
  const RelevanceScores r{{-3, 0, 7}};
  EXPECT_EQ(select_channels(r, -1e9).count(), 3u);
  EXPECT_EQ(select_channels(r, 7).count(), 0u);
}

TEST(SoftMask, KnownValues) {
  const auto m = soft_mask(RelevanceScores{{0.5 + std::log(3.0), 0.5}}, 0.5, 1.0);
  EXPECT_NEAR(m[0], 0.75, 1e-15);
  EXPECT_DOUBLE_EQ(m[1], 0.5);
}

TEST(SoftMask, SaturatesAtSmallTemperature) {
  const auto m = soft_mask(RelevanceScores{{1.0, 0.0}}, 0.5, 1e-3);
  EXPECT_EQ(m[0], 1.0);
  EXPECT_LT(m[1], 1e-200);
  EXPECT_THROW(soft_mask(RelevanceScores{{1.0}}, 0.5, 0.0), ValidationError);
}

TEST(SelectedFraction, Counts) {
  ChannelMask m(128);
  for (std::size_t c = 0; c < 32; ++c) m.set(c * 4, true);
  EXPECT_EQ(selected_fraction(m), 0.25);
  EXPECT_EQ(selected_fraction(ChannelMask(5)), 0.0);
  EXPECT_EQ(selected_fraction(ChannelMask::full(7)), 1.0);
}

TEST(ChannelMask, SubsetRelation) {
  const ChannelMask a(std::vector<bool>{true, false, false});
  const ChannelMask b(std::vector<bool>{true, true, false});
  EXPECT_TRUE(a.is_subset_of(b));
  EXPECT_FALSE(b.is_subset_of(a));
  EXPECT_FALSE(a.is_subset_of(ChannelMask(4)));
}

TEST(CrossAttention, SoftmaxRowsAreDistributions) {
  Rng rng(4);
  const AttentionParams p = AttentionParams::initialize(6, 4, 3, rng);
  AttentionCache cache;
  cross_attention_relevance(UncertaintyVector{{0.1, 5.0, 2.0, 0.0, 9.0}}, random_grid(rng, 5, 2, 3), p, &cache);
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double a = cache.a[i * 5 + j];
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
      sum += a;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(CrossAttention, PermutationEquivariant) {
  Rng rng(5);
  const std::size_t C = 6, H = 2, W = 2;
  const AttentionParams p = AttentionParams::initialize(H * W, 3, 3, rng);
  std::vector<double> u(C);
  for (auto& x : u) x = rng.uniform(0, 1);
  const FeatureGrid f = random_grid(rng, C, H, W);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<double> pu(C), pf(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    pu[c] = u[perm[c]];
    for (std::size_t i = 0; i < H * W; ++i) pf[c * H * W + i] = f.channel(perm[c])[i];
  }
  const auto r = cross_attention_relevance(UncertaintyVector{u}, f, p);
  const auto pr = cross_attention_relevance(UncertaintyVector{pu}, FeatureGrid(C, H, W, pf), p);
  const auto m = select_channels(r, 0.0), pm = select_channels(pr, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    EXPECT_NEAR(pr[c], r[perm[c]], 1e-12);
    EXPECT_EQ(pm[c], m[perm[c]]);
  }
}

TEST(SelectChannels, MonotoneInTau) {
  Rng rng(6);
  RelevanceScores r{std::vector<double>(64)};
  for (auto& x : r.values) x = rng.normal();
  double prev = 1.0;
  ChannelMask last = ChannelMask::full(64);
  for (double tau = -3.0; tau <= 3.0; tau += 0.25) {
    const ChannelMask m = select_channels(r, tau);
    EXPECT_TRUE(m.is_subset_of(last));
    EXPECT_LE(selected_fraction(m), prev);
    prev = selected_fraction(m);
    last = m;
  }
}
