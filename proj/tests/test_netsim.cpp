#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "coopertrim/netsim.hpp"

using namespace coopertrim;

TEST(Transmit, LosslessZeroLatencyDeliversSameFrame) {
  Rng rng(1);
  const auto rec = transmit(100, 7, NetworkConfig{}, rng);
  ASSERT_FALSE(rec.dropped());
  EXPECT_EQ(*rec.delivered_frame, 7u);
  EXPECT_EQ(rec.bytes_on_wire, 100u);
}

TEST(Transmit, FullLossDropsEverything) {
  Rng rng(2);
  NetworkConfig cfg;
  cfg.loss_rate = 1.0;
  for (int i = 0; i < 1000; ++i) ASSERT_TRUE(transmit(10, i, cfg, rng).dropped());
}

TEST(Transmit, LatencyRoundsUpToWholeFrames) {
  Rng rng(3);
  NetworkConfig cfg;
  cfg.latency_ms = 150.0;
  EXPECT_EQ(*transmit(10, 4, cfg, rng).delivered_frame, 6u);
  cfg.latency_ms = 100.0;
  EXPECT_EQ(*transmit(10, 4, cfg, rng).delivered_frame, 5u);
}

TEST(Transmit, DropCountWithinThreeSigma) {
  Rng rng(4);
  NetworkConfig cfg;
  cfg.loss_rate = 0.3;
  const int n = 20000;
  int dropped = 0;
  for (int i = 0; i < n; ++i) dropped += transmit(1, 0, cfg, rng).dropped() ? 1 : 0;
  const double sd = std::sqrt(n * 0.3 * 0.7);
  EXPECT_LE(std::fabs(dropped - n * 0.3), 3 * sd);
}

TEST(Transmit, JitterStaysInWindow) {
  Rng rng(5);
  NetworkConfig cfg;
  cfg.latency_ms = 50.0;
  cfg.jitter_ms = 100.0;
  for (int i = 0; i < 2000; ++i) {
    const auto f = *transmit(1, 10, cfg, rng).delivered_frame;
    ASSERT_GE(f, 11u);
    ASSERT_LE(f, 12u);
  }
}

TEST(Transmit, InvalidConfigRejected) {
  Rng rng(6);
  NetworkConfig cfg;
  cfg.loss_rate = 1.5;
  EXPECT_THROW(transmit(1, 0, cfg, rng), ValidationError);
  cfg.loss_rate = 0.0;
  cfg.frame_period_ms = 0.0;
  EXPECT_THROW(transmit(1, 0, cfg, rng), ValidationError);
}

TEST(LatencyFrames, Boundaries) {
  const NetworkConfig cfg;
  EXPECT_EQ(latency_frames(0.0, cfg), 0u);
  EXPECT_EQ(latency_frames(1.0, cfg), 1u);
  EXPECT_EQ(latency_frames(100.0, cfg), 1u);
  EXPECT_EQ(latency_frames(200.0, cfg), 2u);
  EXPECT_EQ(latency_frames(50.0, cfg), 1u);
}

TEST(Bandwidth, FractionOfFullLink) {
  EXPECT_EQ(bandwidth_mbps(0.0), 0.0);
  EXPECT_EQ(bandwidth_mbps(1.0), 40.0);
  EXPECT_EQ(bandwidth_mbps(0.25), 10.0);
  EXPECT_THROW(bandwidth_mbps(1.1), ValidationError);
}

TEST(Budget, InverseOfBandwidth) {
  EXPECT_EQ(budget_fraction(40.0), 1.0);
  EXPECT_EQ(budget_fraction(0.0), 0.0);
  EXPECT_DOUBLE_EQ(budget_fraction(1.6), 0.04);
  EXPECT_THROW(budget_fraction(41.0), ValidationError);
  EXPECT_THROW(budget_fraction(-1.0), ValidationError);
}

TEST(LossMask, ZeroRateKeepsEverything) {
  Rng rng(7);
  const FeatureGrid g = new_feature_grid(3, 1, 2, {1, 2, 3, 4, 5, 6});
  ChannelMask m(3);
  m.set(0, true);
  m.set(2, true);
  const auto r = apply_loss_mask(g, m, 0.0, rng);
  EXPECT_EQ(r.grid, g);
  EXPECT_EQ(r.mask, m);
}

TEST(LossMask, FullRateClearsSelectedChannels) {
  Rng rng(8);
  const FeatureGrid g = new_feature_grid(3, 1, 2, {1, 2, 3, 4, 5, 6});
  ChannelMask m(3);
  m.set(0, true);
  m.set(2, true);
  const auto r = apply_loss_mask(g, m, 1.0, rng);
  EXPECT_EQ(r.mask.count(), 0u);
  EXPECT_EQ(std::vector<double>(r.grid.values().begin(), r.grid.values().end()),
            (std::vector<double>{0, 0, 3, 4, 0, 0}));
}

TEST(LossMask, EffectiveMaskIsSubsetAndRateHolds) {
  Rng rng(9);
  const std::size_t C = 128;
  const FeatureGrid g = FeatureGrid::zeros(C, 1, 1);
  const ChannelMask full = ChannelMask::full(C);
  std::size_t lost = 0;
  const int rounds = 200;
  for (int i = 0; i < rounds; ++i) {
    const auto r = apply_loss_mask(g, full, 0.1, rng);
    ASSERT_TRUE(r.mask.is_subset_of(full));
    lost += C - r.mask.count();
  }
  const double n = static_cast<double>(C) * rounds;
  EXPECT_LE(std::fabs(static_cast<double>(lost) - 0.1 * n), 3 * std::sqrt(n * 0.1 * 0.9));
}

TEST(LossMask, LengthChecked) {
  Rng rng(10);
  EXPECT_THROW(apply_loss_mask(FeatureGrid::zeros(2, 1, 1), ChannelMask(3), 0.1, rng), DimensionError);
}

TEST(Transmit, DropFractionAtTenPercent) {
  Rng rng(11);
  NetworkConfig cfg;
  cfg.loss_rate = 0.1;
  const int n = 100000;
  int dropped = 0;
  for (int i = 0; i < n; ++i) dropped += transmit(1, 0, cfg, rng).dropped() ? 1 : 0;
  EXPECT_LE(std::fabs(dropped / static_cast<double>(n) - 0.1), 3 * std::sqrt(0.1 * 0.9 / n));
}

TEST(Transmit, SameSeedSameTrace) {
  NetworkConfig cfg;
  cfg.loss_rate = 0.4;
  cfg.jitter_ms = 300;
  Rng a(12), b(12);
  for (int i = 0; i < 500; ++i) {
    const auto x = transmit(5, i, cfg, a), y = transmit(5, i, cfg, b);
    ASSERT_EQ(x.delivered_frame, y.delivered_frame);
  }
}

TEST(Bandwidth, ReportedOperatingPoint) {
  EXPECT_NEAR(bandwidth_mbps(0.279), 11.16, 1e-12);
}

TEST(Budget, ComposesToIdentity) {
  for (double f : {0.0, 0.04, 0.1018, 0.2107, 0.5, 1.0}) EXPECT_DOUBLE_EQ(budget_fraction(bandwidth_mbps(f)), f);
}
