#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "coopertrim/feature_grid.hpp"
#include "coopertrim/rng.hpp"

using namespace coopertrim;

TEST(FeatureGrid, SingleElement) {
  const FeatureGrid g = new_feature_grid(1, 1, 1, {0.5});
  EXPECT_EQ(g.size(), 1u);
  EXPECT_EQ(g.at(0, 0, 0), 0.5);
}

TEST(FeatureGrid, IndexLayoutIsChannelRowColumn) {
  std::vector<double> v(8);
  for (int i = 0; i < 8; ++i) v[i] = 10.0 + i;
  const FeatureGrid g = new_feature_grid(2, 2, 2, v);
  EXPECT_EQ(g.at(1, 0, 1), v[5]);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t col = 0; col < 2; ++col) EXPECT_EQ(g.at(c, r, col), v[c * 4 + r * 2 + col]);
}

TEST(FeatureGrid, LengthMismatchNamesBothCounts) {
  try {
    new_feature_grid(1, 2, 2, {1, 2, 3});
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 4, got 3"), std::string::npos) << e.what();
  }
}

TEST(FeatureGrid, RejectsNonFiniteAndZeroDims) {
  EXPECT_THROW(new_feature_grid(1, 1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}), ValidationError);
  EXPECT_THROW(new_feature_grid(1, 1, 1, {std::numeric_limits<double>::infinity()}), ValidationError);
  EXPECT_THROW(new_feature_grid(0, 1, 1, {}), DimensionError);
}

TEST(FeatureGrid, ChannelViewIsThePlane) {
  const FeatureGrid g = new_feature_grid(2, 1, 3, {1, 2, 3, 4, 5, 6});
  const auto c1 = g.channel(1);
  ASSERT_EQ(c1.size(), 3u);
  EXPECT_EQ(c1[0], 4);
  EXPECT_EQ(c1[2], 6);
}

TEST(L1Deviation, IdenticalGridsGiveZero) {
  const FeatureGrid a = new_feature_grid(2, 2, 1, {1, -2, 3, 0.5});
  const NonconformityMap s = l1_deviation(a, a);
  for (double v : s.values()) EXPECT_EQ(v, 0.0);
}

TEST(L1Deviation, OnesAgainstZeros) {
  const FeatureGrid one = new_feature_grid(1, 2, 2, {1, 1, 1, 1});
  const FeatureGrid zero = FeatureGrid::zeros(1, 2, 2);
  const NonconformityMap s = l1_deviation(one, zero);
  for (double v : s.values()) EXPECT_EQ(v, 1.0);
}

TEST(L1Deviation, MatchesNaiveLoop) {
  Rng rng(5);
  const std::size_t C = 3, H = 4, W = 5;
  std::vector<double> a(C * H * W), b(C * H * W);
  for (auto& x : a) x = rng.normal();
  for (auto& x : b) x = rng.normal();
  const FeatureGrid ga(C, H, W, a), gb(C, H, W, b);
  const NonconformityMap s = l1_deviation(ga, gb);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t col = 0; col < W; ++col) {
        const double want = std::fabs(ga.at(c, r, col) - gb.at(c, r, col));
        EXPECT_EQ(s.grid().at(c, r, col), want);
      }
}

TEST(L1Deviation, ShapeMismatchThrows) {
  EXPECT_THROW(l1_deviation(FeatureGrid::zeros(1, 2, 2), FeatureGrid::zeros(2, 2, 2)), DimensionError);
}

TEST(NonconformityMap, RejectsNegativeScores) {
  EXPECT_THROW(NonconformityMap(new_feature_grid(1, 1, 2, {0.5, -0.1})), ValidationError);
}

TEST(LinearMap, IdentityLeavesInputUnchanged) {
  const LinearMap id(2, 2, {1, 0, 0, 1}, {0, 0});
  EXPECT_EQ(apply_linear(id, std::vector<double>{3.5, -1.25}), (std::vector<double>{3.5, -1.25}));
}

TEST(LinearMap, ZeroWeightsReturnBias) {
  const LinearMap m(3, 2, std::vector<double>(6, 0.0), {7, -8});
  EXPECT_EQ(apply_linear(m, std::vector<double>{1, 2, 3}), (std::vector<double>{7, -8}));
}

TEST(LinearMap, HandComputedTwoByTwo) {
  const LinearMap m(2, 2, {1, 2, 3, 4}, {0, 0});
  EXPECT_EQ(apply_linear(m, std::vector<double>{1, 1}), (std::vector<double>{3, 7}));
}

TEST(LinearMap, InputLengthChecked) {
  const LinearMap m = LinearMap::zeros(3, 1);
  EXPECT_THROW(apply_linear(m, std::vector<double>{1, 2}), DimensionError);
  EXPECT_THROW(LinearMap(2, 2, {1, 2, 3}, {0, 0}), DimensionError);
}

TEST(Rng, SubstreamsAreReproducibleAndDistinct) {
  Rng a = Rng(42).substream(1), b = Rng(42).substream(1), c = Rng(42).substream(2);
  const auto x = a.next_u64();
  EXPECT_EQ(x, b.next_u64());
  EXPECT_NE(x, c.next_u64());
}

TEST(Rng, UniformStaysInRange) {
  Rng r(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7u);
  }
}
