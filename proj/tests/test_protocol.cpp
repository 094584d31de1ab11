#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "coopertrim/protocol.hpp"
#include "coopertrim/rng.hpp"

using namespace coopertrim;

namespace {

ChannelMask mask_of(std::size_t n, std::initializer_list<std::size_t> on) {
  ChannelMask m(n);
  for (auto c : on) m.set(c, true);
  return m;
}

DecodeFailure request_failure(const Bytes& b) {
  try {
    decode_request(b);
  } catch (const DecodeError& e) {
    return e.failure();
  }
  ADD_FAILURE() << "decode succeeded";
  return DecodeFailure::kMalformed;
}

FeatureGrid random_grid(Rng& rng, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> v(c * h * w);
  for (auto& x : v) x = rng.normal();
  return FeatureGrid(c, h, w, std::move(v));
}

}  // namespace

TEST(Request, EmptyMaskFraming) {
  const Bytes b = encode_request(1, 2, ChannelMask(8), Pose{});
  ASSERT_EQ(b.size(), 32u);
  EXPECT_EQ(b.size(), request_size(8));
  EXPECT_EQ(b[19], 0x00);
}

TEST(Request, FullMaskByte) {
  const Bytes b = encode_request(1, 2, ChannelMask::full(8), Pose{});
  EXPECT_EQ(b[19], 0xFF);
}

TEST(Request, MaskBitsAreLsbFirst) {
  const Bytes b = encode_request(1, 2, mask_of(128, {0, 9}), Pose{});
  ASSERT_EQ(b.size(), request_size(128));
  EXPECT_EQ(b[19], 0x01);
  EXPECT_EQ(b[20], 0x02);
  for (std::size_t i = 21; i < 19 + 16; ++i) EXPECT_EQ(b[i], 0x00);
}

TEST(Request, HeaderFieldsLittleEndian) {
  const Bytes b = encode_request(0x01020304, 0x1122334455667788ULL, ChannelMask(3), Pose{});
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "CTRQ");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 0x04);
  EXPECT_EQ(b[8], 0x01);
  EXPECT_EQ(b[9], 0x88);
  EXPECT_EQ(b[16], 0x11);
  EXPECT_EQ(b[17], 3);
  EXPECT_EQ(b[18], 0);
}

TEST(Request, MatchesGoldenFixture) {
  std::ifstream in(std::string(COOPERTRIM_FIXTURES) + "/request_basic.hex");
  std::string hex;
  in >> hex;
  Bytes want;
  for (std::size_t i = 0; i + 1 < hex.size(); i += 2) want.push_back(static_cast<std::uint8_t>(std::stoul(hex.substr(i, 2), nullptr, 16)));
  const RequestMessage req{7, 42, mask_of(10, {0, 3, 9}), WirePose::from(Pose::make(1.5, -2.25, 0.5))};
  EXPECT_EQ(encode_request(req), want);
  EXPECT_EQ(decode_request(want), req);
}

TEST(Request, RandomRoundtrips) {
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t channels = rng.below(300);
    ChannelMask m(channels);
    for (std::size_t c = 0; c < channels; ++c) m.set(c, rng.bernoulli(0.3));
    const RequestMessage req{static_cast<std::uint32_t>(rng.next_u64()), rng.next_u64(), m,
                             WirePose::from(Pose::make(rng.uniform(-99, 99), rng.uniform(-99, 99), rng.uniform(-3, 3)))};
    const Bytes b = encode_request(req);
    ASSERT_EQ(b.size(), request_size(channels));
    ASSERT_EQ(decode_request(b), req);
  }
}

TEST(Request, DecodeFailures) {
  const Bytes good = encode_request(7, 42, mask_of(10, {0, 3, 9}), Pose::make(1, 2, 0.5));
  Bytes magic = good;
  magic[0] = 'X';
  EXPECT_EQ(request_failure(magic), DecodeFailure::kBadMagic);
  Bytes version = good;
  version[4] = 9;
  EXPECT_EQ(request_failure(version), DecodeFailure::kUnknownVersion);
  EXPECT_EQ(request_failure(Bytes(good.begin(), good.begin() + 10)), DecodeFailure::kTruncated);
  EXPECT_EQ(request_failure(Bytes(good.begin(), good.end() - 1)), DecodeFailure::kTruncated);
  Bytes spare = good;
  spare[20] |= 0x80;  // bit 15 of a 10-channel mask
  EXPECT_EQ(request_failure(spare), DecodeFailure::kTrailingBits);
  Bytes extra = good;
  extra.push_back(0);
  EXPECT_EQ(request_failure(extra), DecodeFailure::kMalformed);
}

TEST(Quantize, ConstantArrayUsesUnitScale) {
  const std::vector<double> v(6, -3.5);
  for (int bits : {8, 4, 1}) {
    const Quantized q = quantize(v, bits);
    EXPECT_EQ(q.zero, -3.5);
    EXPECT_EQ(q.scale, 1.0);
    for (auto c : q.codes) EXPECT_EQ(c, 0u);
    for (double x : dequantize(q.codes, q.scale, q.zero)) EXPECT_EQ(x, -3.5);
  }
}

TEST(Quantize, OneBitEndpoints) {
  const Quantized q = quantize(std::vector<double>{0.0, 1.0, 1.0, 0.0}, 1);
  EXPECT_EQ(q.codes, (std::vector<std::uint32_t>{0, 1, 1, 0}));
  EXPECT_EQ(dequantize(q.codes, q.scale, q.zero), (std::vector<double>{0, 1, 1, 0}));
}

TEST(Quantize, ErrorWithinHalfStep) {
  Rng rng(22);
  for (int i = 0; i < 3000; ++i) {
    const int bits = std::array<int, 3>{8, 4, 1}[i % 3];
    std::vector<double> v(1 + rng.below(200));
    for (auto& x : v) x = rng.normal(rng.uniform(-5, 5), std::exp(rng.uniform(-4, 4)));
    const Quantized q = quantize(v, bits);
    const auto back = dequantize(q.codes, q.scale, q.zero);
    for (std::size_t k = 0; k < v.size(); ++k) {
      ASSERT_LE(q.codes[k], (1u << bits) - 1);
      ASSERT_LE(std::fabs(back[k] - v[k]), q.scale / 2 * (1 + 1e-12) + 1e-12 * std::fabs(v[k]));
    }
  }
}

TEST(Quantize, RejectsBadInput) {
  EXPECT_THROW(quantize(std::vector<double>{1.0}, 2), ValidationError);
  EXPECT_THROW(quantize(std::vector<double>{}, 8), ValidationError);
  EXPECT_THROW(quantize(std::vector<double>{1.0, std::nan("")}, 8), ValidationError);
}

TEST(LosslessPack, EmptyInputIsEmpty) {
  EXPECT_TRUE(lossless_pack(std::vector<std::uint32_t>{}, 4).empty());
  EXPECT_TRUE(lossless_unpack(Bytes{}, 0, 4).empty());
}

TEST(LosslessPack, LongZeroRunCompresses) {
  const std::vector<std::uint32_t> zeros(1024, 0);
  EXPECT_LE(lossless_pack(zeros, 1).size(), 8u);
  for (int bits : {1, 4, 8}) {
    // Runs cap at 255 bytes and cost three; a tail under four escapes bytewise.
    const std::size_t packed = 1024 * static_cast<std::size_t>(bits) / 8;
    const std::size_t rem = packed % 255;
    const Bytes b = lossless_pack(zeros, bits);
    EXPECT_LE(b.size(), 2 + 3 * (packed / 255) + (rem >= 4 ? 3 : 2 * rem)) << bits;
    EXPECT_EQ(lossless_unpack(b, zeros.size(), bits), zeros);
  }
}

TEST(LosslessPack, NeverExceedsPackedSizePlusHeader) {
  Rng rng(23);
  for (int i = 0; i < 2000; ++i) {
    const int bits = std::array<int, 4>{32, 8, 4, 1}[i % 4];
    std::vector<std::uint32_t> codes(1 + rng.below(300));
    const bool runs = rng.bernoulli(0.5);
    for (auto& c : codes) {
      c = runs ? static_cast<std::uint32_t>(rng.below(2))
               : static_cast<std::uint32_t>(bits == 32 ? rng.next_u64() : rng.below(1ULL << bits));
    }
    const Bytes b = lossless_pack(codes, bits);
    ASSERT_LE(b.size(), (codes.size() * static_cast<std::size_t>(bits) + 7) / 8 + 2);
    ASSERT_EQ(lossless_unpack(b, codes.size(), bits), codes);
    ASSERT_EQ(lossless_unpack(lossless_pack(codes, bits, false), codes.size(), bits), codes);
  }
}

TEST(LosslessPack, RunLengthEscapesZeroBytes) {
  const std::vector<std::uint32_t> codes{0, 7, 0, 0, 0, 0, 0, 0, 9};
  const Bytes b = lossless_pack(codes, 8);
  EXPECT_EQ(lossless_unpack(b, codes.size(), 8), codes);
}

TEST(LosslessPack, CorruptHeaderRejected) {
  Bytes b = lossless_pack(std::vector<std::uint32_t>{1, 2, 3}, 8);
  b[1] = 4;
  EXPECT_THROW(lossless_unpack(b, 3, 8), DecodeError);
  b[1] = 8;
  b[0] = 7;
  EXPECT_THROW(lossless_unpack(b, 3, 8), DecodeError);
}

TEST(Response, RawPayloadIsExactFloat32) {
  Rng rng(24);
  const FeatureGrid f = random_grid(rng, 5, 3, 2);
  const auto mask = mask_of(5, {1, 4});
  const auto resp = make_response(2, 3, mask, f, Pose::make(1, 2, 0.1), CompressionConfig::from_label("1x"));
  const FeatureGrid back = response_features(decode_response(encode_response(resp)));
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t i = 0; i < 6; ++i) {
      const double want = mask[c] ? static_cast<double>(static_cast<float>(f.channel(c)[i])) : 0.0;
      EXPECT_EQ(back.channel(c)[i], want);
    }
}

TEST(Response, EmptyMaskHasEmptyPayload) {
  const auto resp = make_response(1, 1, ChannelMask(4), FeatureGrid::zeros(4, 2, 2), Pose{},
                                  CompressionConfig::from_label("8x"));
  EXPECT_TRUE(resp.payload.empty());
  const FeatureGrid back = response_features(decode_response(encode_response(resp)));
  EXPECT_EQ(back, FeatureGrid::zeros(4, 2, 2));
}

TEST(Response, QuantizedRoundtripWithinStep) {
  Rng rng(25);
  for (const char* label : {"8x", "32x"}) {
    const FeatureGrid f = random_grid(rng, 6, 4, 4);
    const auto resp = make_response(1, 1, ChannelMask::full(6), f, Pose{}, CompressionConfig::from_label(label));
    const FeatureGrid back = response_features(decode_response(encode_response(resp)));
    const double step = static_cast<double>(resp.quant_scale);
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_LE(std::fabs(back.values()[i] - f.values()[i]), step / 2 + 1e-5) << label;
    }
  }
}

TEST(Compression, LabelsAndBits) {
  EXPECT_EQ(CompressionConfig::from_label("1x").quant_bits(), 32);
  EXPECT_EQ(CompressionConfig::from_label("8x").quant_bits(), 4);
  EXPECT_EQ(CompressionConfig::from_label("32x").quant_bits(), 1);
  EXPECT_EQ(CompressionConfig::from_bits(4).label(), "8x");
  EXPECT_THROW(CompressionConfig::from_label("16x"), ValidationError);
}

TEST(SpatialTransform, IdentityKeepsGrid) {
  Rng rng(26);
  const FeatureGrid f = random_grid(rng, 3, 5, 4);
  const WarpResult w = spatial_transform(f, Pose{}, 0.5);
  EXPECT_EQ(w.grid, f);
  for (auto v : w.valid) EXPECT_EQ(v, 1);
}

TEST(SpatialTransform, TwoCellShift) {
  std::vector<double> v(5);
  for (int i = 0; i < 5; ++i) v[i] = 1.0 + i;
  const WarpResult w = spatial_transform(FeatureGrid(1, 1, 5, v), Pose::make(1.0, 0.0, 0.0), 0.5);
  EXPECT_EQ(w.valid, (std::vector<std::uint8_t>{0, 0, 1, 1, 1}));
  EXPECT_EQ(std::vector<double>(w.grid.values().begin(), w.grid.values().end()),
            (std::vector<double>{0, 0, 1, 2, 3}));
}

TEST(SpatialTransform, QuarterTurn) {
  std::vector<double> v(9);
  for (int i = 0; i < 9; ++i) v[i] = i;
  const FeatureGrid src(1, 3, 3, v);
  const WarpResult w = spatial_transform(src, Pose::make(0, 0, std::numbers::pi / 2), 1.0);
  // Target (r, c) pulls source row 2 - c, column r.
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(w.grid.at(0, r, c), src.at(0, 2 - c, r), 1e-12);
  for (auto x : w.valid) EXPECT_EQ(x, 1);
}

TEST(SpatialTransform, HalfCellBilinear) {
  const WarpResult w = spatial_transform(new_feature_grid(1, 1, 3, {0, 2, 4}), Pose::make(0.5, 0, 0), 1.0);
  EXPECT_EQ(w.valid, (std::vector<std::uint8_t>{0, 1, 1}));
  EXPECT_DOUBLE_EQ(w.grid.at(0, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(w.grid.at(0, 0, 2), 3.0);
}

TEST(Fuse, NoContributionsReturnsEgo) {
  const FeatureGrid ego = new_feature_grid(2, 1, 2, {1, 2, 3, 4});
  EXPECT_EQ(fuse(ego, std::vector<Contribution>{}), ego);
}

TEST(Fuse, RulesPerCell) {
  const FeatureGrid ego = new_feature_grid(2, 1, 2, {1, 2, 3, 4});
  const std::vector<Contribution> in{
      {new_feature_grid(2, 1, 2, {5, 6, 7, 8}), {1, 0}, mask_of(2, {0})},
      {new_feature_grid(2, 1, 2, {9, 0, 0, 0}), {1, 1}, mask_of(2, {0})},
  };
  const auto avg = fuse(ego, in, BlendRule::kAverage);
  EXPECT_DOUBLE_EQ(avg.at(0, 0, 0), (1.0 + 5 + 9) / 3);
  EXPECT_DOUBLE_EQ(avg.at(0, 0, 1), (2.0 + 0) / 2);
  EXPECT_EQ(avg.at(1, 0, 0), 3.0);
  EXPECT_EQ(avg.at(1, 0, 1), 4.0);
  const auto over = fuse(ego, in, BlendRule::kOverwrite);
  EXPECT_DOUBLE_EQ(over.at(0, 0, 0), 7.0);
  EXPECT_DOUBLE_EQ(over.at(0, 0, 1), 0.0);
  const auto mx = fuse(ego, in, BlendRule::kMax);
  EXPECT_EQ(mx.at(0, 0, 0), 9.0);
  EXPECT_EQ(mx.at(0, 0, 1), 2.0);
}

TEST(Fuse, ShapeChecks) {
  const FeatureGrid ego = FeatureGrid::zeros(2, 1, 2);
  EXPECT_THROW(fuse(ego, std::vector<Contribution>{{FeatureGrid::zeros(1, 1, 2), {1, 1}, ChannelMask(2)}}),
               DimensionError);
  EXPECT_THROW(fuse(ego, std::vector<Contribution>{{FeatureGrid::zeros(2, 1, 2), {1}, ChannelMask(2)}}),
               DimensionError);
}

TEST(Pose, RelativeAndInverse) {
  const Pose a = Pose::make(3, 1, 0.4), b = Pose::make(-2, 5, -1.1);
  const Pose r = relative_pose(a, b);
  const Pose back = relative_pose(b, a);
  const Pose inv = inverse_pose(r);
  EXPECT_NEAR(inv.x, back.x, 1e-12);
  EXPECT_NEAR(inv.y, back.y, 1e-12);
  EXPECT_NEAR(inv.yaw, back.yaw, 1e-12);
  EXPECT_NEAR(Pose::make(0, 0, 3 * std::numbers::pi).yaw, std::numbers::pi, 1e-12);
}
