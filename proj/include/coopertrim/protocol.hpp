#pragma once

// Request/response wire format, payload quantization and packing, rigid BEV
// warping, and masked fusion.
//
// All multi-byte integers and floats are little-endian. Mask bit i of byte j
// is channel 8j+i (LSB first); unused high bits of the last mask byte are 0.
//
// Request (19 + ceil(C/8) + 12 bytes):
//   "CTRQ" | version u8 | agent_id u32 | frame_id u64 | channel_count u16
//   | mask | pose.x f32 | pose.y f32 | pose.yaw f32
//
// Response:
//   "CTRS" | version u8 | agent_id u32 | frame_id u64 | channel_count u16
//   | height u16 | width u16 | mask | pose (3 x f32) | quant_bits u8
//   | quant_scale f32 | quant_zero f32 | payload_len u32 | payload
//
// The payload holds the selected channels only, channel-ascending and
// row-major within a channel. Values are quantized to quant_bits (32 means
// raw IEEE-754 binary32 bit patterns), bit-packed LSB-first, and wrapped by
// lossless_pack (2-byte header + raw or run-length body).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "coopertrim/error.hpp"
#include "coopertrim/feature_grid.hpp"
#include "coopertrim/relevance.hpp"

namespace coopertrim {

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::array<char, 4> kRequestMagic{'C', 'T', 'R', 'Q'};
inline constexpr std::array<char, 4> kResponseMagic{'C', 'T', 'R', 'S'};

using Bytes = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Poses

inline double normalize_yaw(double yaw) {
  double y = std::remainder(yaw, 2.0 * std::numbers::pi);  // [-pi, pi]
  if (y <= -std::numbers::pi) y += 2.0 * std::numbers::pi;
  return y;
}

struct Pose {
  double x = 0.0;    // meters
  double y = 0.0;    // meters
  double yaw = 0.0;  // radians, (-pi, pi]

  static Pose make(double x, double y, double yaw) {
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(yaw)) {
      throw ValidationError("Pose: components must be finite");
    }
    return Pose{x, y, normalize_yaw(yaw)};
  }

  friend bool operator==(const Pose&, const Pose&) = default;
};

// Transform taking coordinates in `source`'s frame to `target`'s frame,
// both poses given in a common world frame.
inline Pose relative_pose(const Pose& source, const Pose& target) {
  const double dx = source.x - target.x;
  const double dy = source.y - target.y;
  const double c = std::cos(target.yaw);
  const double s = std::sin(target.yaw);
  return Pose::make(c * dx + s * dy, -s * dx + c * dy, source.yaw - target.yaw);
}

// Inverse of a rigid transform p' = R(yaw) p + t.
inline Pose inverse_pose(const Pose& p) {
  const double c = std::cos(p.yaw);
  const double s = std::sin(p.yaw);
  return Pose::make(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.yaw);
}

// Pose as carried on the wire.
struct WirePose {
  float x = 0.0F;
  float y = 0.0F;
  float yaw = 0.0F;

  static WirePose from(const Pose& p) {
    return {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.yaw)};
  }
  Pose to_pose() const { return Pose::make(x, y, yaw); }

  friend bool operator==(const WirePose& a, const WirePose& b) {
    return std::bit_cast<std::uint32_t>(a.x) == std::bit_cast<std::uint32_t>(b.x) &&
           std::bit_cast<std::uint32_t>(a.y) == std::bit_cast<std::uint32_t>(b.y) &&
           std::bit_cast<std::uint32_t>(a.yaw) == std::bit_cast<std::uint32_t>(b.yaw);
  }
};

// ---------------------------------------------------------------------------
// Byte-level helpers

namespace wire {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void magic(const std::array<char, 4>& m) {
    for (char ch : m) u8(static_cast<std::uint8_t>(ch));
  }
  Bytes take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

  void expect_magic(const std::array<char, 4>& m) {
    const auto got = bytes(4);
    for (std::size_t i = 0; i < 4; ++i) {
      if (got[i] != static_cast<std::uint8_t>(m[i])) {
        throw DecodeError(DecodeFailure::kBadMagic,
                          "expected \"" + std::string(m.begin(), m.end()) + "\"");
      }
    }
  }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw DecodeError(DecodeFailure::kTruncated, "need " + std::to_string(n) + " bytes at offset " +
                                                       std::to_string(pos_) + ", have " +
                                                       std::to_string(in_.size() - pos_));
    }
  }
  std::uint64_t le(std::size_t n) {
    need(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::size_t mask_byte_count(std::size_t channels) { return (channels + 7) / 8; }

inline Bytes pack_mask(const ChannelMask& mask) {
  Bytes out(mask_byte_count(mask.size()), 0);
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (mask[c]) out[c / 8] |= static_cast<std::uint8_t>(1U << (c % 8));
  }
  return out;
}

inline ChannelMask unpack_mask(std::span<const std::uint8_t> bytes, std::size_t channels) {
  ChannelMask mask(channels);
  for (std::size_t c = 0; c < channels; ++c) mask.set(c, ((bytes[c / 8] >> (c % 8)) & 1U) != 0);
  if (channels % 8 != 0) {
    const auto spare = static_cast<std::uint8_t>(0xFFU << (channels % 8));
    if ((bytes.back() & spare) != 0) {
      throw DecodeError(DecodeFailure::kTrailingBits, "mask bits set beyond channel " + std::to_string(channels));
    }
  }
  return mask;
}

inline void check_channel_count(std::size_t channels) {
  if (channels > 0xFFFF) {
    throw ValidationError("channel count " + std::to_string(channels) + " exceeds 65535");
  }
}

inline void check_version(std::uint8_t version) {
  if (version != kWireVersion) {
    throw DecodeError(DecodeFailure::kUnknownVersion, "version " + std::to_string(version));
  }
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Request

struct RequestMessage {
  std::uint32_t agent_id = 0;
  std::uint64_t frame_id = 0;
  ChannelMask mask;
  WirePose pose;

  friend bool operator==(const RequestMessage&, const RequestMessage&) = default;
};

inline std::size_t request_size(std::size_t channels) { return 19 + wire::mask_byte_count(channels) + 12; }

inline Bytes encode_request(std::uint32_t agent_id, std::uint64_t frame_id, const ChannelMask& mask,
                            const WirePose& pose) {
  wire::check_channel_count(mask.size());
  wire::Writer w;
  w.magic(kRequestMagic);
  w.u8(kWireVersion);
  w.u32(agent_id);
  w.u64(frame_id);
  w.u16(static_cast<std::uint16_t>(mask.size()));
  w.bytes(wire::pack_mask(mask));
  w.f32(pose.x);
  w.f32(pose.y);
  w.f32(pose.yaw);
  return w.take();
}

inline Bytes encode_request(std::uint32_t agent_id, std::uint64_t frame_id, const ChannelMask& mask,
                            const Pose& pose) {
  return encode_request(agent_id, frame_id, mask, WirePose::from(pose));
}

inline Bytes encode_request(const RequestMessage& m) {
  return encode_request(m.agent_id, m.frame_id, m.mask, m.pose);
}

inline RequestMessage decode_request(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic(kRequestMagic);
  wire::check_version(r.u8());
  RequestMessage m;
  m.agent_id = r.u32();
  m.frame_id = r.u64();
  const std::size_t channels = r.u16();
  m.mask = wire::unpack_mask(r.bytes(wire::mask_byte_count(channels)), channels);
  m.pose.x = r.f32();
  m.pose.y = r.f32();
  m.pose.yaw = r.f32();
  if (r.remaining() != 0) {
    throw DecodeError(DecodeFailure::kMalformed, std::to_string(r.remaining()) + " unexpected trailing bytes");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Quantization

struct Quantized {
  std::vector<std::uint32_t> codes;
  double scale = 1.0;
  double zero = 0.0;
};

inline void check_quant_bits(int bits) {
  if (bits != 8 && bits != 4 && bits != 1) {
    throw ValidationError("quantize: bits must be one of {8, 4, 1}, got " + std::to_string(bits));
  }
}

inline std::uint32_t max_code(int bits) { return (std::uint32_t{1} << bits) - 1; }

// Codes for given affine parameters; code = round((v - zero) / scale) clamped.
inline std::vector<std::uint32_t> quantize_with(std::span<const double> values, int bits, double zero, double scale) {
  const double top = static_cast<double>(max_code(bits));
  std::vector<std::uint32_t> codes(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double c = std::clamp(std::round((values[i] - zero) / scale), 0.0, top);
    codes[i] = static_cast<std::uint32_t>(c);
  }
  return codes;
}

inline Quantized quantize(std::span<const double> values, int bits) {
  check_quant_bits(bits);
  if (values.empty()) throw ValidationError("quantize: empty input");
  detail::require_finite(values, "quantize");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  Quantized q;
  q.zero = *lo;
  q.scale = *hi == *lo ? 1.0 : (*hi - *lo) / static_cast<double>(max_code(bits));
  q.codes = quantize_with(values, bits, q.zero, q.scale);
  return q;
}

inline std::vector<double> dequantize(std::span<const std::uint32_t> codes, double scale, double zero) {
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = zero + static_cast<double>(codes[i]) * scale;
  return out;
}

// ---------------------------------------------------------------------------
// Lossless packing: dense bit fields, then byte-level run-length encoding.
//
// Output = method u8 | bits u8 | body; no codes give an empty output. Method 0 stores the bit-packed bytes
// verbatim; method 1 stores them run-length encoded. The encoder keeps the
// smaller of the two, so output never exceeds packed size + 2.
//
// Run-length body: any byte other than 0x00 is a literal. 0x00 escapes:
//   00 00      -> one literal 0x00
//   00 n b     -> n copies of b, 4 <= n <= 255

namespace lossless {

inline constexpr std::uint8_t kRaw = 0;
inline constexpr std::uint8_t kRunLength = 1;

inline std::size_t packed_size(std::size_t n, int bits) {
  return (n * static_cast<std::size_t>(bits) + 7) / 8;
}

inline Bytes bit_pack(std::span<const std::uint32_t> codes, int bits) {
  Bytes out(packed_size(codes.size(), bits), 0);
  std::size_t bit = 0;
  for (std::uint32_t code : codes) {
    if (bits < 32 && (code >> bits) != 0) {
      throw ValidationError("lossless_pack: code " + std::to_string(code) + " does not fit in " +
                            std::to_string(bits) + " bits");
    }
    for (int b = 0; b < bits; ++b, ++bit) {
      if ((code >> b) & 1U) out[bit / 8] |= static_cast<std::uint8_t>(1U << (bit % 8));
    }
  }
  return out;
}

inline std::vector<std::uint32_t> bit_unpack(std::span<const std::uint8_t> packed, std::size_t n, int bits) {
  if (packed.size() != packed_size(n, bits)) {
    throw DecodeError(DecodeFailure::kMalformed, "packed length " + std::to_string(packed.size()) +
                                                     " does not hold " + std::to_string(n) + " codes");
  }
  std::vector<std::uint32_t> codes(n, 0);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t code = 0;
    for (int b = 0; b < bits; ++b, ++bit) {
      if ((packed[bit / 8] >> (bit % 8)) & 1U) code |= std::uint32_t{1} << b;
    }
    codes[i] = code;
  }
  const std::size_t used = n * static_cast<std::size_t>(bits);
  if (used % 8 != 0 && (packed.back() >> (used % 8)) != 0) {
    throw DecodeError(DecodeFailure::kMalformed, "nonzero padding bits in packed payload");
  }
  return codes;
}

inline Bytes rle_encode(std::span<const std::uint8_t> in) {
  Bytes out;
  out.reserve(in.size());
  std::size_t i = 0;
  while (i < in.size()) {
    const std::uint8_t b = in[i];
    std::size_t run = 1;
    while (i + run < in.size() && in[i + run] == b) ++run;
    i += run;
    while (run >= 4) {
      const std::size_t chunk = std::min<std::size_t>(run, 255);
      out.push_back(0x00);
      out.push_back(static_cast<std::uint8_t>(chunk));
      out.push_back(b);
      run -= chunk;
    }
    for (; run > 0; --run) {
      if (b == 0x00) {
        out.push_back(0x00);
        out.push_back(0x00);
      } else {
        out.push_back(b);
      }
    }
  }
  return out;
}

inline Bytes rle_decode(std::span<const std::uint8_t> in) {
  Bytes out;
  std::size_t i = 0;
  while (i < in.size()) {
    const std::uint8_t b = in[i++];
    if (b != 0x00) {
      out.push_back(b);
      continue;
    }
    if (i >= in.size()) throw DecodeError(DecodeFailure::kMalformed, "dangling run-length escape");
    const std::uint8_t n = in[i++];
    if (n == 0) {
      out.push_back(0x00);
      continue;
    }
    if (n < 4) throw DecodeError(DecodeFailure::kMalformed, "run shorter than 4");
    if (i >= in.size()) throw DecodeError(DecodeFailure::kMalformed, "run without value byte");
    out.insert(out.end(), n, in[i++]);
  }
  return out;
}

}  // namespace lossless

inline void check_pack_bits(int bits) {
  if (bits != 32 && bits != 8 && bits != 4 && bits != 1) {
    throw ValidationError("lossless_pack: bits must be one of {32, 8, 4, 1}, got " + std::to_string(bits));
  }
}

inline Bytes lossless_pack(std::span<const std::uint32_t> codes, int bits, bool run_length = true) {
  check_pack_bits(bits);
  if (codes.empty()) return {};
  Bytes packed = lossless::bit_pack(codes, bits);
  Bytes out{lossless::kRaw, static_cast<std::uint8_t>(bits)};
  if (run_length) {
    Bytes rle = lossless::rle_encode(packed);
    if (rle.size() < packed.size()) {
      out[0] = lossless::kRunLength;
      out.insert(out.end(), rle.begin(), rle.end());
      return out;
    }
  }
  out.insert(out.end(), packed.begin(), packed.end());
  return out;
}

inline std::vector<std::uint32_t> lossless_unpack(std::span<const std::uint8_t> bytes, std::size_t n, int bits) {
  check_pack_bits(bits);
  if (n == 0 && bytes.empty()) return {};
  if (bytes.size() < 2) throw DecodeError(DecodeFailure::kMalformed, "missing packing header");
  if (bytes[1] != bits) {
    throw DecodeError(DecodeFailure::kMalformed,
                      "header declares " + std::to_string(bytes[1]) + " bits, expected " + std::to_string(bits));
  }
  const auto body = bytes.subspan(2);
  switch (bytes[0]) {
    case lossless::kRaw:
      return lossless::bit_unpack(body, n, bits);
    case lossless::kRunLength: {
      const Bytes packed = lossless::rle_decode(body);
      return lossless::bit_unpack(packed, n, bits);
    }
    default:
      throw DecodeError(DecodeFailure::kMalformed, "unknown packing method " + std::to_string(bytes[0]));
  }
}

// ---------------------------------------------------------------------------
// Compression settings

enum class CompressionRate { k1x, k8x, k32x };

struct CompressionConfig {
  CompressionRate rate = CompressionRate::k1x;
  bool lossless = true;

  int quant_bits() const noexcept {
    switch (rate) {
      case CompressionRate::k1x: return 32;
      case CompressionRate::k8x: return 4;
      case CompressionRate::k32x: return 1;
    }
    return 32;
  }
  std::string label() const {
    switch (rate) {
      case CompressionRate::k1x: return "1x";
      case CompressionRate::k8x: return "8x";
      case CompressionRate::k32x: return "32x";
    }
    return "?";
  }

  static CompressionConfig from_label(std::string_view label, bool lossless = true) {
    if (label == "1x") return {CompressionRate::k1x, lossless};
    if (label == "8x") return {CompressionRate::k8x, lossless};
    if (label == "32x") return {CompressionRate::k32x, lossless};
    throw ValidationError("unknown compression rate \"" + std::string(label) + "\"");
  }
  static CompressionConfig from_bits(int bits, bool lossless = true) {
    switch (bits) {
      case 32: return {CompressionRate::k1x, lossless};
      case 4: return {CompressionRate::k8x, lossless};
      case 1: return {CompressionRate::k32x, lossless};
      default: throw ValidationError("no compression rate uses " + std::to_string(bits) + "-bit codes");
    }
  }
};

// ---------------------------------------------------------------------------
// Response

struct ResponseMessage {
  std::uint32_t agent_id = 0;
  std::uint64_t frame_id = 0;
  ChannelMask mask;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  WirePose pose;
  std::uint8_t quant_bits = 32;
  float quant_scale = 1.0F;
  float quant_zero = 0.0F;
  Bytes payload;

  std::size_t value_count() const noexcept {
    return mask.count() * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }

  friend bool operator==(const ResponseMessage& a, const ResponseMessage& b) {
    return a.agent_id == b.agent_id && a.frame_id == b.frame_id && a.mask == b.mask && a.height == b.height &&
           a.width == b.width && a.pose == b.pose && a.quant_bits == b.quant_bits &&
           std::bit_cast<std::uint32_t>(a.quant_scale) == std::bit_cast<std::uint32_t>(b.quant_scale) &&
           std::bit_cast<std::uint32_t>(a.quant_zero) == std::bit_cast<std::uint32_t>(b.quant_zero) &&
           a.payload == b.payload;
  }
};

inline Bytes encode_response(const ResponseMessage& m) {
  wire::check_channel_count(m.mask.size());
  wire::Writer w;
  w.magic(kResponseMagic);
  w.u8(kWireVersion);
  w.u32(m.agent_id);
  w.u64(m.frame_id);
  w.u16(static_cast<std::uint16_t>(m.mask.size()));
  w.u16(m.height);
  w.u16(m.width);
  w.bytes(wire::pack_mask(m.mask));
  w.f32(m.pose.x);
  w.f32(m.pose.y);
  w.f32(m.pose.yaw);
  w.u8(m.quant_bits);
  w.f32(m.quant_scale);
  w.f32(m.quant_zero);
  w.u32(static_cast<std::uint32_t>(m.payload.size()));
  w.bytes(m.payload);
  return w.take();
}

inline ResponseMessage decode_response(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic(kResponseMagic);
  wire::check_version(r.u8());
  ResponseMessage m;
  m.agent_id = r.u32();
  m.frame_id = r.u64();
  const std::size_t channels = r.u16();
  m.height = r.u16();
  m.width = r.u16();
  m.mask = wire::unpack_mask(r.bytes(wire::mask_byte_count(channels)), channels);
  m.pose.x = r.f32();
  m.pose.y = r.f32();
  m.pose.yaw = r.f32();
  m.quant_bits = r.u8();
  if (m.quant_bits != 32 && m.quant_bits != 8 && m.quant_bits != 4 && m.quant_bits != 1) {
    throw DecodeError(DecodeFailure::kMalformed, "quant_bits " + std::to_string(m.quant_bits));
  }
  m.quant_scale = r.f32();
  m.quant_zero = r.f32();
  const std::size_t len = r.u32();
  const auto payload = r.bytes(len);
  m.payload.assign(payload.begin(), payload.end());
  if (r.remaining() != 0) {
    throw DecodeError(DecodeFailure::kMalformed, std::to_string(r.remaining()) + " unexpected trailing bytes");
  }
  return m;
}

// Builds a response carrying `features` restricted to `mask`.
inline ResponseMessage make_response(std::uint32_t agent_id, std::uint64_t frame_id, const ChannelMask& mask,
                                     const FeatureGrid& features, const Pose& pose,
                                     const CompressionConfig& compression) {
  if (mask.size() != features.channels()) {
    throw DimensionError("make_response: mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(features.channels()) + " channels");
  }
  if (features.height() > 0xFFFF || features.width() > 0xFFFF) {
    throw ValidationError("make_response: grid too large for the wire format");
  }
  ResponseMessage m;
  m.agent_id = agent_id;
  m.frame_id = frame_id;
  m.mask = mask;
  m.height = static_cast<std::uint16_t>(features.height());
  m.width = static_cast<std::uint16_t>(features.width());
  m.pose = WirePose::from(pose);
  const int bits = compression.quant_bits();
  m.quant_bits = static_cast<std::uint8_t>(bits);

  std::vector<double> selected;
  selected.reserve(m.value_count());
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (!mask[c]) continue;
    const auto plane = features.channel(c);
    selected.insert(selected.end(), plane.begin(), plane.end());
  }

  std::vector<std::uint32_t> codes;
  if (bits == 32) {
    codes.resize(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) {
      codes[i] = std::bit_cast<std::uint32_t>(static_cast<float>(selected[i]));
    }
  } else if (!selected.empty()) {
    // Quantize against the f32 parameters the receiver will see.
    const Quantized q = quantize(selected, bits);
    m.quant_zero = static_cast<float>(q.zero);
    m.quant_scale = static_cast<float>(q.scale);
    codes = quantize_with(selected, bits, m.quant_zero, m.quant_scale);
  }
  m.payload = lossless_pack(codes, bits, compression.lossless);
  return m;
}

// Full C x H x W grid from a response; unselected channels are zero.
inline FeatureGrid response_features(const ResponseMessage& m) {
  const std::size_t n = m.value_count();
  const auto codes = lossless_unpack(m.payload, n, m.quant_bits);
  const std::size_t plane = static_cast<std::size_t>(m.height) * m.width;
  std::vector<double> values(m.mask.size() * plane, 0.0);
  std::size_t k = 0;
  for (std::size_t c = 0; c < m.mask.size(); ++c) {
    if (!m.mask[c]) continue;
    for (std::size_t i = 0; i < plane; ++i, ++k) {
      values[c * plane + i] = m.quant_bits == 32
                                  ? static_cast<double>(std::bit_cast<float>(codes[k]))
                                  : static_cast<double>(m.quant_zero) +
                                        static_cast<double>(codes[k]) * static_cast<double>(m.quant_scale);
    }
  }
  return FeatureGrid(m.mask.size(), m.height, m.width, std::move(values));
}

// ---------------------------------------------------------------------------
// Spatial transform
//
// Grid coordinates put the origin at the grid center, x along columns and y
// along rows, in cells. `relative` maps source coordinates to target
// coordinates: p_t = R(yaw) p_s + (x, y) / cell_size. Each target cell center
// is pulled back with p_s = R(-yaw) (p_t - (x, y) / cell_size) and sampled
// bilinearly.

struct WarpResult {
  FeatureGrid grid;
  std::vector<std::uint8_t> valid;  // H*W, 1 where the sample fell inside the source
};

struct SamplePoint {
  bool inside = false;
  std::size_t c0 = 0, r0 = 0;
  double fx = 0.0, fy = 0.0;  // weights toward c0 + 1, r0 + 1
};

namespace detail {

inline bool snap_axis(double pos, std::size_t extent, std::size_t& base, double& frac) {
  constexpr double kSlack = 1e-9;
  const double top = static_cast<double>(extent - 1);
  if (pos < -kSlack || pos > top + kSlack) return false;
  pos = std::clamp(pos, 0.0, top);
  if (extent == 1) {
    base = 0;
    frac = 0.0;
    return true;
  }
  const double fl = std::floor(pos);
  base = std::min(static_cast<std::size_t>(fl), extent - 2);
  frac = pos - static_cast<double>(base);
  if (std::abs(frac) < kSlack) frac = 0.0;
  if (std::abs(frac - 1.0) < kSlack) frac = 1.0;
  return true;
}

}  // namespace detail

inline std::vector<SamplePoint> warp_samples(std::size_t height, std::size_t width, const Pose& relative,
                                             double cell_size) {
  if (!(cell_size > 0.0)) throw ValidationError("spatial_transform: cell_size must be positive");
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double tx = relative.x / cell_size;
  const double ty = relative.y / cell_size;
  const double c = std::cos(relative.yaw);
  const double s = std::sin(relative.yaw);
  std::vector<SamplePoint> samples(height * width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t col = 0; col < width; ++col) {
      const double px = static_cast<double>(col) - cx - tx;
      const double py = static_cast<double>(r) - cy - ty;
      // R(-yaw) applied to (px, py)
      const double sx = c * px + s * py + cx;
      const double sy = -s * px + c * py + cy;
      SamplePoint& sp = samples[r * width + col];
      sp.inside = detail::snap_axis(sx, width, sp.c0, sp.fx) && detail::snap_axis(sy, height, sp.r0, sp.fy);
    }
  }
  return samples;
}

inline std::vector<std::uint8_t> transform_validity(std::size_t height, std::size_t width, const Pose& relative,
                                                    double cell_size) {
  const auto samples = warp_samples(height, width, relative, cell_size);
  std::vector<std::uint8_t> valid(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) valid[i] = samples[i].inside ? 1 : 0;
  return valid;
}

inline WarpResult spatial_transform(const FeatureGrid& src, const Pose& relative, double cell_size) {
  const std::size_t h = src.height();
  const std::size_t w = src.width();
  const auto samples = warp_samples(h, w, relative, cell_size);
  std::vector<double> out(src.size(), 0.0);
  std::vector<std::uint8_t> valid(h * w, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) valid[i] = samples[i].inside ? 1 : 0;

  for (std::size_t ch = 0; ch < src.channels(); ++ch) {
    const auto plane = src.channel(ch);
    double* dst = out.data() + ch * h * w;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const SamplePoint& sp = samples[i];
      if (!sp.inside) continue;
      const std::size_t c1 = std::min(sp.c0 + 1, w - 1);
      const std::size_t r1 = std::min(sp.r0 + 1, h - 1);
      const double v00 = plane[sp.r0 * w + sp.c0];
      const double v01 = plane[sp.r0 * w + c1];
      const double v10 = plane[r1 * w + sp.c0];
      const double v11 = plane[r1 * w + c1];
      double v = 0.0;
      // Skip zero-weight taps so exact-grid samples reproduce source values bit-for-bit.
      const double w00 = (1.0 - sp.fx) * (1.0 - sp.fy);
      const double w01 = sp.fx * (1.0 - sp.fy);
      const double w10 = (1.0 - sp.fx) * sp.fy;
      const double w11 = sp.fx * sp.fy;
      if (w00 != 0.0) v += w00 * v00;
      if (w01 != 0.0) v += w01 * v01;
      if (w10 != 0.0) v += w10 * v10;
      if (w11 != 0.0) v += w11 * v11;
      dst[i] = v;
    }
  }
  return {FeatureGrid(src.channels(), h, w, std::move(out)), std::move(valid)};
}

// ---------------------------------------------------------------------------
// Fusion

enum class BlendRule { kAverage, kOverwrite, kMax };

struct Contribution {
  FeatureGrid grid;
  std::vector<std::uint8_t> valid;  // H*W
  ChannelMask mask;
};

// Per channel and cell, responders whose mask includes the channel and whose
// cell is valid contribute. kAverage: uniform mean over ego and contributors.
// kOverwrite: mean over contributors only. kMax: maximum over all. Cells
// without contributors keep the ego value.
inline FeatureGrid fuse(const FeatureGrid& ego, std::span<const Contribution> received,
                        BlendRule rule = BlendRule::kAverage) {
  const std::size_t plane = ego.plane_size();
  for (const auto& c : received) {
    require_same_shape(ego, c.grid, "fuse");
    if (c.valid.size() != plane) throw DimensionError("fuse: validity map size mismatch");
    if (c.mask.size() != ego.channels()) throw DimensionError("fuse: mask length mismatch");
  }
  std::vector<double> out(ego.values().begin(), ego.values().end());
  if (received.empty()) return FeatureGrid(ego.channels(), ego.height(), ego.width(), std::move(out));

  for (std::size_t ch = 0; ch < ego.channels(); ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t idx = ch * plane + i;
      double sum = 0.0;
      double peak = out[idx];
      int n = 0;
      for (const auto& c : received) {
        if (!c.mask[ch] || c.valid[i] == 0) continue;
        const double v = c.grid.values()[idx];
        sum += v;
        peak = std::max(peak, v);
        ++n;
      }
      if (n == 0) continue;
      switch (rule) {
        case BlendRule::kAverage: out[idx] = (out[idx] + sum) / static_cast<double>(n + 1); break;
        case BlendRule::kOverwrite: out[idx] = sum / static_cast<double>(n); break;
        case BlendRule::kMax: out[idx] = peak; break;
      }
    }
  }
  return FeatureGrid(ego.channels(), ego.height(), ego.width(), std::move(out));
}

}  // namespace coopertrim
