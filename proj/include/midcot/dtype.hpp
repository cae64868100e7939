// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "midcot/error.hpp"

namespace midcot {

/// Element types accepted in checkpoints. Anything else is rejected on open.
enum class DType : std::uint8_t { F32, F16, BF16 };

constexpr std::size_t byte_width(DType t) noexcept {
  switch (t) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
  }
  return 0;
}

constexpr std::string_view to_string(DType t) noexcept {
  switch (t) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
  }
  return "?";
}

constexpr std::optional<DType> parse_dtype(std::string_view s) noexcept {
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  return std::nullopt;
}

// Scalar conversions. Narrowing is round-to-nearest-even, NaN payloads are
// kept where they fit and NaNs stay NaN.

constexpr float half_bits_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1Fu;
  const std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits = 0;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: mant * 2^-24, renormalize around the top set bit
      const int top = std::bit_width(mant) - 1;
      bits = sign | (static_cast<std::uint32_t>(top - 24 + 127) << 23) |
             ((mant << (23 - top)) & 0x7FFFFFu);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

constexpr std::uint16_t float_to_half_bits(float f) noexcept {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t abs = x & 0x7FFFFFFFu;

  if (abs > 0x7F800000u) {
    auto payload = static_cast<std::uint16_t>((abs >> 13) & 0x3FFu);
    if (payload == 0) payload = 0x200;
    return static_cast<std::uint16_t>(sign | 0x7C00u | payload);
  }
  // 65520 and above round to infinity
  if (abs >= 0x477FF000u) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (abs >= 0x38800000u) {
    // normal range: rebias exponent, round on the 13 dropped bits
    const std::uint32_t odd = (abs >> 13) & 1u;
    const std::uint32_t r = abs - (112u << 23) + 0xFFFu + odd;
    return static_cast<std::uint16_t>(sign | (r >> 13));
  }
  const std::uint32_t e = abs >> 23;
  if (e == 0) return sign;  // f32 zero or subnormal is far below half's range
  const std::uint32_t shift = 126 - e;
  if (shift > 24) return sign;
  const std::uint32_t m = (abs & 0x7FFFFFu) | 0x800000u;
  std::uint32_t q = m >> shift;
  const std::uint32_t rem = m & ((1u << shift) - 1u);
  const std::uint32_t half = 1u << (shift - 1);
  if (rem > half || (rem == half && (q & 1u))) ++q;
  return static_cast<std::uint16_t>(sign | q);
}

constexpr float bfloat_bits_to_float(std::uint16_t b) noexcept {
  return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

constexpr std::uint16_t float_to_bfloat_bits(float f) noexcept {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  if ((x & 0x7FFFFFFFu) > 0x7F800000u) {
    auto hi = static_cast<std::uint16_t>(x >> 16);
    if ((hi & 0x7Fu) == 0) hi |= 0x40u;
    return hi;
  }
  const std::uint32_t odd = (x >> 16) & 1u;
  return static_cast<std::uint16_t>((x + 0x7FFFu + odd) >> 16);
}

/// Decodes a little-endian element buffer of `dtype` into working precision.
inline std::vector<float> cast_to_f32(std::span<const std::uint8_t> bytes, DType dtype) {
  const std::size_t width = byte_width(dtype);
  if (bytes.size() % width != 0) {
    throw DataError("cast_to_f32: buffer of " + std::to_string(bytes.size()) +
                    " bytes is not a whole number of " + std::string(to_string(dtype)) +
                    " elements");
  }
  std::vector<float> out(bytes.size() / width);
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  switch (dtype) {
    case DType::F32:
      std::memcpy(out.data(), bytes.data(), bytes.size());
      break;
    case DType::F16:
      for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t h;
        std::memcpy(&h, bytes.data() + 2 * i, 2);
        out[i] = half_bits_to_float(h);
      }
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t b;
        std::memcpy(&b, bytes.data() + 2 * i, 2);
        out[i] = bfloat_bits_to_float(b);
      }
      break;
  }
  return out;
}

inline std::vector<std::uint8_t> cast_from_f32(std::span<const float> values, DType dtype) {
  std::vector<std::uint8_t> out(values.size() * byte_width(dtype));
  switch (dtype) {
    case DType::F32:
      std::memcpy(out.data(), values.data(), out.size());
      break;
    case DType::F16:
      for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t h = float_to_half_bits(values[i]);
        std::memcpy(out.data() + 2 * i, &h, 2);
      }
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t b = float_to_bfloat_bits(values[i]);
        std::memcpy(out.data() + 2 * i, &b, 2);
      }
      break;
  }
  return out;
}

}  // namespace midcot
