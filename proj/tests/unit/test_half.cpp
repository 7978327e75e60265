#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "packkv/half.hpp"

using namespace packkv;

namespace {

double decode_ref(std::uint16_t h) {
  const int sign = (h >> 15) ? -1 : 1;
  const int exp = (h >> 10) & 0x1f;
  const int man = h & 0x3ff;
  if (exp == 0) return sign * std::ldexp(man, -24);
  if (exp == 31) return man ? std::numeric_limits<double>::quiet_NaN() : sign * std::numeric_limits<double>::infinity();
  return sign * std::ldexp(1024 + man, exp - 25);
}

}  // namespace

TEST(Half, DecodesEveryPattern) {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const double ref = decode_ref(static_cast<std::uint16_t>(h));
    const float got = half_to_float(static_cast<std::uint16_t>(h));
    if (std::isnan(ref)) {
      EXPECT_TRUE(std::isnan(got)) << h;
    } else {
      EXPECT_EQ(static_cast<double>(got), ref) << h;
    }
  }
}

TEST(Half, RoundTripsEveryNonNanPattern) {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const auto bits = static_cast<std::uint16_t>(h);
    if (std::isnan(half_to_float(bits))) continue;
    EXPECT_EQ(float_to_half(half_to_float(bits)), bits) << h;
  }
}

TEST(Half, NanStaysNan) {
  EXPECT_TRUE(std::isnan(half_to_float(float_to_half(std::numeric_limits<float>::quiet_NaN()))));
  EXPECT_FALSE(half_is_finite(float_to_half(std::numeric_limits<float>::quiet_NaN())));
  EXPECT_FALSE(half_is_finite(float_to_half(std::numeric_limits<float>::infinity())));
  EXPECT_TRUE(half_is_finite(float_to_half(65504.0f)));
}

TEST(Half, OverflowSaturatesToInfinity) {
  EXPECT_EQ(float_to_half(65520.0f), 0x7c00);
  EXPECT_EQ(float_to_half(-1e9f), 0xfc00);
  EXPECT_EQ(float_to_half(65519.0f), 0x7bff);
}

TEST(Half, TiesGoToEven) {
  // 1 + 2^-11 lies halfway between 1 and the next half.
  EXPECT_EQ(float_to_half(1.0f + std::ldexp(1.0f, -11)), 0x3c00);
  EXPECT_EQ(float_to_half(1.0f + 3 * std::ldexp(1.0f, -11)), 0x3c02);
  // smallest subnormal halfway case
  EXPECT_EQ(float_to_half(std::ldexp(1.0f, -25)), 0x0000);
  EXPECT_EQ(float_to_half(std::ldexp(3.0f, -25)), 0x0002);
}

TEST(Half, RandomFloatsRoundToNearest) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> expo(-26.0, 16.0);
  std::uniform_real_distribution<double> mant(1.0, 2.0);
  for (int i = 0; i < 200000; ++i) {
    const float f = static_cast<float>(mant(rng) * std::exp2(std::floor(expo(rng)))) * (i % 2 ? 1.f : -1.f);
    if (std::fabs(f) >= 65504.0f) continue;
    const std::uint16_t h = float_to_half(f);
    const double err = std::fabs(decode_ref(h) - f);
    for (int d : {-1, 1}) {
      const auto n = static_cast<std::uint16_t>(h + d);
      if (((n ^ h) & 0x8000) || !half_is_finite(n)) continue;
      ASSERT_LE(err, std::fabs(decode_ref(n) - f)) << f;
    }
  }
}
