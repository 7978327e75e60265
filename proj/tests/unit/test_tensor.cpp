#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "packkv/bitpack.hpp"
#include "packkv/error.hpp"
#include "packkv/quantizer.hpp"
#include "packkv/tensor.hpp"
#include "support.hpp"

using namespace packkv;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::invalid_argument;
}

double mean_pack_range(const KvDump& d, double rel, std::size_t k) {
  double sum = 0.0;
  std::size_t packs = 0;
  for (const HalfTensor& t : d.k) {
    const QuantBlock q = quantize_token_wise(t, rel, Kind::K);
    for (std::size_t r0 = 0; r0 + k <= q.rows; r0 += k) {
      for (std::size_t c = 0; c < q.cols; ++c) {
        std::uint32_t lo = q.at(r0, c), hi = lo;
        for (std::size_t r = r0; r < r0 + k; ++r) {
          lo = std::min(lo, q.at(r, c));
          hi = std::max(hi, q.at(r, c));
        }
        sum += hi - lo;
        ++packs;
      }
    }
  }
  return sum / static_cast<double>(packs);
}

}  // namespace

TEST(HalfTensor, ConstructionAndAccess) {
  HalfTensor t(2, 3);
  EXPECT_EQ(t.size(), 6u);
  t.set(1, 2, 1.5f);
  EXPECT_EQ(t.at(1, 2), 1.5f);
  EXPECT_EQ(t.bits_at(1, 2), 0x3e00);
  EXPECT_EQ(t.row(1)[2], 0x3e00);
  EXPECT_THROW(HalfTensor(2, 2, std::vector<std::uint16_t>(3)), Error);
}

TEST(HalfTensor, PermuteRows) {
  const std::vector<float> vals{0, 1, 2, 3, 4, 5};
  const HalfTensor t = HalfTensor::from_floats(3, 2, vals);
  const std::vector<std::size_t> perm{2, 0, 1};
  const HalfTensor p = t.permute_rows(perm);
  EXPECT_EQ(p.at(0, 0), 4.0f);
  EXPECT_EQ(p.at(1, 1), 1.0f);
  EXPECT_EQ(p.at(2, 0), 2.0f);
  const std::vector<std::size_t> bad{0, 0, 1};
  EXPECT_THROW(t.permute_rows(bad), Error);
  const std::vector<std::size_t> out_of_range{0, 1, 3};
  EXPECT_THROW(t.permute_rows(out_of_range), Error);
}

TEST(HalfTensor, FiniteCheck) {
  HalfTensor t(1, 2);
  EXPECT_TRUE(t.all_finite());
  t.mutable_bits()[1] = 0x7c00;
  EXPECT_FALSE(t.all_finite());
}

TEST(Dump, TwoLayerRoundTrip) {
  std::mt19937_64 rng(1);
  const KvDump d = support::random_dump(rng, 2, 3, 8, 5);
  const KvDump back = parse_dump(serialize_dump(d));
  EXPECT_EQ(back.layers, 2u);
  EXPECT_EQ(back, d);
}

TEST(Dump, FileRoundTrip) {
  std::mt19937_64 rng(2);
  const KvDump d = support::random_dump(rng, 1, 2, 4, 9);
  const auto path = std::filesystem::temp_directory_path() / "packkv_test_dump.pkkv";
  write_dump(d, path);
  EXPECT_EQ(read_dump(path), d);
  std::filesystem::remove(path);
}

TEST(Dump, EmptyAndSingleToken) {
  for (std::uint32_t tokens : {0u, 1u}) {
    std::mt19937_64 rng(tokens);
    const KvDump d = support::random_dump(rng, 1, 1, 4, tokens);
    const auto bytes = serialize_dump(d);
    EXPECT_EQ(parse_dump(bytes), d);
    EXPECT_EQ(serialize_dump(parse_dump(bytes)), bytes);
  }
}

TEST(Dump, Errors) {
  std::mt19937_64 rng(5);
  const auto bytes = serialize_dump(support::random_dump(rng, 1, 2, 4, 6));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(code_of([&] { parse_dump(bad); }), ErrorCode::bad_magic);
  bad = bytes;
  bad[4] = 9;
  EXPECT_EQ(code_of([&] { parse_dump(bad); }), ErrorCode::unsupported_version);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + bytes.size() / 2 + 1);
  EXPECT_EQ(code_of([&] { parse_dump(cut); }), ErrorCode::truncated);
  std::vector<std::uint8_t> header_only(bytes.begin(), bytes.begin() + 10);
  EXPECT_EQ(code_of([&] { parse_dump(header_only); }), ErrorCode::truncated);
  bad = bytes;
  bad.push_back(0);
  EXPECT_EQ(code_of([&] { parse_dump(bad); }), ErrorCode::shape_mismatch);
  bad = bytes;
  bad[16] = 0x00;
  bad[17] = 0x7c;
  EXPECT_EQ(code_of([&] { parse_dump(bad); }), ErrorCode::non_finite);
  EXPECT_EQ(code_of([] { read_dump("/nonexistent/packkv/file"); }), ErrorCode::io_failure);
}

TEST(Synthetic, Deterministic) {
  SynthProfile p;
  p.seed = 7;
  EXPECT_EQ(generate_synthetic(p, 2, 2, 16, 40), generate_synthetic(p, 2, 2, 16, 40));
  SynthProfile q = p;
  q.seed = 8;
  EXPECT_NE(generate_synthetic(p, 1, 1, 16, 40), generate_synthetic(q, 1, 1, 16, 40));
  EXPECT_THROW(generate_synthetic(p, 0, 1, 16, 4), Error);
}

TEST(Synthetic, UniformSpreadsQuantizedValues) {
  SynthProfile p;
  p.mode = SynthMode::uniform;
  const KvDump d = generate_synthetic(p, 1, 1, 128, 64);
  const QuantBlock q = quantize_token_wise(d.k_at(0, 0), 0.1, Kind::K);
  const std::set<std::uint32_t> distinct(q.q.begin(), q.q.end());
  EXPECT_GE(distinct.size(), 8u);
}

TEST(Synthetic, BandedHasNarrowerPacksThanUniform) {
  SynthProfile banded;
  SynthProfile uniform;
  uniform.mode = SynthMode::uniform;
  const KvDump b = generate_synthetic(banded, 1, 2, 128, 64);
  const KvDump u = generate_synthetic(uniform, 1, 2, 128, 64);
  EXPECT_LT(mean_pack_range(b, 0.1, 16), mean_pack_range(u, 0.1, 16));
}

TEST(Synthetic, TokenScaledVariesMagnitude) {
  SynthProfile p;
  p.mode = SynthMode::token_scaled;
  const KvDump d = generate_synthetic(p, 1, 1, 64, 128);
  float lo = 1e9f, hi = 0.0f;
  for (std::size_t r = 0; r < 128; ++r) {
    float m = 0.0f;
    for (std::size_t c = 0; c < 64; ++c) m = std::max(m, std::fabs(d.k_at(0, 0).at(r, c)));
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  EXPECT_GT(hi / lo, 10.0f);
}
