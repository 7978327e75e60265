#include <gtest/gtest.h>

#include <cstdlib>
#include <random>
#include <thread>

#include "packkv/alloc_tracker.hpp"
#include "packkv/attention.hpp"
#include "packkv/error.hpp"
#include "packkv/experiments.hpp"
#include "packkv/fused.hpp"
#include "support.hpp"

using namespace packkv;

namespace {

struct Rows {
  std::vector<std::vector<double>> values;  // block order
  std::vector<std::uint64_t> tokens;
};

/// Dequantized rows of (layer, head, kind) in block order, straight from the
/// directory and staging.
Rows reference_rows(const CompressedStore& s, std::uint32_t layer, std::uint32_t head, Kind kind) {
  Rows out;
  for (std::size_t i = 0; i < s.block_count(); ++i) {
    const BlockDirectoryEntry& e = s.entry(i);
    if (e.layer != layer || e.head != head || e.kind != kind) continue;
    const QuantBlock q = decode_block(BlockView(s.block_bytes(i)));
    for (std::size_t r = 0; r < q.rows; ++r) {
      std::vector<double> row(q.cols);
      for (std::size_t c = 0; c < q.cols; ++c) {
        row[c] = static_cast<double>(q.at(r, c)) * q.per_token[r].scale + q.per_token[r].zero_point;
      }
      out.values.push_back(std::move(row));
      out.tokens.push_back(e.permutation[r]);
    }
  }
  for (std::size_t r = 0; r < s.staged_tokens(layer); ++r) {
    std::vector<double> row;
    for (std::uint16_t b : s.staged_row(layer, kind, head, r)) row.push_back(half_to_float(b));
    out.values.push_back(std::move(row));
    out.tokens.push_back(s.staging_start(layer) + r);
  }
  return out;
}

CompressedStore random_store(std::mt19937_64& rng, std::uint32_t tokens, std::uint32_t heads = 2,
                             std::uint32_t dim = 32, StoreConfig c = {}) {
  const KvDump d = support::random_dump(rng, 1, heads, dim, tokens);
  return compress_dump(d, c);
}

}  // namespace

TEST(FusedK, ZeroQueryGivesZeroScores) {
  std::mt19937_64 rng(61);
  const CompressedStore s = random_store(rng, 150);
  const std::vector<float> q(32, 0.0f);
  for (float x : fused_k_scores(s, 0, 1, q).scores) EXPECT_EQ(x, 0.0f);
}

TEST(FusedK, BasisVectorSelectsColumn) {
  std::mt19937_64 rng(62);
  const CompressedStore s = random_store(rng, 200);
  const Rows ref = reference_rows(s, 0, 0, Kind::K);
  for (std::size_t c : {0u, 5u, 31u}) {
    std::vector<float> q(32, 0.0f);
    q[c] = 1.0f;
    const ScoreVector sv = fused_k_scores(s, 0, 0, q);
    ASSERT_EQ(sv.scores.size(), ref.values.size());
    EXPECT_EQ(sv.token_map, ref.tokens);
    for (std::size_t t = 0; t < sv.scores.size(); ++t) EXPECT_FLOAT_EQ(sv.scores[t], static_cast<float>(ref.values[t][c]));
  }
}

TEST(FusedK, MatchesReference) {
  std::mt19937_64 rng(63);
  for (int i = 0; i < 30; ++i) {
    StoreConfig c;
    c.pack_size = std::size_t{1} << (rng() % 6);
    c.repack = static_cast<RepackStrategy>(rng() % 3);
    const CompressedStore s = random_store(rng, 1 + static_cast<std::uint32_t>(rng() % 400), 2, 48, c);
    const auto q = support::random_floats(rng, 48);
    const Rows ref = reference_rows(s, 0, 1, Kind::K);
    const ScoreVector fused = fused_k_scores(s, 0, 1, q);
    const ReferenceScores naive = naive_k_scores(s, 0, 1, q);
    ASSERT_EQ(fused.token_map, ref.tokens);
    EXPECT_EQ(naive.token_map, ref.tokens);
    std::vector<double> expect;
    for (const auto& row : ref.values) {
      double acc = 0;
      for (std::size_t d = 0; d < 48; ++d) acc += row[d] * q[d];
      expect.push_back(acc);
    }
    EXPECT_LE(rel_inf_error(std::span<const float>(fused.scores), std::span<const double>(expect)), 1e-3);
    EXPECT_LE(rel_inf_error(std::span<const double>(naive.scores), std::span<const double>(expect)), 1e-6);
  }
}

TEST(FusedV, ZeroWeightsGiveZeros) {
  std::mt19937_64 rng(64);
  const CompressedStore s = random_store(rng, 150);
  const std::vector<float> w(150, 0.0f);
  for (float x : fused_v_output(s, 0, 0, w)) EXPECT_EQ(x, 0.0f);
  for (double x : naive_v_output(s, 0, 0, w)) EXPECT_EQ(x, 0.0);
}

TEST(FusedV, OneHotSelectsRow) {
  std::mt19937_64 rng(65);
  const CompressedStore s = random_store(rng, 170);
  const Rows ref = reference_rows(s, 0, 1, Kind::V);
  for (std::size_t t : {0u, 63u, 64u, 127u, 169u}) {
    std::vector<float> w(170, 0.0f);
    w[t] = 1.0f;
    const auto out = fused_v_output(s, 0, 1, w);
    for (std::size_t c = 0; c < 32; ++c) EXPECT_FLOAT_EQ(out[c], static_cast<float>(ref.values[t][c])) << t;
  }
}

TEST(FusedV, MatchesReference) {
  std::mt19937_64 rng(66);
  for (int i = 0; i < 30; ++i) {
    StoreConfig c;
    c.pack_size = std::size_t{1} << (rng() % 6);
    const std::uint32_t tokens = 1 + static_cast<std::uint32_t>(rng() % 2500);
    const CompressedStore s = random_store(rng, tokens, 1, 40, c);
    const auto w = support::random_floats(rng, tokens, 0.0, 1.0);
    const Rows ref = reference_rows(s, 0, 0, Kind::V);
    std::vector<double> expect(40, 0.0);
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t d = 0; d < 40; ++d) expect[d] += w[t] * ref.values[t][d];
    }
    const auto fused = fused_v_output(s, 0, 0, w);
    EXPECT_LE(rel_inf_error(std::span<const float>(fused), std::span<const double>(expect)), 1e-3);
    EXPECT_LE(rel_inf_error(std::span<const double>(naive_v_output(s, 0, 0, w)), std::span<const double>(expect)), 1e-9);
  }
}

TEST(Fused, Linearity) {
  std::mt19937_64 rng(67);
  const CompressedStore s = random_store(rng, 300, 1, 64);
  const auto q1 = support::random_floats(rng, 64);
  const auto q2 = support::random_floats(rng, 64);
  std::vector<float> q3(64);
  for (std::size_t i = 0; i < 64; ++i) q3[i] = 2.0f * q1[i] - 0.5f * q2[i];
  const auto a = fused_k_scores(s, 0, 0, q1).scores;
  const auto b = fused_k_scores(s, 0, 0, q2).scores;
  const auto c = fused_k_scores(s, 0, 0, q3).scores;
  std::vector<double> combo(a.size());
  for (std::size_t t = 0; t < a.size(); ++t) combo[t] = 2.0 * a[t] - 0.5 * b[t];
  EXPECT_LE(rel_inf_error(std::span<const float>(c), std::span<const double>(combo)), 1e-4);

  const auto w1 = support::random_floats(rng, 300);
  const auto w2 = support::random_floats(rng, 300);
  std::vector<float> w3(300);
  for (std::size_t t = 0; t < 300; ++t) w3[t] = w1[t] + 3.0f * w2[t];
  const auto v1 = fused_v_output(s, 0, 0, w1);
  const auto v2 = fused_v_output(s, 0, 0, w2);
  std::vector<double> vcombo(64);
  for (std::size_t d = 0; d < 64; ++d) vcombo[d] = v1[d] + 3.0 * v2[d];
  EXPECT_LE(rel_inf_error(std::span<const float>(fused_v_output(s, 0, 0, w3)), std::span<const double>(vcombo)), 1e-4);
}

TEST(Fused, BitIdenticalAcrossWorkerCounts) {
  std::mt19937_64 rng(68);
  const CompressedStore s = random_store(rng, 64 * 45 + 13, 2, 32);
  const auto q = support::random_floats(rng, 32);
  const auto w = support::random_floats(rng, 64 * 45 + 13);
  const auto k1 = fused_k_scores(s, 0, 1, q, {1});
  const auto v1 = fused_v_output(s, 0, 1, w, {1});
  for (unsigned workers : {2u, 3u, 4u, 7u, 64u}) {
    const auto kn = fused_k_scores(s, 0, 1, q, {workers});
    EXPECT_EQ(kn.scores, k1.scores) << workers;
    EXPECT_EQ(kn.token_map, k1.token_map);
    EXPECT_EQ(fused_v_output(s, 0, 1, w, {workers}), v1) << workers;
  }
}

TEST(Fused, EmptyContext) {
  CompressedStore s(StoreShape{1, 1, 8}, {});
  const std::vector<float> q(8, 1.0f);
  EXPECT_TRUE(fused_k_scores(s, 0, 0, q).scores.empty());
  EXPECT_EQ(fused_v_output(s, 0, 0, std::vector<float>{}), std::vector<float>(8, 0.0f));
}

TEST(Fused, ArgumentErrors) {
  std::mt19937_64 rng(69);
  const CompressedStore s = random_store(rng, 70);
  const std::vector<float> q(31);
  EXPECT_THROW(fused_k_scores(s, 0, 0, q), Error);
  EXPECT_THROW(fused_k_scores(s, 0, 5, std::vector<float>(32)), Error);
  EXPECT_THROW(fused_v_output(s, 0, 0, std::vector<float>(69)), Error);
  std::vector<float> scores(10);
  std::vector<std::uint64_t> map(10);
  EXPECT_THROW(fused_k_scores_into(s, 0, 0, std::vector<float>(32), scores, map), Error);
}

TEST(Fused, MaterializeMatchesReference) {
  std::mt19937_64 rng(70);
  const CompressedStore s = random_store(rng, 150, 1, 16);
  const auto m = materialize(s, 0, 0, Kind::V);
  const Rows ref = reference_rows(s, 0, 0, Kind::V);
  ASSERT_EQ(m.size(), ref.values.size() * 16);
  for (std::size_t t = 0; t < ref.values.size(); ++t) {
    for (std::size_t c = 0; c < 16; ++c) EXPECT_FLOAT_EQ(m[t * 16 + c], static_cast<float>(ref.values[t][c]));
  }
}

TEST(Fused, ScratchDoesNotGrowWithContext) {
  ASSERT_TRUE(alloc::hook_installed());
  std::mt19937_64 rng(71);
  std::vector<std::size_t> fused_peaks, naive_peaks;
  for (std::uint32_t tokens : {1024u, 4096u}) {
    const CompressedStore s = random_store(rng, tokens, 1, 64);
    const auto q = support::random_floats(rng, 64);
    const auto w = support::random_floats(rng, tokens);
    std::vector<float> scores(tokens), out(64);
    std::vector<std::uint64_t> map(tokens);
    std::size_t peak = 0;
    {
      alloc::Scope scope;
      fused_k_scores_into(s, 0, 0, q, scores, map);
      fused_v_output_into(s, 0, 0, w, out);
      peak = scope.peak_bytes();
    }
    fused_peaks.push_back(peak);
    {
      alloc::Scope scope;
      (void)naive_k_scores(s, 0, 0, q);
      naive_peaks.push_back(scope.peak_bytes());
    }
  }
  EXPECT_LE(fused_peaks[1], fused_peaks[0] * 11 / 10 + 64);
  EXPECT_GE(naive_peaks[1], naive_peaks[0] * 3);
  EXPECT_GT(naive_peaks[0], fused_peaks[0]);
}

TEST(Bench, ReportsBothModes) {
  std::mt19937_64 rng(72);
  const CompressedStore s = random_store(rng, 500, 2, 32);
  for (Kind kind : {Kind::K, Kind::V}) {
    for (ExecMode mode : {ExecMode::fused, ExecMode::naive}) {
      const ThroughputReport r = bench_throughput(s, mode, kind, 2);
      EXPECT_EQ(r.kind, kind);
      EXPECT_EQ(r.mode, mode);
      EXPECT_EQ(r.tokens, 500u * 2);
      EXPECT_EQ(r.bytes_logical, r.tokens * 32 * 2);
      EXPECT_GT(r.wall_ns, 0u);
      EXPECT_GT(r.gbps, 0.0);
      EXPECT_TRUE(r.alloc_tracked);
    }
  }
  EXPECT_THROW(bench_throughput(s, ExecMode::fused, Kind::K, 0), Error);
}

TEST(Workers, EnvironmentCap) {
  ::setenv("PACKKV_THREADS", "1", 1);
  EXPECT_EQ(workers_from_env(), 1u);
  ::setenv("PACKKV_THREADS", "junk", 1);
  EXPECT_EQ(workers_from_env(), 1u);
  ::setenv("PACKKV_THREADS", "100000", 1);
  EXPECT_GE(workers_from_env(), 1u);
  EXPECT_LE(workers_from_env(), std::max(1u, std::thread::hardware_concurrency()));
  ::unsetenv("PACKKV_THREADS");
  EXPECT_EQ(workers_from_env(), 1u);
}
