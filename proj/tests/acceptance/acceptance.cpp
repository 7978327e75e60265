// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "packkv/alloc_tracker.hpp"
#include "packkv/attention.hpp"
#include "packkv/bitpack.hpp"
#include "packkv/experiments.hpp"
#include "packkv/fused.hpp"
#include "packkv/kv_store.hpp"
#include "packkv/quantizer.hpp"
#include "packkv/repacker.hpp"

using namespace packkv;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool ok = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

HalfTensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double sd) {
  std::normal_distribution<double> dist(0.0, sd);
  HalfTensor t(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t.set(r, c, static_cast<float>(dist(rng)));
  }
  return t;
}

std::vector<float> random_floats(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(dist(rng));
  return v;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Outcome kivi_arithmetic() {
  const double a = kivi_baseline_cr(2, 64, 32);
  const double b = kivi_baseline_cr(3, 64, 32);
  return {std::fabs(a - 6.4) <= 0.005 && std::fabs(b - 4.57) <= 0.005, fmt("(2,64,32)=%.4f (3,64,32)=%.4f", a, b)};
}

Outcome quantization_error_bound() {
  std::mt19937_64 rng(101);
  std::lognormal_distribution<double> spread(0.0, 1.0);
  double worst_excess = -1e30;
  std::size_t violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const HalfTensor x = random_tensor(rng, 64, 128, spread(rng));
    for (double rel : {0.05, 0.1, 0.2}) {
      const QuantBlock q = quantize_token_wise(x, rel, Kind::K);
      for (std::size_t r = 0; r < 64; ++r) {
        float mn = x.at(r, 0), mx = mn;
        for (std::size_t c = 0; c < 128; ++c) {
          mn = std::min(mn, x.at(r, c));
          mx = std::max(mx, x.at(r, c));
        }
        const double bound = rel / 2.0 * (static_cast<double>(mx) - mn) + std::ldexp(1.0, -10);
        for (std::size_t c = 0; c < 128; ++c) {
          const double err = std::fabs(static_cast<double>(x.at(r, c)) - dequantize(q.at(r, c), q.per_token[r]));
          worst_excess = std::max(worst_excess, err - bound);
          if (err > bound) ++violations;
        }
      }
    }
  }
  return {violations == 0, fmt("3000 quantizations, %.0f violations, worst err-bound %.3g", violations, worst_excess)};
}

QuantBlock random_qblock(std::mt19937_64& rng, std::size_t rows, std::size_t cols, int flavor) {
  QuantBlock b;
  b.rows = rows;
  b.cols = cols;
  b.kind = (rng() & 1) ? Kind::K : Kind::V;
  b.q.resize(rows * cols);
  const unsigned width = static_cast<unsigned>(rng() % 16);
  const std::uint32_t base = static_cast<std::uint32_t>(rng() % 1000);
  for (std::size_t i = 0; i < b.q.size(); ++i) {
    switch (flavor) {
      case 0:  // constant
        b.q[i] = base;
        break;
      case 1:  // max range: every pack spans the full 15-bit width
        b.q[i] = (i / cols) % 2 ? 0x7fff : 0;
        break;
      default:
        b.q[i] = width == 0 ? base : static_cast<std::uint32_t>(rng() & ((1u << width) - 1));
        break;
    }
  }
  b.per_token.resize(rows);
  std::uniform_real_distribution<float> s(-2.0f, 2.0f);
  for (auto& p : b.per_token) p = {round_to_half(std::fabs(s(rng))), round_to_half(s(rng))};
  return b;
}

Outcome codec_lossless() {
  std::mt19937_64 rng(102);
  const std::size_t sizes[] = {2, 4, 8, 16, 32};
  std::size_t failures = 0, encodes = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t k = sizes[i % 5];
    const int flavor = (i / 5) % 4;  // 0 constant, 1 max-range, 2 single row-group, 3 random
    const std::size_t rows = flavor == 2 ? k : k * (1 + rng() % 4);
    const std::size_t cols = 1 + rng() % 128;
    const QuantBlock q = random_qblock(rng, rows, cols, flavor == 2 ? 3 : flavor);
    for (Layout layout : {Layout::k_interleaved, Layout::v_contiguous}) {
      ++encodes;
      if (decode_block(encode_block(q, k, layout)) != q) ++failures;
    }
  }
  return {failures == 0, fmt("%.0f encode/decode pairs, %.0f mismatches", encodes, failures)};
}

Outcome random_access() {
  std::mt19937_64 rng(103);
  std::size_t packs = 0, mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t k = std::size_t{2} << (i % 5);
    const Layout layout = (i % 2) ? Layout::k_interleaved : Layout::v_contiguous;
    const QuantBlock q = random_qblock(rng, 64, 128, 3);
    const PackedBlock p = encode_block(q, k, layout);
    const QuantBlock full = decode_block(p);
    for (std::size_t pack = 0; pack < p.view().pack_count(); ++pack) {
      ++packs;
      const PackLocation loc = pack_location(layout, full.cols, pack);
      const auto vals = decode_pack_at(p, pack);
      for (std::size_t j = 0; j < k; ++j) {
        if (vals[j] != full.at(loc.row_group * k + j, loc.column)) {
          ++mismatches;
          break;
        }
      }
    }
  }
  return {mismatches == 0, fmt("%.0f packs, %.0f mismatches", packs, mismatches)};
}

Outcome permutation_invariance() {
  std::mt19937_64 rng(104);
  double worst = 0.0;
  for (int c = 0; c < 20; ++c) {
    const HalfTensor k = random_tensor(rng, 64, 64, 1.0 + c * 0.2);
    const HalfTensor v = random_tensor(rng, 64, 64, 1.0);
    const auto q = random_floats(rng, 64, -1.0, 1.0);
    const auto base = attention_reference(k, v, q);
    std::vector<std::size_t> perm(64);
    for (int p = 0; p < 100; ++p) {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      worst = std::max(worst, rel_inf_error(attention_reference(k.permute_rows(perm), v.permute_rows(perm), q), base));
    }
  }
  return {worst <= 1e-5, fmt("2000 permuted evaluations, max rel deviation %.3g", worst)};
}

Outcome fused_naive_equivalence() {
  std::mt19937_64 rng(105);
  double worst_k = 0.0, worst_v = 0.0;
  std::size_t map_mismatch = 0;
  for (int i = 0; i < 200; ++i) {
    StoreConfig c;
    c.pack_size = std::size_t{2} << (rng() % 5);
    c.repack = static_cast<RepackStrategy>(rng() % 3);
    const std::uint32_t blocks = static_cast<std::uint32_t>(rng() % 13);
    const std::uint32_t tokens = blocks * 64 + 1 + static_cast<std::uint32_t>(rng() % 63);
    const std::uint32_t heads = 1 + static_cast<std::uint32_t>(rng() % 2);
    KvDump d(1, heads, 64, tokens);
    const double sd = 0.1 + (rng() % 40) * 0.1;
    for (auto& t : d.k) t = random_tensor(rng, tokens, 64, sd);
    for (auto& t : d.v) t = random_tensor(rng, tokens, 64, sd);
    const CompressedStore s = compress_dump(d, c);
    for (std::uint32_t h = 0; h < heads; ++h) {
      const auto q = random_floats(rng, 64, -1.0, 1.0);
      const auto fk = fused_k_scores(s, 0, h, q);
      const auto nk = naive_k_scores(s, 0, h, q);
      if (fk.token_map != nk.token_map) ++map_mismatch;
      worst_k = std::max(worst_k, rel_inf_error(std::span<const float>(fk.scores), std::span<const double>(nk.scores)));
      const auto w = random_floats(rng, tokens, 0.0, 1.0);
      worst_v = std::max(worst_v, rel_inf_error(std::span<const float>(fused_v_output(s, 0, h, w)),
                                                std::span<const double>(naive_v_output(s, 0, h, w))));
    }
  }
  return {worst_k <= 1e-3 && worst_v <= 1e-3 && map_mismatch == 0,
          fmt("200 stores, max rel K %.3g, V %.3g, token-map mismatches %.0f", worst_k, worst_v, map_mismatch)};
}

Outcome oracle_dominance() {
  std::mt19937_64 rng(106);
  std::size_t instances = 0, violations = 0;
  for (std::size_t n : {4u, 6u, 8u}) {
    for (std::size_t k : {2u, 4u}) {
      for (int i = 0; i < 50; ++i) {
        std::vector<RepackVector> vs(n);
        for (std::size_t t = 0; t < n; ++t) {
          vs[t].token_index = t;
          for (int d = 0; d < 4; ++d) vs[t].k_part.push_back(static_cast<std::uint32_t>(rng() % 11));
          for (int d = 0; d < 4; ++d) vs[t].v_part.push_back(static_cast<std::uint32_t>(rng() % 6));
        }
        const std::uint64_t oracle = oracle_optimal(vs, k).cost_bits;
        ++instances;
        for (RepackStrategy s : {RepackStrategy::greedy, RepackStrategy::v_median, RepackStrategy::none}) {
          if (oracle > repack(vs, k, s).cost_bits) ++violations;
        }
      }
    }
  }
  SynthProfile banded;
  const KvDump d = generate_synthetic(banded, 1, 4, 128, 1024);
  const std::vector<RepackStrategy> strategies{RepackStrategy::none, RepackStrategy::greedy};
  const RepackComparison cmp = repack_compare(d, {}, strategies);
  const double none_k = *cmp.strategies[0].k.compression_ratio(), greedy_k = *cmp.strategies[1].k.compression_ratio();
  const double none_v = *cmp.strategies[0].v.compression_ratio(), greedy_v = *cmp.strategies[1].v.compression_ratio();
  const bool ordered = greedy_k >= none_k && greedy_v >= none_v;
  return {violations == 0 && ordered,
          fmt("%.0f instances, %.0f violations; ", instances, violations) +
              fmt("banded seed greedy/none K %.3f/%.3f, ", greedy_k, none_k) +
              fmt("V %.3f/%.3f", greedy_v, none_v)};
}

Outcome incremental_batch() {
  SynthProfile p;
  p.seed = 11;
  const KvDump d = generate_synthetic(p, 1, 4, 128, 1024);
  const CompressedStore batch = compress_dump(d, {});
  CompressedStore inc(StoreShape{1, 4, 128}, {});
  std::vector<std::uint16_t> k(4 * 128), v(4 * 128);
  for (std::size_t t = 0; t < 1024; ++t) {
    for (std::uint32_t h = 0; h < 4; ++h) {
      std::copy(d.k_at(0, h).row(t).begin(), d.k_at(0, h).row(t).end(), k.begin() + h * 128);
      std::copy(d.v_at(0, h).row(t).begin(), d.v_at(0, h).row(t).end(), v.begin() + h * 128);
    }
    inc.append_token(0, k, v);
  }
  const bool same = inc.arena_bytes() == batch.arena_bytes() && inc.directory() == batch.directory() &&
                    inc.serialize() == batch.serialize();
  return {same, fmt("%.0f blocks, %.0f arena bytes, identical=%.0f", static_cast<double>(batch.block_count()),
                    static_cast<double>(batch.arena_size()), same ? 1.0 : 0.0)};
}

Outcome zero_materialization() {
  if (!alloc::hook_installed()) return {false, "allocation accounting unavailable"};
  SynthProfile p;
  std::vector<double> fused, naive;
  for (std::uint32_t tokens : {1024u, 8192u, 32768u}) {
    const CompressedStore s = compress_dump(generate_synthetic(p, 1, 1, 128, tokens), {});
    std::mt19937_64 rng(tokens);
    const auto q = random_floats(rng, 128, -1.0, 1.0);
    const auto w = random_floats(rng, tokens, 0.0, 1.0);
    std::vector<float> scores(tokens), out(128);
    std::vector<std::uint64_t> map(tokens);
    std::size_t f = 0, n = 0;
    {
      const alloc::Scope scope;
      fused_k_scores_into(s, 0, 0, q, scores, map);
      fused_v_output_into(s, 0, 0, w, out);
      f = scope.peak_bytes();
    }
    {
      const alloc::Scope scope;
      (void)naive_k_scores(s, 0, 0, q);
      (void)naive_v_output(s, 0, 0, w);
      n = scope.peak_bytes();
    }
    fused.push_back(static_cast<double>(f));
    naive.push_back(static_cast<double>(n));
  }
  const double fmin = *std::min_element(fused.begin(), fused.end());
  const double fmax = *std::max_element(fused.begin(), fused.end());
  const bool flat = fmax <= fmin * 1.1 && fmin >= fmax * 0.9;
  const double growth = naive[0] > 0 ? naive[2] / naive[0] : 0.0;
  return {flat && growth >= 8.0, fmt("fused peak bytes %.0f/%.0f/%.0f, ", fused[0], fused[1], fused[2]) +
                                     fmt("naive %.0f/%.0f/%.0f, ", naive[0], naive[1], naive[2]) +
                                     fmt("naive growth %.1fx", growth)};
}

Outcome throughput() {
  SynthProfile p;
  const CompressedStore s = compress_dump(generate_synthetic(p, 1, 1, 128, 32768), {});
  bool ok = true;
  std::string detail;
  for (Kind kind : {Kind::K, Kind::V}) {
    // warm-up, then best of three
    (void)bench_throughput(s, ExecMode::fused, kind, 1);
    (void)bench_throughput(s, ExecMode::naive, kind, 1);
    std::uint64_t fused = UINT64_MAX, naive = UINT64_MAX;
    for (int i = 0; i < 3; ++i) {
      fused = std::min(fused, bench_throughput(s, ExecMode::fused, kind, 5).wall_ns);
      naive = std::min(naive, bench_throughput(s, ExecMode::naive, kind, 5).wall_ns);
    }
    ok = ok && fused <= naive;
    if (!detail.empty()) detail += "; ";
    detail += std::string(kind == Kind::K ? "K" : "V") + fmt(" fused %.2f ms vs naive %.2f ms per pass", fused / 5e6, naive / 5e6);
  }
  return {ok, detail};
}

Outcome amortized_append() {
  SynthProfile p;
  const std::uint32_t heads = 4, dim = 128, tokens = 20000;
  const KvDump d = generate_synthetic(p, 1, heads, dim, tokens);
  std::vector<std::vector<std::uint16_t>> krows(tokens), vrows(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::uint32_t h = 0; h < heads; ++h) {
      krows[t].insert(krows[t].end(), d.k_at(0, h).row(t).begin(), d.k_at(0, h).row(t).end());
      vrows[t].insert(vrows[t].end(), d.v_at(0, h).row(t).begin(), d.v_at(0, h).row(t).end());
    }
  }
  CompressedStore s(StoreShape{1, heads, dim}, {});
  double first = 0.0, second = 0.0;
  for (int half = 0; half < 2; ++half) {
    const auto t0 = Clock::now();
    for (std::size_t t = half * 10000; t < (half + 1) * 10000u; ++t) s.append_token(0, krows[t], vrows[t]);
    (half == 0 ? first : second) = seconds_since(t0) / 10000.0;
  }
  return {second <= 2.0 * first, fmt("mean append %.2f us (0-10k) vs %.2f us (10k-20k), ratio %.2f", first * 1e6,
                                     second * 1e6, second / first)};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "kivi_arithmetic", 1.0, kivi_arithmetic},
      {2, "quantization_error_bound", 10.0, quantization_error_bound},
      {3, "lossless_codec", 30.0, codec_lossless},
      {4, "random_access", 5.0, random_access},
      {5, "permutation_invariance", 10.0, permutation_invariance},
      {6, "fused_naive_equivalence", 60.0, fused_naive_equivalence},
      {7, "oracle_dominance", 60.0, oracle_dominance},
      {8, "incremental_batch_equivalence", 10.0, incremental_batch},
      {9, "zero_materialization", 120.0, zero_materialization},
      {10, "fused_not_slower_than_naive", 120.0, throughput},
      {11, "amortized_append_cost", 60.0, amortized_append},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = secs <= c.limit_s;
    const bool ok = o.ok && in_time;
    if (!ok) ++failed;
    std::printf("%s %2d %-30s %6.2fs (limit %.0fs) %s%s\n", ok ? "PASS" : "FAIL", c.id, c.name, secs, c.limit_s,
                o.detail.c_str(), in_time ? "" : " [over time limit]");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
