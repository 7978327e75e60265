#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "packkv/attention.hpp"
#include "packkv/bitpack.hpp"
#include "packkv/error.hpp"
#include "packkv/experiments.hpp"
#include "packkv/fused.hpp"
#include "packkv/quantizer.hpp"
#include "packkv/rng.hpp"

namespace packkv {

bool VerifyReport::passed() const noexcept {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::vector<ReportRow> VerifyReport::rows() const {
  std::vector<ReportRow> out;
  for (const CheckResult& c : checks) {
    out.push_back({"verify", {{"check", c.name}}, "passed", c.passed ? 1.0 : 0.0, "bool"});
  }
  return out;
}

namespace {

HalfTensor random_tensor(SplitMix64& g, std::size_t rows, std::size_t cols, double spread = 1.0) {
  HalfTensor t(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t.set(r, c, static_cast<float>(spread * g.normal()));
  }
  return t;
}

QuantBlock random_qblock(SplitMix64& g, std::size_t rows, std::size_t cols, std::uint32_t max_value) {
  QuantBlock b;
  b.rows = rows;
  b.cols = cols;
  b.kind = g.below(2) ? Kind::K : Kind::V;
  b.q.resize(rows * cols);
  for (auto& v : b.q) v = static_cast<std::uint32_t>(g.below(max_value + 1ull));
  b.per_token.resize(rows);
  for (auto& p : b.per_token) {
    p.scale = round_to_half(static_cast<float>(g.uniform(0.0, 0.5)));
    p.zero_point = round_to_half(static_cast<float>(g.uniform(-4.0, 4.0)));
  }
  return b;
}

std::vector<float> random_vector(SplitMix64& g, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(g.uniform(-1.0, 1.0));
  return v;
}

CompressedStore random_store(SplitMix64& g, const StoreConfig& config, std::size_t tokens, std::uint32_t heads,
                             std::uint32_t dim) {
  SynthProfile p;
  p.mode = g.below(2) ? SynthMode::channel_banded : SynthMode::uniform;
  p.seed = g.next();
  return compress_dump(generate_synthetic(p, 1, heads, dim, static_cast<std::uint32_t>(tokens)), config);
}

CheckResult check(std::string name, const std::function<std::string()>& body) {
  CheckResult r{std::move(name), false, {}};
  try {
    r.detail = body();
    r.passed = r.detail.empty();
    if (r.passed) r.detail = "ok";
  } catch (const std::exception& e) {
    r.detail = std::string("exception: ") + e.what();
  }
  return r;
}

}  // namespace

VerifyReport run_verification(const StoreConfig& config, std::uint64_t seed) {
  config.validate();
  VerifyReport report;
  auto& checks = report.checks;

  checks.push_back(check("kivi_arithmetic", [] {
    const double a = kivi_baseline_cr(2, 64, 32);
    const double b = kivi_baseline_cr(3, 64, 32);
    if (std::fabs(a - 6.4) > 0.005 || std::fabs(b - 4.57) > 0.005) {
      return "got " + std::to_string(a) + ", " + std::to_string(b);
    }
    return std::string();
  }));

  checks.push_back(check("quantization_error_bound", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 1));
    for (double rel : {0.05, 0.1, 0.2}) {
      for (int i = 0; i < 20; ++i) {
        const HalfTensor x = random_tensor(g, 64, 128);
        const QuantBlock q = quantize_token_wise(x, rel, Kind::K);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          float mn = x.at(r, 0), mx = mn;
          for (std::size_t c = 0; c < x.cols(); ++c) {
            mn = std::min(mn, x.at(r, c));
            mx = std::max(mx, x.at(r, c));
          }
          const double bound = rel / 2.0 * (mx - mn) + std::ldexp(1.0, -10);
          for (std::size_t c = 0; c < x.cols(); ++c) {
            if (std::fabs(x.at(r, c) - dequantize(q.at(r, c), q.per_token[r])) > bound) {
              return "bound violated at rel " + std::to_string(rel);
            }
          }
        }
      }
    }
    return std::string();
  }));

  checks.push_back(check("codec_lossless_and_random_access", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 2));
    for (int i = 0; i < 100; ++i) {
      for (std::size_t k : {2u, 4u, 8u, 16u, 32u}) {
        const QuantBlock q = random_qblock(g, 64, 128, static_cast<std::uint32_t>(g.below(1u << (1 + g.below(15)))));
        for (Layout layout : {Layout::k_interleaved, Layout::v_contiguous}) {
          const PackedBlock p = encode_block(q, k, layout);
          if (decode_block(p) != q) return "round trip failed (k=" + std::to_string(k) + ")";
          if (i % 10 == 0) {
            const QuantBlock full = decode_block(p);
            for (std::size_t pack = 0; pack < p.view().pack_count(); ++pack) {
              const auto vals = decode_pack_at(p, pack);
              const PackLocation loc = pack_location(layout, q.cols, pack);
              for (std::size_t j = 0; j < k; ++j) {
                if (vals[j] != full.at(loc.row_group * k + j, loc.column)) return std::string("random access mismatch");
              }
            }
          }
        }
      }
    }
    return std::string();
  }));

  checks.push_back(check("permutation_invariance", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 3));
    for (int i = 0; i < 5; ++i) {
      const HalfTensor k = random_tensor(g, 64, 64);
      const HalfTensor v = random_tensor(g, 64, 64);
      const auto q = random_vector(g, 64);
      StoreConfig c = config;
      const InvarianceReport r = permutation_invariance_check(k, v, q, 20, g.next(), c);
      if (!r.passed()) {
        return "max deviation " + std::to_string(r.max_rel_deviation) + ", repack deviation " +
               std::to_string(r.repack_rel_deviation);
      }
    }
    return std::string();
  }));

  checks.push_back(check("fused_matches_naive", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 4));
    for (int i = 0; i < 10; ++i) {
      const std::size_t tokens = config.block_size * (1 + g.below(6)) + g.below(config.block_size);
      const CompressedStore store = random_store(g, config, tokens, 2, 64);
      for (std::uint32_t h = 0; h < 2; ++h) {
        const auto q = random_vector(g, 64);
        const auto fused = fused_k_scores(store, 0, h, q);
        const auto naive = naive_k_scores(store, 0, h, q);
        if (fused.token_map != naive.token_map) return std::string("token maps differ");
        if (rel_inf_error(std::span<const float>(fused.scores), std::span<const double>(naive.scores)) > 1e-3) {
          return std::string("K scores disagree");
        }
        const auto w = random_vector(g, tokens);
        if (rel_inf_error(std::span<const float>(fused_v_output(store, 0, h, w)),
                          std::span<const double>(naive_v_output(store, 0, h, w))) > 1e-3) {
          return std::string("V output disagrees");
        }
      }
    }
    return std::string();
  }));

  checks.push_back(check("worker_count_determinism", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 5));
    const CompressedStore store = random_store(g, config, config.block_size * 40 + 5, 1, 64);
    const auto q = random_vector(g, 64);
    const auto w = random_vector(g, store.total_tokens(0));
    const auto k1 = fused_k_scores(store, 0, 0, q, {1});
    const auto k3 = fused_k_scores(store, 0, 0, q, {3});
    const auto v1 = fused_v_output(store, 0, 0, w, {1});
    const auto v3 = fused_v_output(store, 0, 0, w, {3});
    if (k1.scores != k3.scores || v1 != v3) return std::string("results depend on worker count");
    return std::string();
  }));

  checks.push_back(check("oracle_dominance", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 6));
    for (std::size_t n : {4u, 6u, 8u}) {
      for (std::size_t k : {2u, 4u}) {
        for (int i = 0; i < 10; ++i) {
          std::vector<RepackVector> vs(n);
          for (std::size_t t = 0; t < n; ++t) {
            vs[t].token_index = t;
            vs[t].k_part.resize(6);
            vs[t].v_part.resize(6);
            for (auto& x : vs[t].k_part) x = static_cast<std::uint32_t>(g.below(11));
            for (auto& x : vs[t].v_part) x = static_cast<std::uint32_t>(g.below(6));
          }
          const auto oracle = oracle_optimal(vs, k).cost_bits;
          for (RepackStrategy s : {RepackStrategy::none, RepackStrategy::greedy, RepackStrategy::v_median}) {
            if (oracle > repack(vs, k, s).cost_bits) return "oracle beaten by " + std::string(to_string(s));
          }
        }
      }
    }
    return std::string();
  }));

  checks.push_back(check("incremental_equals_batch", [&] {
    SynthProfile p;
    p.seed = SplitMix64::derive(seed, 7);
    const KvDump dump = generate_synthetic(p, 1, 2, 64, static_cast<std::uint32_t>(config.block_size * 4 + 7));
    CompressedStore batch = compress_dump(dump, config);
    CompressedStore inc(StoreShape{1, 2, 64}, config);
    std::vector<std::uint16_t> k(128), v(128);
    for (std::size_t t = 0; t < dump.tokens; ++t) {
      for (std::uint32_t h = 0; h < 2; ++h) {
        std::copy_n(dump.k_at(0, h).row(t).begin(), 64, k.begin() + h * 64);
        std::copy_n(dump.v_at(0, h).row(t).begin(), 64, v.begin() + h * 64);
      }
      inc.append_token(0, k, v);
    }
    if (inc.arena_bytes() != batch.arena_bytes() || inc.directory() != batch.directory()) {
      return std::string("stores differ");
    }
    if (inc.serialize() != batch.serialize()) return std::string("serialized stores differ");
    return std::string();
  }));

  checks.push_back(check("store_file_roundtrip", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 8));
    const CompressedStore store = random_store(g, config, config.block_size * 3 + 11, 2, 32);
    const auto bytes = store.serialize();
    const CompressedStore back = CompressedStore::parse(bytes);
    if (back.serialize() != bytes) return std::string("store bytes changed after parse");
    return std::string();
  }));

  checks.push_back(check("repack_cost_matches_codec", [&] {
    SplitMix64 g(SplitMix64::derive(seed, 9));
    SynthProfile p;
    p.seed = g.next();
    const KvDump dump = generate_synthetic(p, 1, 2, 32, 64);
    std::vector<QuantBlock> kq, vq;
    for (std::uint32_t h = 0; h < 2; ++h) {
      kq.push_back(quantize_token_wise(dump.k_at(0, h), config.rel_scale_k, Kind::K));
      vq.push_back(quantize_token_wise(dump.v_at(0, h), config.rel_scale_v, Kind::V));
    }
    const auto vs = make_repack_vectors(kq, vq);
    for (RepackStrategy s : {RepackStrategy::none, RepackStrategy::greedy, RepackStrategy::v_median}) {
      const RepackPlan plan = repack(vs, 16, s);
      std::uint64_t bits = 0;
      for (const auto* set : {&kq, &vq}) {
        for (const QuantBlock& b : *set) {
          bits += encode_block(b.permute_rows(plan.permutation), 16, default_layout(b.kind)).view().pack_cost_bits();
        }
      }
      if (bits != plan.cost_bits) return "cost mismatch for " + std::string(to_string(s));
    }
    return std::string();
  }));

  return report;
}

}  // namespace packkv
