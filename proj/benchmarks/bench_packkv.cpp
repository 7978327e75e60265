#include <benchmark/benchmark.h>

#include <cstdint>
#include <string>
#include <vector>

#include "packkv/bitpack.hpp"
#include "packkv/experiments.hpp"
#include "packkv/fused.hpp"
#include "packkv/kv_store.hpp"
#include "packkv/quantizer.hpp"
#include "packkv/repacker.hpp"
#include "packkv/rng.hpp"
#include "packkv/tensor.hpp"

namespace {

using namespace packkv;

constexpr std::uint32_t kHeadDim = 128;

KvDump make_dump(std::uint32_t tokens) {
  SynthProfile p;
  return generate_synthetic(p, 1, 1, kHeadDim, tokens);
}

std::vector<float> make_vector(std::size_t n, std::uint64_t seed) {
  SplitMix64 g(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(g.normal());
  return v;
}

void BM_FusedK(benchmark::State& state) {
  const auto tokens = static_cast<std::uint32_t>(state.range(0));
  const CompressedStore store = compress_dump(make_dump(tokens), StoreConfig{});
  const auto q = make_vector(kHeadDim, 1);
  std::vector<float> scores(context_tokens(store, 0));
  std::vector<std::uint64_t> map(scores.size());
  for (auto _ : state) {
    fused_k_scores_into(store, 0, 0, q, scores, map);
    benchmark::DoNotOptimize(scores.data());
  }
  state.SetItemsProcessed(state.iterations() * tokens);
}
BENCHMARK(BM_FusedK)->Arg(1024)->Arg(8192);

void BM_NaiveK(benchmark::State& state) {
  const auto tokens = static_cast<std::uint32_t>(state.range(0));
  const CompressedStore store = compress_dump(make_dump(tokens), StoreConfig{});
  const auto q = make_vector(kHeadDim, 1);
  for (auto _ : state) {
    auto r = naive_k_scores(store, 0, 0, q);
    benchmark::DoNotOptimize(r.scores.data());
  }
  state.SetItemsProcessed(state.iterations() * tokens);
}
BENCHMARK(BM_NaiveK)->Arg(1024)->Arg(8192);

void BM_FusedV(benchmark::State& state) {
  const auto tokens = static_cast<std::uint32_t>(state.range(0));
  const CompressedStore store = compress_dump(make_dump(tokens), StoreConfig{});
  const auto w = make_vector(context_tokens(store, 0), 2);
  std::vector<float> out(kHeadDim);
  for (auto _ : state) {
    fused_v_output_into(store, 0, 0, w, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * tokens);
}
BENCHMARK(BM_FusedV)->Arg(1024)->Arg(8192);

void BM_NaiveV(benchmark::State& state) {
  const auto tokens = static_cast<std::uint32_t>(state.range(0));
  const CompressedStore store = compress_dump(make_dump(tokens), StoreConfig{});
  const auto w = make_vector(context_tokens(store, 0), 2);
  for (auto _ : state) {
    auto r = naive_v_output(store, 0, 0, w);
    benchmark::DoNotOptimize(r.data());
  }
  state.SetItemsProcessed(state.iterations() * tokens);
}
BENCHMARK(BM_NaiveV)->Arg(1024)->Arg(8192);

void BM_EncodeBlock(benchmark::State& state) {
  const KvDump d = make_dump(64);
  const QuantBlock q = quantize_token_wise(d.k_at(0, 0), 0.1, Kind::K);
  const auto pack = static_cast<std::size_t>(state.range(0));
  std::vector<std::uint8_t> out;
  for (auto _ : state) {
    out.clear();
    encode_block_into(q, pack, Layout::k_interleaved, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_EncodeBlock)->Arg(8)->Arg(16)->Arg(32);

void BM_DecodeBlock(benchmark::State& state) {
  const KvDump d = make_dump(64);
  const QuantBlock q = quantize_token_wise(d.v_at(0, 0), 0.2, Kind::V);
  const PackedBlock block = encode_block(q, 16, Layout::v_contiguous);
  for (auto _ : state) {
    auto r = decode_block(block);
    benchmark::DoNotOptimize(r.q.data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_DecodeBlock);

void BM_Repack(benchmark::State& state) {
  const KvDump d = make_dump(64);
  const std::vector<QuantBlock> k{quantize_token_wise(d.k_at(0, 0), 0.1, Kind::K)};
  const std::vector<QuantBlock> v{quantize_token_wise(d.v_at(0, 0), 0.2, Kind::V)};
  const auto vectors = make_repack_vectors(k, v);
  const auto strategy = static_cast<RepackStrategy>(state.range(0));
  for (auto _ : state) {
    auto plan = repack(vectors, 16, strategy);
    benchmark::DoNotOptimize(plan);
  }
  state.SetLabel(std::string(to_string(strategy)));
}
BENCHMARK(BM_Repack)->Arg(0)->Arg(1)->Arg(2);

}  // namespace

BENCHMARK_MAIN();
