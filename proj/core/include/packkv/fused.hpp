#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "packkv/kv_store.hpp"
#include "packkv/types.hpp"

namespace packkv {

struct ExecOptions {
  /// Worker threads for block-parallel execution. Results do not depend on it.
  unsigned workers = 1;
};

/// Worker count from PACKKV_THREADS (default 1, capped by hardware threads).
unsigned workers_from_env();

/// Attention scores in block order: compressed blocks in directory order
/// (rows in repacked order), then the residue in arrival order.
struct ScoreVector {
  std::vector<float> scores;
  std::vector<std::uint64_t> token_map;  // original token index per score
};

/// f64 counterpart produced by the decode-then-multiply reference.
struct ReferenceScores {
  std::vector<double> scores;
  std::vector<std::uint64_t> token_map;
};

/// Tokens of (layer, head): compressed blocks plus residue.
std::size_t context_tokens(const CompressedStore& store, std::uint32_t layer);

/// Fused K scores: scores[t] = sum_c dequant(k[t][c]) * q[c], decoded pack by
/// pack with f32 accumulation. Outputs must hold context_tokens() entries.
/// Scratch is O(pack_size + head_dim) per worker regardless of context length.
void fused_k_scores_into(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                         std::span<const float> q, std::span<float> scores, std::span<std::uint64_t> token_map,
                         const ExecOptions& opts = {});
ScoreVector fused_k_scores(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                           std::span<const float> q, const ExecOptions& opts = {});

/// Fused V output: out[c] = sum_t w[t] * dequant(v[t][c]) with w in block
/// order. Blocks are summed into a fixed number of segments which are then
/// combined in order, so the result is bit-identical for any worker count.
void fused_v_output_into(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                         std::span<const float> w, std::span<float> out, const ExecOptions& opts = {});
std::vector<float> fused_v_output(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                                  std::span<const float> w, const ExecOptions& opts = {});

/// Two-step baselines: decode every block into a dequantized float matrix,
/// then multiply in f64.
ReferenceScores naive_k_scores(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                               std::span<const float> q);
std::vector<double> naive_v_output(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                                   std::span<const float> w);

/// Dequantized (and residue) rows of (layer, head, kind) in block order, row-major.
std::vector<float> materialize(const CompressedStore& store, std::uint32_t layer, std::uint32_t head, Kind kind);

enum class ExecMode : std::uint8_t { fused, naive };

std::string_view to_string(ExecMode mode) noexcept;

struct ThroughputReport {
  Kind kind = Kind::K;
  ExecMode mode = ExecMode::fused;
  std::uint64_t tokens = 0;
  /// binary16 bytes the computation covers as if uncompressed.
  std::uint64_t bytes_logical = 0;
  /// Compressed block bytes plus residue bytes actually read.
  std::uint64_t bytes_physical = 0;
  std::uint64_t wall_ns = 0;
  double gbps = 0.0;
  /// Peak heap growth during the timed loop; 0 when accounting is off.
  std::uint64_t peak_alloc = 0;
  bool alloc_tracked = false;
};

/// Runs the K or V path over every (layer, head) `reps` times with fixed
/// random inputs.
ThroughputReport bench_throughput(const CompressedStore& store, ExecMode mode, Kind kind, unsigned reps,
                                  const ExecOptions& opts = {});

}  // namespace packkv
