#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "packkv/kv_store.hpp"
#include "packkv/report.hpp"
#include "packkv/repacker.hpp"
#include "packkv/tensor.hpp"

namespace packkv {

/// Compression ratio of fixed-width group quantization with per-group
/// metadata: 16*group / (bit_width*group + meta_bits_per_group).
double kivi_baseline_cr(unsigned bit_width, std::size_t group, std::size_t meta_bits_per_group);

/// Compresses every layer of `dump` into a fresh store.
CompressedStore compress_dump(const KvDump& dump, const StoreConfig& config);

struct StrategyResult {
  RepackStrategy strategy = RepackStrategy::none;
  KindStats k;
  KindStats v;
  /// Cost of the strategy on the tiny oracle instance.
  std::uint64_t tiny_cost_bits = 0;
};

struct RepackComparison {
  std::vector<StrategyResult> strategies;
  /// Exhaustive optimum on the tiny instance (first `tiny_tokens` tokens of
  /// layer 0, every head).
  std::uint64_t oracle_cost_bits = 0;
  std::size_t tiny_tokens = 0;
  std::size_t tiny_pack_size = 0;
  std::vector<ReportRow> rows;
};

RepackComparison repack_compare(const KvDump& dump, const StoreConfig& config,
                                std::span<const RepackStrategy> strategies, std::size_t tiny_tokens = 8,
                                std::size_t tiny_pack_size = 4);

struct PackSweepPoint {
  std::size_t pack_size = 0;
  KindStats k;
  KindStats v;
};

struct PackSweep {
  std::vector<PackSweepPoint> points;
  std::size_t best_k = 0;
  std::size_t best_v = 0;
  std::vector<ReportRow> rows;
};

PackSweep pack_size_sweep(const KvDump& dump, const StoreConfig& config, std::span<const std::size_t> sizes);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool passed() const noexcept;
  std::vector<ReportRow> rows() const;
};

/// Runs the invariant suite at desk scale. Deterministic for a given seed.
VerifyReport run_verification(const StoreConfig& config, std::uint64_t seed);

}  // namespace packkv
