#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "packkv/quantizer.hpp"

namespace packkv {

/// One token's quantized values, K heads concatenated then V heads.
struct RepackVector {
  std::size_t token_index = 0;
  std::vector<std::uint32_t> k_part;
  std::vector<std::uint32_t> v_part;
};

enum class CostPart : std::uint8_t { K, V, both };

enum class RepackStrategy : std::uint8_t { none = 0, greedy = 1, v_median = 2 };

std::string_view to_string(RepackStrategy s) noexcept;
/// Accepts "none", "greedy", "v_median" (or "v-median", "median").
RepackStrategy parse_repack_strategy(std::string_view name);

/// Ordered groups of token indices.
struct Partition {
  std::vector<std::vector<std::size_t>> groups;
  std::size_t pack_size = 0;

  friend bool operator==(const Partition&, const Partition&) = default;
};

struct RepackPlan {
  /// New row position -> original token index.
  std::vector<std::size_t> permutation;
  RepackStrategy strategy = RepackStrategy::none;
  std::uint64_t cost_bits = 0;
};

struct OracleResult {
  Partition partition;
  std::uint64_t cost_bits = 0;
  std::uint64_t partitions_enumerated = 0;
};

/// Bit-packing cost of one group: sum over dimensions of
/// |group| * ceil(log2(range + 1)) + kPackMetaBits.
std::uint64_t pack_cost(std::span<const RepackVector* const> group, CostPart part);
std::uint64_t pack_cost(std::span<const RepackVector> group, CostPart part);

/// Cost of packing `vectors` in the order given by `order` (positions into
/// `vectors`), consecutive runs of `pack_size`; the last run may be short.
std::uint64_t ordered_cost(std::span<const RepackVector> vectors, std::span<const std::size_t> order,
                           std::size_t pack_size, CostPart part = CostPart::both);

RepackPlan repack_none(std::span<const RepackVector> vectors, std::size_t pack_size);
RepackPlan repack_greedy(std::span<const RepackVector> vectors, std::size_t pack_size);
RepackPlan repack_v_median(std::span<const RepackVector> vectors, std::size_t pack_size);
RepackPlan repack(std::span<const RepackVector> vectors, std::size_t pack_size, RepackStrategy strategy);

/// Exhaustive minimum-cost partition into groups of `pack_size`, plus one
/// short group of n mod pack_size members when n is not a multiple. n <= 12.
OracleResult oracle_optimal(std::span<const RepackVector> vectors, std::size_t pack_size);

inline constexpr std::size_t kOracleMaxVectors = 12;

/// Splits a plan's permutation into consecutive groups of pack_size.
Partition plan_partition(const RepackPlan& plan, std::size_t pack_size);

/// Builds one RepackVector per row from per-head K and V blocks sharing the
/// same rows; token_index is the row index.
std::vector<RepackVector> make_repack_vectors(std::span<const QuantBlock> k_heads, std::span<const QuantBlock> v_heads);

/// True when `perm` is a bijection on [0, perm.size()).
bool is_permutation(std::span<const std::size_t> perm);

}  // namespace packkv
