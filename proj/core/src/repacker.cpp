#include "packkv/repacker.hpp"

#include <algorithm>
#include <bit>
#include <limits>
#include <numeric>
#include <string>

#include "packkv/bitpack.hpp"
#include "packkv/error.hpp"

namespace packkv {

std::string_view to_string(RepackStrategy s) noexcept {
  switch (s) {
    case RepackStrategy::none: return "none";
    case RepackStrategy::greedy: return "greedy";
    case RepackStrategy::v_median: return "v_median";
  }
  return "unknown";
}

RepackStrategy parse_repack_strategy(std::string_view name) {
  if (name == "none") return RepackStrategy::none;
  if (name == "greedy") return RepackStrategy::greedy;
  if (name == "v_median" || name == "v-median" || name == "median") return RepackStrategy::v_median;
  throw Error(ErrorCode::invalid_argument, "unknown repack strategy '" + std::string(name) + "'");
}

namespace {

// Dense n x D copy of the selected parts, so inner loops run over one array.
struct VectorMatrix {
  std::size_t n = 0;
  std::size_t dims = 0;
  std::vector<std::uint32_t> data;

  VectorMatrix(std::span<const RepackVector> vectors, CostPart part) : n(vectors.size()) {
    if (n == 0) return;
    const std::size_t dk = part == CostPart::V ? 0 : vectors[0].k_part.size();
    const std::size_t dv = part == CostPart::K ? 0 : vectors[0].v_part.size();
    dims = dk + dv;
    data.resize(n * dims);
    for (std::size_t i = 0; i < n; ++i) {
      const RepackVector& v = vectors[i];
      if ((dk && v.k_part.size() != dk) || (dv && v.v_part.size() != dv)) {
        throw Error(ErrorCode::dimension_mismatch, "repack vectors differ in length");
      }
      std::uint32_t* row = data.data() + i * dims;
      if (dk) std::copy(v.k_part.begin(), v.k_part.end(), row);
      if (dv) std::copy(v.v_part.begin(), v.v_part.end(), row + dk);
    }
  }

  const std::uint32_t* row(std::size_t i) const noexcept { return data.data() + i * dims; }
};

std::uint64_t group_cost(const VectorMatrix& m, std::span<const std::size_t> members) {
  if (members.empty()) return 0;
  std::uint64_t bits = 0;
  for (std::size_t d = 0; d < m.dims; ++d) {
    std::uint32_t lo = m.row(members[0])[d];
    std::uint32_t hi = lo;
    for (std::size_t i = 1; i < members.size(); ++i) {
      const std::uint32_t x = m.row(members[i])[d];
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    bits += members.size() * bit_width(hi - lo) + kPackMetaBits;
  }
  return bits;
}

std::uint64_t cost_of_order(const VectorMatrix& m, std::span<const std::size_t> order, std::size_t pack_size) {
  std::uint64_t bits = 0;
  for (std::size_t start = 0; start < order.size(); start += pack_size) {
    bits += group_cost(m, order.subspan(start, std::min(pack_size, order.size() - start)));
  }
  return bits;
}

void check_args(std::span<const RepackVector>, std::size_t pack_size) {
  if (pack_size == 0) throw Error(ErrorCode::invalid_argument, "pack size must be >= 1");
}

RepackPlan finish_plan(std::span<const RepackVector> vectors, const VectorMatrix& m, std::vector<std::size_t> order,
                       std::size_t pack_size, RepackStrategy strategy) {
  RepackPlan plan;
  plan.strategy = strategy;
  plan.cost_bits = cost_of_order(m, order, pack_size);
  plan.permutation.resize(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) plan.permutation[i] = vectors[order[i]].token_index;
  return plan;
}

}  // namespace

std::uint64_t pack_cost(std::span<const RepackVector* const> group, CostPart part) {
  if (group.empty()) throw Error(ErrorCode::invalid_argument, "pack_cost of an empty group");
  std::vector<RepackVector> copy;
  copy.reserve(group.size());
  for (const RepackVector* v : group) copy.push_back(*v);
  return pack_cost(std::span<const RepackVector>(copy), part);
}

std::uint64_t pack_cost(std::span<const RepackVector> group, CostPart part) {
  if (group.empty()) throw Error(ErrorCode::invalid_argument, "pack_cost of an empty group");
  const VectorMatrix m(group, part);
  std::vector<std::size_t> all(group.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return group_cost(m, all);
}

std::uint64_t ordered_cost(std::span<const RepackVector> vectors, std::span<const std::size_t> order,
                           std::size_t pack_size, CostPart part) {
  if (pack_size == 0) throw Error(ErrorCode::invalid_argument, "pack size must be >= 1");
  for (std::size_t i : order) {
    if (i >= vectors.size()) throw Error(ErrorCode::index_out_of_range, "order entry out of range");
  }
  return cost_of_order(VectorMatrix(vectors, part), order, pack_size);
}

RepackPlan repack_none(std::span<const RepackVector> vectors, std::size_t pack_size) {
  check_args(vectors, pack_size);
  const VectorMatrix m(vectors, CostPart::both);
  std::vector<std::size_t> order(vectors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  return finish_plan(vectors, m, std::move(order), pack_size, RepackStrategy::none);
}

RepackPlan repack_greedy(std::span<const RepackVector> vectors, std::size_t pack_size) {
  check_args(vectors, pack_size);
  const VectorMatrix m(vectors, CostPart::both);
  const std::size_t n = m.n;
  const std::size_t dims = m.dims;

  // Remaining candidates in ascending token index; strict comparison keeps the lowest on ties.
  std::vector<std::size_t> remaining(n);
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  std::stable_sort(remaining.begin(), remaining.end(), [&](std::size_t a, std::size_t b) {
    return vectors[a].token_index < vectors[b].token_index;
  });

  std::vector<std::uint64_t> sum(dims, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dims; ++d) sum[d] += m.row(i)[d];
  }

  std::vector<std::size_t> order;
  order.reserve(n);
  std::vector<double> centroid(dims);
  std::vector<std::uint32_t> lo(dims), hi(dims);
  std::vector<unsigned> width(dims);

  auto take = [&](std::size_t pos) {
    const std::size_t idx = remaining[pos];
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pos));
    for (std::size_t d = 0; d < dims; ++d) sum[d] -= m.row(idx)[d];
    order.push_back(idx);
    return idx;
  };

  while (!remaining.empty()) {
    const double count = static_cast<double>(remaining.size());
    for (std::size_t d = 0; d < dims; ++d) centroid[d] = static_cast<double>(sum[d]) / count;

    std::size_t seed_pos = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t pos = 0; pos < remaining.size(); ++pos) {
      const std::uint32_t* x = m.row(remaining[pos]);
      double dist = 0.0;
      for (std::size_t d = 0; d < dims; ++d) {
        const double diff = static_cast<double>(x[d]) - centroid[d];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        seed_pos = pos;
      }
    }
    const std::size_t seed = take(seed_pos);
    const std::uint32_t* s = m.row(seed);
    for (std::size_t d = 0; d < dims; ++d) {
      lo[d] = hi[d] = s[d];
      width[d] = 0;
    }

    // Marginal cost of adding j to a group of size `members`: the metadata
    // term is unchanged, so only the payload terms differ.
    for (std::size_t members = 1; members < pack_size && !remaining.empty(); ++members) {
      std::size_t best_pos = 0;
      std::int64_t best_delta = std::numeric_limits<std::int64_t>::max();
      for (std::size_t pos = 0; pos < remaining.size(); ++pos) {
        const std::uint32_t* x = m.row(remaining[pos]);
        std::int64_t grown = 0;
        std::int64_t current = 0;
        for (std::size_t d = 0; d < dims; ++d) {
          const std::uint32_t l = std::min(lo[d], x[d]);
          const std::uint32_t h = std::max(hi[d], x[d]);
          grown += bit_width(h - l);
          current += width[d];
        }
        const auto size = static_cast<std::int64_t>(members);
        const std::int64_t delta = (size + 1) * grown - size * current;
        if (delta < best_delta) {
          best_delta = delta;
          best_pos = pos;
        }
      }
      const std::uint32_t* x = m.row(take(best_pos));
      for (std::size_t d = 0; d < dims; ++d) {
        lo[d] = std::min(lo[d], x[d]);
        hi[d] = std::max(hi[d], x[d]);
        width[d] = bit_width(hi[d] - lo[d]);
      }
    }
  }
  return finish_plan(vectors, m, std::move(order), pack_size, RepackStrategy::greedy);
}

RepackPlan repack_v_median(std::span<const RepackVector> vectors, std::size_t pack_size) {
  check_args(vectors, pack_size);
  const VectorMatrix m(vectors, CostPart::both);
  std::vector<std::uint32_t> medians(vectors.size(), 0);
  std::vector<std::uint32_t> scratch;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto& v = vectors[i].v_part;
    if (v.empty()) continue;
    scratch.assign(v.begin(), v.end());
    const auto mid = scratch.begin() + static_cast<std::ptrdiff_t>((scratch.size() - 1) / 2);  // lower median
    std::nth_element(scratch.begin(), mid, scratch.end());
    medians[i] = *mid;
  }
  std::vector<std::size_t> order(vectors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return medians[a] < medians[b]; });
  return finish_plan(vectors, m, std::move(order), pack_size, RepackStrategy::v_median);
}

RepackPlan repack(std::span<const RepackVector> vectors, std::size_t pack_size, RepackStrategy strategy) {
  switch (strategy) {
    case RepackStrategy::none: return repack_none(vectors, pack_size);
    case RepackStrategy::greedy: return repack_greedy(vectors, pack_size);
    case RepackStrategy::v_median: return repack_v_median(vectors, pack_size);
  }
  throw Error(ErrorCode::invalid_argument, "unknown repack strategy");
}

namespace {

struct OracleSearch {
  const VectorMatrix& m;
  std::size_t k;
  std::vector<std::uint64_t> memo;  // group cost by member bitmask
  std::vector<std::size_t> current;
  std::vector<std::size_t> best;
  std::uint32_t short_group = 0;
  std::uint32_t best_short = 0;
  std::uint64_t best_cost = std::numeric_limits<std::uint64_t>::max();
  std::uint64_t enumerated = 0;

  std::uint64_t cost_of_mask(std::uint32_t mask) {
    if (memo[mask] != std::numeric_limits<std::uint64_t>::max()) return memo[mask];
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < m.n; ++i) {
      if (mask & (1u << i)) members.push_back(i);
    }
    return memo[mask] = group_cost(m, members);
  }

  // Picks the short trailing group (n mod k members) first, then splits the
  // rest into full groups.
  void start(std::uint32_t all) {
    const std::size_t r = m.n % k;
    if (r == 0) {
      run(all, 0);
      return;
    }
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < m.n; ++i) pool.push_back(i);
    pick_short(all, pool, 0, 0, r);
  }

  void pick_short(std::uint32_t all, const std::vector<std::size_t>& pool, std::size_t from, std::uint32_t group,
                  std::size_t left) {
    if (left == 0) {
      short_group = group;
      run(all & ~group, cost_of_mask(group));
      return;
    }
    for (std::size_t p = from; p + left <= pool.size(); ++p) {
      pick_short(all, pool, p + 1, group | (1u << pool[p]), left - 1);
    }
  }

  void run(std::uint32_t remaining, std::uint64_t cost) {
    if (remaining == 0) {
      ++enumerated;
      if (cost < best_cost) {
        best_cost = cost;
        best = current;
        best_short = short_group;
      }
      return;
    }
    const auto first = static_cast<std::size_t>(std::countr_zero(remaining));
    std::vector<std::size_t> pool;
    for (std::size_t i = first + 1; i < m.n; ++i) {
      if (remaining & (1u << i)) pool.push_back(i);
    }
    choose(remaining, cost, pool, 0, 1u << first, 1);
  }

  // Extends the group rooted at the lowest remaining index with members
  // drawn from pool[from..] in lexicographic order.
  void choose(std::uint32_t remaining, std::uint64_t cost, const std::vector<std::size_t>& pool, std::size_t from,
              std::uint32_t group, std::size_t size) {
    if (size == k) {
      const std::size_t mark = current.size();
      for (std::size_t i = 0; i < m.n; ++i) {
        if (group & (1u << i)) current.push_back(i);
      }
      run(remaining & ~group, cost + cost_of_mask(group));
      current.resize(mark);
      return;
    }
    for (std::size_t p = from; p + (k - size) <= pool.size(); ++p) {
      choose(remaining, cost, pool, p + 1, group | (1u << pool[p]), size + 1);
    }
  }
};

}  // namespace

OracleResult oracle_optimal(std::span<const RepackVector> vectors, std::size_t pack_size) {
  check_args(vectors, pack_size);
  if (vectors.size() > kOracleMaxVectors) {
    throw Error(ErrorCode::instance_too_large,
                "oracle limited to " + std::to_string(kOracleMaxVectors) + " vectors, got " +
                    std::to_string(vectors.size()));
  }
  const VectorMatrix m(vectors, CostPart::both);
  OracleSearch search{m, pack_size,
                      std::vector<std::uint64_t>(std::size_t{1} << m.n, std::numeric_limits<std::uint64_t>::max()),
                      {}, {}};
  search.start(static_cast<std::uint32_t>((std::uint64_t{1} << m.n) - 1));

  OracleResult result;
  result.cost_bits = search.best_cost;
  result.partitions_enumerated = search.enumerated;
  result.partition.pack_size = pack_size;
  for (std::size_t start = 0; start < search.best.size(); start += pack_size) {
    std::vector<std::size_t> group;
    for (std::size_t i = start; i < start + pack_size; ++i) group.push_back(vectors[search.best[i]].token_index);
    result.partition.groups.push_back(std::move(group));
  }
  if (search.best_short != 0) {
    std::vector<std::size_t> group;
    for (std::size_t i = 0; i < m.n; ++i) {
      if (search.best_short & (1u << i)) group.push_back(vectors[i].token_index);
    }
    result.partition.groups.push_back(std::move(group));
  }
  return result;
}

Partition plan_partition(const RepackPlan& plan, std::size_t pack_size) {
  if (pack_size == 0) throw Error(ErrorCode::invalid_argument, "pack size must be >= 1");
  Partition p;
  p.pack_size = pack_size;
  for (std::size_t start = 0; start < plan.permutation.size(); start += pack_size) {
    const auto end = std::min(plan.permutation.size(), start + pack_size);
    p.groups.emplace_back(plan.permutation.begin() + static_cast<std::ptrdiff_t>(start),
                          plan.permutation.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return p;
}

std::vector<RepackVector> make_repack_vectors(std::span<const QuantBlock> k_heads, std::span<const QuantBlock> v_heads) {
  if (k_heads.empty() || v_heads.empty()) throw Error(ErrorCode::invalid_argument, "need K and V blocks");
  const std::size_t rows = k_heads[0].rows;
  for (const auto* set : {&k_heads, &v_heads}) {
    for (const QuantBlock& b : *set) {
      if (b.rows != rows) throw Error(ErrorCode::dimension_mismatch, "head blocks differ in row count");
    }
  }
  std::vector<RepackVector> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    RepackVector& v = out[r];
    v.token_index = r;
    for (const QuantBlock& b : k_heads) v.k_part.insert(v.k_part.end(), b.row(r).begin(), b.row(r).end());
    for (const QuantBlock& b : v_heads) v.v_part.insert(v.v_part.end(), b.row(r).begin(), b.row(r).end());
  }
  return out;
}

bool is_permutation(std::span<const std::size_t> perm) {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) return false;
    seen[p] = true;
  }
  return true;
}

}  // namespace packkv
