#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "packkv/fused.hpp"
#include "packkv/kv_store.hpp"
#include "packkv/tensor.hpp"

namespace packkv {

struct AttentionConfig {
  std::size_t head_dim = 0;
  double scale = 0.0;  // 1 / sqrt(head_dim)

  explicit AttentionConfig(std::size_t dim) : head_dim(dim), scale(dim ? 1.0 / std::sqrt(static_cast<double>(dim)) : 0.0) {}
};

/// Softmax with max subtraction, in place.
void softmax_inplace(std::span<double> x);

/// Decode-step attention over the compressed store for one (layer, head):
/// fused K scores, scaling, softmax, fused V output.
std::vector<float> attention_decode(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                                    std::span<const float> q, const ExecOptions& opts = {});

/// Uncompressed f64 softmax(K q / sqrt(d))^T V.
std::vector<double> attention_reference(const HalfTensor& k, const HalfTensor& v, std::span<const float> q);

struct InvarianceReport {
  std::size_t trials = 0;
  std::size_t failures = 0;
  /// Largest |Att(q,PK,PV) - Att(q,K,V)|_inf / |Att(q,K,V)|_inf seen.
  double max_rel_deviation = 0.0;
  /// Same measure between compressed attention with greedy repacking and without.
  double repack_rel_deviation = 0.0;
  bool repack_neutral = true;

  bool passed() const noexcept { return failures == 0 && repack_neutral; }
};

inline constexpr double kPermutationTolerance = 1e-5;
inline constexpr double kRepackNeutralityTolerance = 1e-4;

/// Checks joint-permutation invariance on `trials` random permutations and
/// compares compressed attention with repacking on and off.
InvarianceReport permutation_invariance_check(const HalfTensor& k, const HalfTensor& v, std::span<const float> q,
                                              std::size_t trials, std::uint64_t seed = 1,
                                              StoreConfig config = {});

/// |a - b|_inf / max(|b|_inf, tiny).
double rel_inf_error(std::span<const double> a, std::span<const double> b);
double rel_inf_error(std::span<const float> a, std::span<const double> b);
double rel_inf_error(std::span<const float> a, std::span<const float> b);

/// Random permutation of [0, n).
std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed);

}  // namespace packkv
