#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "packkv/tensor.hpp"
#include "packkv/types.hpp"

namespace packkv {

/// Relative quantization setting. The step for a token is
/// rel_quant_scale * (max - min) of that token's values; the resulting
/// absolute error is at most half a step.
class QuantParams {
 public:
  explicit QuantParams(double rel_quant_scale);

  double rel_quant_scale() const noexcept { return rel_; }
  double rel_error_bound() const noexcept { return bound_; }
  /// Largest integer a row can produce, round(1 / rel_quant_scale).
  std::uint32_t max_level() const noexcept { return max_level_; }

 private:
  double rel_;
  double bound_;
  std::uint32_t max_level_;
};

/// Per-token dequantization pair.
struct TokenParams {
  float scale = 0.0f;
  float zero_point = 0.0f;

  friend bool operator==(const TokenParams&, const TokenParams&) = default;
};

struct QuantBlock {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Kind kind = Kind::K;
  std::vector<std::uint32_t> q;        // row-major, rows x cols
  std::vector<TokenParams> per_token;  // one per row

  std::uint32_t at(std::size_t r, std::size_t c) const noexcept { return q[r * cols + c]; }
  std::span<const std::uint32_t> row(std::size_t r) const noexcept { return {q.data() + r * cols, cols}; }

  /// Returns the block whose row i is row perm[i] of this one (q and params).
  QuantBlock permute_rows(std::span<const std::size_t> perm) const;

  friend bool operator==(const QuantBlock&, const QuantBlock&) = default;
};

/// q * scale + zero_point, evaluated in float.
inline float dequantize(std::uint32_t q, TokenParams p) noexcept {
  return static_cast<float>(q) * p.scale + p.zero_point;
}

QuantBlock quantize_token_wise(const HalfTensor& x, double rel_quant_scale, Kind kind);

/// Same quantizer over an already-widened row-major float matrix.
QuantBlock quantize_token_wise(std::span<const float> x, std::size_t rows, std::size_t cols,
                               double rel_quant_scale, Kind kind);

/// Quantizes a single token vector into `q_out`, returning its parameters.
TokenParams quantize_row(std::span<const float> row, const QuantParams& params, std::span<std::uint32_t> q_out);

/// Row-major float matrix of dequantized values.
std::vector<float> dequantize_block(const QuantBlock& block);

/// max |x - dequantize(quantize(x))| over all elements.
float max_abs_error(const HalfTensor& x, double rel_quant_scale);

}  // namespace packkv
