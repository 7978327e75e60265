#include "packkv/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "packkv/error.hpp"

namespace packkv {

QuantParams::QuantParams(double rel_quant_scale) : rel_(rel_quant_scale), bound_(rel_quant_scale / 2.0) {
  if (!(rel_quant_scale > 0.0 && rel_quant_scale <= 1.0)) {
    throw Error(ErrorCode::invalid_argument,
                "rel_quant_scale must lie in (0, 1], got " + std::to_string(rel_quant_scale));
  }
  max_level_ = static_cast<std::uint32_t>(std::round(1.0 / rel_quant_scale));
}

TokenParams quantize_row(std::span<const float> row, const QuantParams& params, std::span<std::uint32_t> q_out) {
  if (row.size() != q_out.size()) throw Error(ErrorCode::dimension_mismatch, "quantize_row output size");
  if (row.empty()) return {};
  float mn = row[0];
  float mx = row[0];
  for (float x : row) {
    if (!std::isfinite(x)) throw Error(ErrorCode::non_finite, "non-finite value in token vector");
    mn = std::min(mn, x);
    mx = std::max(mx, x);
  }
  const float scale = static_cast<float>(params.rel_quant_scale()) * (mx - mn);
  if (scale == 0.0f) {
    std::fill(q_out.begin(), q_out.end(), 0u);
    return {0.0f, mn};
  }
  const float cap = static_cast<float>(params.max_level());
  for (std::size_t i = 0; i < row.size(); ++i) {
    // std::round is half-away-from-zero; arguments are non-negative here.
    const float level = std::min(std::round((row[i] - mn) / scale), cap);
    q_out[i] = static_cast<std::uint32_t>(level);
  }
  return {scale, mn};
}

QuantBlock quantize_token_wise(std::span<const float> x, std::size_t rows, std::size_t cols, double rel_quant_scale,
                               Kind kind) {
  if (x.size() != rows * cols) throw Error(ErrorCode::dimension_mismatch, "quantize: data size != rows x cols");
  const QuantParams params(rel_quant_scale);
  QuantBlock b;
  b.rows = rows;
  b.cols = cols;
  b.kind = kind;
  b.q.resize(rows * cols);
  b.per_token.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    b.per_token[r] = quantize_row(x.subspan(r * cols, cols), params, std::span(b.q).subspan(r * cols, cols));
  }
  return b;
}

QuantBlock quantize_token_wise(const HalfTensor& x, double rel_quant_scale, Kind kind) {
  if (!x.all_finite()) throw Error(ErrorCode::non_finite, "non-finite value in tensor");
  const auto widened = x.to_floats();
  return quantize_token_wise(widened, x.rows(), x.cols(), rel_quant_scale, kind);
}

QuantBlock QuantBlock::permute_rows(std::span<const std::size_t> perm) const {
  if (perm.size() != rows) throw Error(ErrorCode::dimension_mismatch, "permutation length != rows");
  QuantBlock out;
  out.rows = rows;
  out.cols = cols;
  out.kind = kind;
  out.q.resize(q.size());
  out.per_token.resize(rows);
  std::vector<bool> seen(rows, false);
  for (std::size_t i = 0; i < rows; ++i) {
    if (perm[i] >= rows) throw Error(ErrorCode::index_out_of_range, "permutation entry out of range");
    if (seen[perm[i]]) throw Error(ErrorCode::invalid_argument, "permutation repeats a row");
    seen[perm[i]] = true;
    std::memcpy(out.q.data() + i * cols, q.data() + perm[i] * cols, cols * sizeof(std::uint32_t));
    out.per_token[i] = per_token[perm[i]];
  }
  return out;
}

std::vector<float> dequantize_block(const QuantBlock& block) {
  std::vector<float> out(block.q.size());
  for (std::size_t r = 0; r < block.rows; ++r) {
    const TokenParams p = block.per_token[r];
    for (std::size_t c = 0; c < block.cols; ++c) {
      out[r * block.cols + c] = dequantize(block.q[r * block.cols + c], p);
    }
  }
  return out;
}

float max_abs_error(const HalfTensor& x, double rel_quant_scale) {
  const QuantBlock b = quantize_token_wise(x, rel_quant_scale, Kind::K);
  float worst = 0.0f;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      worst = std::max(worst, std::fabs(x.at(r, c) - dequantize(b.at(r, c), b.per_token[r])));
    }
  }
  return worst;
}

}  // namespace packkv
