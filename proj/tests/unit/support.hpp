#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "packkv/kv_store.hpp"
#include "packkv/quantizer.hpp"
#include "packkv/tensor.hpp"

namespace support {

inline packkv::HalfTensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  packkv::HalfTensor t(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t.set(r, c, static_cast<float>(dist(rng)));
  }
  return t;
}

inline std::vector<float> random_floats(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(dist(rng));
  return v;
}

inline packkv::QuantBlock random_qblock(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                                        std::uint32_t max_value, packkv::Kind kind = packkv::Kind::K) {
  packkv::QuantBlock b;
  b.rows = rows;
  b.cols = cols;
  b.kind = kind;
  b.q.resize(rows * cols);
  std::uniform_int_distribution<std::uint32_t> dist(0, max_value);
  for (auto& v : b.q) v = dist(rng);
  b.per_token.resize(rows);
  std::uniform_real_distribution<float> s(0.0f, 0.5f);
  for (auto& p : b.per_token) {
    p.scale = packkv::round_to_half(s(rng));
    p.zero_point = packkv::round_to_half(s(rng) - 0.25f);
  }
  return b;
}

/// Smallest w with 2^w > range, by repeated doubling.
inline unsigned ref_width(std::uint32_t range) {
  unsigned w = 0;
  while (w < 32 && (std::uint64_t{1} << w) <= range) ++w;
  return w;
}

/// Head-major token row of a dump at (layer, token).
inline std::vector<std::uint16_t> token_row(const packkv::KvDump& d, std::uint32_t layer, std::size_t t, bool k) {
  std::vector<std::uint16_t> row;
  for (std::uint32_t h = 0; h < d.heads; ++h) {
    const auto& src = k ? d.k_at(layer, h) : d.v_at(layer, h);
    row.insert(row.end(), src.row(t).begin(), src.row(t).end());
  }
  return row;
}

inline packkv::KvDump random_dump(std::mt19937_64& rng, std::uint32_t layers, std::uint32_t heads,
                                  std::uint32_t dim, std::uint32_t tokens) {
  packkv::KvDump d(layers, heads, dim, tokens);
  for (auto& t : d.k) t = random_tensor(rng, tokens, dim);
  for (auto& t : d.v) t = random_tensor(rng, tokens, dim);
  return d;
}

inline void append_all(packkv::CompressedStore& store, const packkv::KvDump& d, std::uint32_t layer,
                       std::size_t from, std::size_t to) {
  for (std::size_t t = from; t < to; ++t) store.append_token(layer, token_row(d, layer, t, true), token_row(d, layer, t, false));
}

inline double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

}  // namespace support
