#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "packkv/half.hpp"

namespace packkv {

/// Row-major [tokens x channels] matrix of binary16 values, one head's slice
/// of the K or V cache. Elements are kept as raw bit patterns and widened to
/// float for arithmetic.
class HalfTensor {
 public:
  HalfTensor() = default;
  HalfTensor(std::size_t rows, std::size_t cols);
  HalfTensor(std::size_t rows, std::size_t cols, std::vector<std::uint16_t> bits);

  /// Rounds every value to the nearest binary16.
  static HalfTensor from_floats(std::size_t rows, std::size_t cols, std::span<const float> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return bits_.size(); }
  bool empty() const noexcept { return bits_.empty(); }

  float at(std::size_t r, std::size_t c) const noexcept { return half_to_float(bits_[r * cols_ + c]); }
  std::uint16_t bits_at(std::size_t r, std::size_t c) const noexcept { return bits_[r * cols_ + c]; }
  void set(std::size_t r, std::size_t c, float v) noexcept { bits_[r * cols_ + c] = float_to_half(v); }

  std::span<const std::uint16_t> row(std::size_t r) const noexcept {
    return {bits_.data() + r * cols_, cols_};
  }
  std::span<const std::uint16_t> bits() const noexcept { return bits_; }
  std::span<std::uint16_t> mutable_bits() noexcept { return bits_; }

  std::vector<float> to_floats() const;

  /// True when no element is NaN or infinite.
  bool all_finite() const noexcept;

  /// Returns a copy whose row i is row perm[i] of this tensor.
  HalfTensor permute_rows(std::span<const std::size_t> perm) const;

  friend bool operator==(const HalfTensor&, const HalfTensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint16_t> bits_;
};

/// Raw KV cache contents for every (layer, head), all sharing one shape.
struct KvDump {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::uint32_t head_dim = 0;
  std::uint32_t tokens = 0;
  std::vector<HalfTensor> k;  // index layer * heads + head
  std::vector<HalfTensor> v;

  KvDump() = default;
  KvDump(std::uint32_t layers, std::uint32_t heads, std::uint32_t head_dim, std::uint32_t tokens);

  const HalfTensor& k_at(std::size_t layer, std::size_t head) const { return k.at(layer * heads + head); }
  const HalfTensor& v_at(std::size_t layer, std::size_t head) const { return v.at(layer * heads + head); }
  HalfTensor& k_at(std::size_t layer, std::size_t head) { return k.at(layer * heads + head); }
  HalfTensor& v_at(std::size_t layer, std::size_t head) { return v.at(layer * heads + head); }

  /// Throws shape_mismatch / non_finite when the invariants do not hold.
  void validate() const;

  friend bool operator==(const KvDump&, const KvDump&) = default;
};

// Dump file: "PKKV" | u16 version=1 | u16 layers | u16 heads | u16 head_dim |
// u32 tokens | per (layer, head): K then V, rows x cols binary16, row-major,
// little-endian, no padding.
inline constexpr char kDumpMagic[4] = {'P', 'K', 'K', 'V'};
inline constexpr std::uint16_t kDumpVersion = 1;

std::vector<std::uint8_t> serialize_dump(const KvDump& dump);
KvDump parse_dump(std::span<const std::uint8_t> bytes);

void write_dump(const KvDump& dump, const std::filesystem::path& path);
KvDump read_dump(const std::filesystem::path& path);

enum class SynthMode : std::uint8_t { uniform, channel_banded, token_scaled };

struct SynthProfile {
  SynthMode mode = SynthMode::channel_banded;
  std::uint64_t seed = 7;
  /// uniform: half-width of the value interval. channel_banded: spread of
  /// per-column offsets. token_scaled: base half-width before token scaling.
  float amplitude = 1.0f;
  /// channel_banded only: per-token noise around the column band.
  float noise = 0.04f;
  /// channel_banded only: number of token regimes sharing a column pattern.
  std::uint32_t regimes = 4;
  /// channel_banded only: spread of the per-regime column shift.
  float regime_amplitude = 0.15f;
};

/// Deterministic synthetic KV data; identical (profile, dims) give identical
/// bytes on every platform.
KvDump generate_synthetic(const SynthProfile& profile, std::uint32_t layers, std::uint32_t heads,
                          std::uint32_t head_dim, std::uint32_t tokens);

}  // namespace packkv
