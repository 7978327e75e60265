#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "packkv/quantizer.hpp"
#include "packkv/types.hpp"

namespace packkv {

enum class Layout : std::uint8_t { k_interleaved = 0, v_contiguous = 1 };

inline constexpr Layout default_layout(Kind kind) noexcept {
  return kind == Kind::K ? Layout::k_interleaved : Layout::v_contiguous;
}

// Format constants shared with the repacker's cost model.
inline constexpr std::size_t kInterleaveStride = 4;
inline constexpr unsigned kWidthFieldBits = 4;
inline constexpr unsigned kMinimumFieldBits = 16;
inline constexpr unsigned kPackMetaBits = kWidthFieldBits + kMinimumFieldBits;
inline constexpr unsigned kMaxWidth = 15;
inline constexpr std::size_t kBlockHeaderBytes = 8;
inline constexpr std::size_t kTokenParamBytes = 4;  // f16 scale + f16 zero point

/// ceil(log2(range + 1)): bits needed to store values in [0, range].
constexpr unsigned bit_width(std::uint32_t range) noexcept {
  return static_cast<unsigned>(std::bit_width(range));
}

constexpr std::size_t payload_bytes(std::size_t pack_size, unsigned width) noexcept {
  return (pack_size * width + 7) / 8;
}

struct PackDescriptor {
  std::uint8_t width = 0;
  std::uint16_t minimum = 0;
  std::size_t payload_bytes = 0;
};

/// Logical position of a physical pack: the row-group it spans and its column.
struct PackLocation {
  std::size_t row_group = 0;
  std::size_t column = 0;
};

/// Column stored at physical slot `slot` (0 <= slot < cols) of a row-group.
/// K packs are interleaved with stride 4: columns 0, 4, 8, ..., then 1, 5, 9, ...
std::size_t column_of_slot(Layout layout, std::size_t cols, std::size_t slot) noexcept;

PackLocation pack_location(Layout layout, std::size_t cols, std::size_t physical_index) noexcept;

/// Size in bytes of everything before the first payload.
std::size_t block_metadata_bytes(std::size_t rows, std::size_t cols, std::size_t pack_size) noexcept;

/// Non-owning, validated view over an encoded block. Constructing one scans
/// the width table once; nothing is allocated.
class BlockView {
 public:
  explicit BlockView(std::span<const std::uint8_t> bytes);

  Kind kind() const noexcept { return kind_; }
  Layout layout() const noexcept { return layout_; }
  std::size_t pack_size() const noexcept { return pack_size_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t row_groups() const noexcept { return rows_ / pack_size_; }
  std::size_t pack_count() const noexcept { return row_groups() * cols_; }
  std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }

  unsigned width(std::size_t pack) const noexcept {
    const std::uint8_t b = bytes_[kBlockHeaderBytes + pack / 2];
    return (pack & 1) ? (b >> 4) : (b & 0x0f);
  }
  std::uint16_t minimum(std::size_t pack) const noexcept {
    const std::size_t at = minima_offset_ + 2 * pack;
    return static_cast<std::uint16_t>(bytes_[at] | (bytes_[at + 1] << 8));
  }
  TokenParams token_params(std::size_t row) const noexcept;
  PackDescriptor descriptor(std::size_t pack) const noexcept;

  /// Offset of the first payload byte.
  std::size_t payload_offset() const noexcept { return payload_offset_; }

  /// Decodes pack `pack` (physical index) into out[0, pack_size) after a
  /// prefix scan of the width table.
  void decode_pack_into(std::size_t pack, std::span<std::uint32_t> out) const;

  /// Sum over packs of payload bits (byte-aligned) plus per-pack metadata bits.
  std::uint64_t pack_cost_bits() const noexcept;

 private:
  std::span<const std::uint8_t> bytes_;
  Kind kind_ = Kind::K;
  Layout layout_ = Layout::k_interleaved;
  std::size_t pack_size_ = 1;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t minima_offset_ = 0;
  std::size_t params_offset_ = 0;
  std::size_t payload_offset_ = 0;
};

/// Unpacks `out.size()` values of `width` bits from `payload`, adding `minimum`.
/// Value j occupies bits [j*width, (j+1)*width), little-endian bit order.
inline void unpack_values(const std::uint8_t* payload, unsigned width, std::uint32_t minimum,
                          std::span<std::uint32_t> out) noexcept {
  if (width == 0) {
    for (auto& v : out) v = minimum;
    return;
  }
  const std::uint64_t mask = (std::uint64_t{1} << width) - 1;
  std::uint64_t buf = 0;
  unsigned bits = 0;
  for (auto& v : out) {
    while (bits < width) {
      buf |= static_cast<std::uint64_t>(*payload++) << bits;
      bits += 8;
    }
    v = minimum + static_cast<std::uint32_t>(buf & mask);
    buf >>= width;
    bits -= width;
  }
}

/// Owning encoded block.
class PackedBlock {
 public:
  PackedBlock() = default;
  /// Validates and adopts a wire-format buffer.
  explicit PackedBlock(std::vector<std::uint8_t> bytes);

  BlockView view() const { return BlockView(bytes_); }
  Kind kind() const { return view().kind(); }
  Layout layout() const { return view().layout(); }
  std::size_t rows() const { return view().rows(); }
  std::size_t cols() const { return view().cols(); }
  std::size_t pack_size() const { return view().pack_size(); }

  std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }
  std::size_t size_bytes() const noexcept { return bytes_.size(); }

  friend bool operator==(const PackedBlock&, const PackedBlock&) = default;

 private:
  std::vector<std::uint8_t> bytes_;
};

PackedBlock encode_block(const QuantBlock& q, std::size_t pack_size, Layout layout);

/// Appends the encoding of `q` to `out` without building a PackedBlock.
void encode_block_into(const QuantBlock& q, std::size_t pack_size, Layout layout, std::vector<std::uint8_t>& out);

QuantBlock decode_block(const PackedBlock& block);
QuantBlock decode_block(const BlockView& view);

std::vector<std::uint32_t> decode_pack_at(const PackedBlock& block, std::size_t pack_index);

/// Uncompressed binary16 bytes over encoded bytes, all metadata included.
double compression_ratio(const PackedBlock& block);

}  // namespace packkv
