#include "packkv/bitpack.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "packkv/error.hpp"
#include "packkv/half.hpp"

namespace packkv {

namespace {

std::size_t slots_in_class(std::size_t cols, std::size_t cls) noexcept {
  return cls < cols ? (cols - cls + kInterleaveStride - 1) / kInterleaveStride : 0;
}

}  // namespace

std::size_t column_of_slot(Layout layout, std::size_t cols, std::size_t slot) noexcept {
  if (layout == Layout::v_contiguous) return slot;
  std::size_t cls = 0;
  while (cls < kInterleaveStride) {
    const std::size_t n = slots_in_class(cols, cls);
    if (slot < n) break;
    slot -= n;
    ++cls;
  }
  return cls + kInterleaveStride * slot;
}

PackLocation pack_location(Layout layout, std::size_t cols, std::size_t physical_index) noexcept {
  if (cols == 0) return {};
  return {physical_index / cols, column_of_slot(layout, cols, physical_index % cols)};
}

std::size_t block_metadata_bytes(std::size_t rows, std::size_t cols, std::size_t pack_size) noexcept {
  const std::size_t packs = pack_size == 0 ? 0 : rows / pack_size * cols;
  return kBlockHeaderBytes + (packs + 1) / 2 + 2 * packs + rows * kTokenParamBytes;
}

BlockView::BlockView(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  if (bytes.size() < kBlockHeaderBytes) throw Error(ErrorCode::malformed_header, "block shorter than header");
  const std::uint8_t kind = bytes[0];
  const std::uint8_t layout = bytes[1];
  pack_size_ = bytes[2];
  const std::uint8_t reserved = bytes[3];
  rows_ = static_cast<std::size_t>(bytes[4] | (bytes[5] << 8));
  cols_ = static_cast<std::size_t>(bytes[6] | (bytes[7] << 8));
  if (kind > 1) throw Error(ErrorCode::malformed_header, "bad kind tag " + std::to_string(kind));
  if (layout > 1) throw Error(ErrorCode::malformed_header, "bad layout tag " + std::to_string(layout));
  if (reserved != 0) throw Error(ErrorCode::malformed_header, "reserved byte not zero");
  if (pack_size_ == 0 || rows_ % pack_size_ != 0) {
    throw Error(ErrorCode::malformed_header,
                "rows " + std::to_string(rows_) + " not divisible by pack size " + std::to_string(pack_size_));
  }
  kind_ = static_cast<Kind>(kind);
  layout_ = static_cast<Layout>(layout);

  const std::size_t packs = pack_count();
  minima_offset_ = kBlockHeaderBytes + (packs + 1) / 2;
  params_offset_ = minima_offset_ + 2 * packs;
  payload_offset_ = params_offset_ + rows_ * kTokenParamBytes;
  if (payload_offset_ > bytes.size()) {
    throw Error(ErrorCode::malformed_header, "metadata region exceeds block length");
  }
  std::size_t payload = 0;
  for (std::size_t p = 0; p < packs; ++p) payload += payload_bytes(pack_size_, width(p));
  if (payload_offset_ + payload != bytes.size()) {
    throw Error(ErrorCode::payload_length_mismatch, "payload is " + std::to_string(bytes.size() - payload_offset_) +
                                                        " bytes, widths imply " + std::to_string(payload));
  }
}

TokenParams BlockView::token_params(std::size_t row) const noexcept {
  const std::size_t at = params_offset_ + kTokenParamBytes * row;
  const auto scale = static_cast<std::uint16_t>(bytes_[at] | (bytes_[at + 1] << 8));
  const auto zero = static_cast<std::uint16_t>(bytes_[at + 2] | (bytes_[at + 3] << 8));
  return {half_to_float(scale), half_to_float(zero)};
}

PackDescriptor BlockView::descriptor(std::size_t pack) const noexcept {
  const unsigned w = width(pack);
  return {static_cast<std::uint8_t>(w), minimum(pack), payload_bytes(pack_size_, w)};
}

void BlockView::decode_pack_into(std::size_t pack, std::span<std::uint32_t> out) const {
  if (pack >= pack_count()) {
    throw Error(ErrorCode::index_out_of_range,
                "pack " + std::to_string(pack) + " of " + std::to_string(pack_count()));
  }
  if (out.size() != pack_size_) throw Error(ErrorCode::dimension_mismatch, "output span != pack size");
  std::size_t offset = payload_offset_;
  for (std::size_t p = 0; p < pack; ++p) offset += payload_bytes(pack_size_, width(p));
  unpack_values(bytes_.data() + offset, width(pack), minimum(pack), out);
}

std::uint64_t BlockView::pack_cost_bits() const noexcept {
  std::uint64_t bits = 0;
  for (std::size_t p = 0; p < pack_count(); ++p) bits += 8 * payload_bytes(pack_size_, width(p)) + kPackMetaBits;
  return bits;
}

PackedBlock::PackedBlock(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) { BlockView check(bytes_); }

void encode_block_into(const QuantBlock& q, std::size_t pack_size, Layout layout, std::vector<std::uint8_t>& out) {
  if (pack_size == 0 || pack_size > 255) throw Error(ErrorCode::invalid_argument, "pack size must be in [1, 255]");
  if (q.rows % pack_size != 0) {
    throw Error(ErrorCode::invalid_argument,
                "rows " + std::to_string(q.rows) + " not divisible by pack size " + std::to_string(pack_size));
  }
  if (q.rows > 0xffff || q.cols > 0xffff) throw Error(ErrorCode::invalid_argument, "block dimensions exceed u16");
  if (q.q.size() != q.rows * q.cols || q.per_token.size() != q.rows) {
    throw Error(ErrorCode::dimension_mismatch, "QuantBlock arrays inconsistent with rows x cols");
  }

  const std::size_t groups = q.rows / pack_size;
  const std::size_t packs = groups * q.cols;
  std::vector<std::uint8_t> widths(packs);
  std::vector<std::uint16_t> minima(packs);

  std::size_t payload_total = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t slot = 0; slot < q.cols; ++slot) {
      const std::size_t c = column_of_slot(layout, q.cols, slot);
      std::uint32_t lo = q.at(g * pack_size, c);
      std::uint32_t hi = lo;
      for (std::size_t j = 1; j < pack_size; ++j) {
        const std::uint32_t v = q.at(g * pack_size + j, c);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi > 0xffff) {
        throw Error(ErrorCode::width_overflow, "quantized value " + std::to_string(hi) + " exceeds 16 bits");
      }
      const unsigned w = bit_width(hi - lo);
      if (w > kMaxWidth) throw Error(ErrorCode::width_overflow, "pack range needs " + std::to_string(w) + " bits");
      const std::size_t p = g * q.cols + slot;
      widths[p] = static_cast<std::uint8_t>(w);
      minima[p] = static_cast<std::uint16_t>(lo);
      payload_total += payload_bytes(pack_size, w);
    }
  }

  const std::size_t base = out.size();
  out.reserve(base + block_metadata_bytes(q.rows, q.cols, pack_size) + payload_total);
  out.push_back(static_cast<std::uint8_t>(q.kind));
  out.push_back(static_cast<std::uint8_t>(layout));
  out.push_back(static_cast<std::uint8_t>(pack_size));
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(q.rows));
  out.push_back(static_cast<std::uint8_t>(q.rows >> 8));
  out.push_back(static_cast<std::uint8_t>(q.cols));
  out.push_back(static_cast<std::uint8_t>(q.cols >> 8));

  for (std::size_t p = 0; p < packs; p += 2) {
    const std::uint8_t hi = p + 1 < packs ? widths[p + 1] : 0;
    out.push_back(static_cast<std::uint8_t>(widths[p] | (hi << 4)));
  }
  for (std::uint16_t m : minima) {
    out.push_back(static_cast<std::uint8_t>(m));
    out.push_back(static_cast<std::uint8_t>(m >> 8));
  }
  for (const TokenParams& tp : q.per_token) {
    const std::uint16_t s = float_to_half(tp.scale);
    const std::uint16_t z = float_to_half(tp.zero_point);
    if (!half_is_finite(s) || !half_is_finite(z)) {
      out.resize(base);
      throw Error(ErrorCode::invalid_argument, "token parameters exceed binary16 range");
    }
    out.push_back(static_cast<std::uint8_t>(s));
    out.push_back(static_cast<std::uint8_t>(s >> 8));
    out.push_back(static_cast<std::uint8_t>(z));
    out.push_back(static_cast<std::uint8_t>(z >> 8));
  }

  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t slot = 0; slot < q.cols; ++slot) {
      const std::size_t c = column_of_slot(layout, q.cols, slot);
      const std::size_t p = g * q.cols + slot;
      const unsigned w = widths[p];
      if (w == 0) continue;
      std::uint64_t buf = 0;
      unsigned bits = 0;
      for (std::size_t j = 0; j < pack_size; ++j) {
        buf |= static_cast<std::uint64_t>(q.at(g * pack_size + j, c) - minima[p]) << bits;
        bits += w;
        while (bits >= 8) {
          out.push_back(static_cast<std::uint8_t>(buf));
          buf >>= 8;
          bits -= 8;
        }
      }
      if (bits > 0) out.push_back(static_cast<std::uint8_t>(buf));
    }
  }
}

PackedBlock encode_block(const QuantBlock& q, std::size_t pack_size, Layout layout) {
  std::vector<std::uint8_t> bytes;
  encode_block_into(q, pack_size, layout, bytes);
  return PackedBlock(std::move(bytes));
}

QuantBlock decode_block(const BlockView& view) {
  QuantBlock b;
  b.rows = view.rows();
  b.cols = view.cols();
  b.kind = view.kind();
  b.q.resize(b.rows * b.cols);
  b.per_token.resize(b.rows);
  for (std::size_t r = 0; r < b.rows; ++r) b.per_token[r] = view.token_params(r);

  const std::size_t k = view.pack_size();
  std::vector<std::uint32_t> scratch(k);
  const std::uint8_t* payload = view.bytes().data() + view.payload_offset();
  for (std::size_t g = 0; g < view.row_groups(); ++g) {
    for (std::size_t slot = 0; slot < b.cols; ++slot) {
      const std::size_t p = g * b.cols + slot;
      const unsigned w = view.width(p);
      unpack_values(payload, w, view.minimum(p), scratch);
      payload += payload_bytes(k, w);
      const std::size_t c = column_of_slot(view.layout(), b.cols, slot);
      for (std::size_t j = 0; j < k; ++j) b.q[(g * k + j) * b.cols + c] = scratch[j];
    }
  }
  return b;
}

QuantBlock decode_block(const PackedBlock& block) { return decode_block(block.view()); }

std::vector<std::uint32_t> decode_pack_at(const PackedBlock& block, std::size_t pack_index) {
  const BlockView view = block.view();
  std::vector<std::uint32_t> out(view.pack_size());
  view.decode_pack_into(pack_index, out);
  return out;
}

double compression_ratio(const PackedBlock& block) {
  const BlockView v = block.view();
  if (block.size_bytes() == 0) return 0.0;
  return static_cast<double>(v.rows() * v.cols() * 2) / static_cast<double>(block.size_bytes());
}

}  // namespace packkv
