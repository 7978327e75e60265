#include "packkv/kv_store.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "byte_io.hpp"
#include "packkv/error.hpp"
#include "packkv/quantizer.hpp"

namespace packkv {

void StoreConfig::validate() const {
  QuantParams check_k(rel_scale_k);
  QuantParams check_v(rel_scale_v);
  if (pack_size == 0 || pack_size > 255) throw Error(ErrorCode::invalid_argument, "pack_size must be in [1, 255]");
  if (block_size == 0 || block_size > 256) throw Error(ErrorCode::invalid_argument, "block_size must be in [1, 256]");
  if (block_size % pack_size != 0) {
    throw Error(ErrorCode::invalid_argument, "block_size " + std::to_string(block_size) +
                                                 " not divisible by pack_size " + std::to_string(pack_size));
  }
  if (max_buffer_size < block_size || max_buffer_size % block_size != 0 || max_buffer_size > 0xffff) {
    throw Error(ErrorCode::invalid_argument, "max_buffer_size must be a multiple of block_size (<= 65535)");
  }
}

namespace {

// Fixed two-level table: chunk slots never move, so references handed to
// readers stay valid while the writer appends.
template <typename T, std::size_t ChunkSize, std::size_t MaxChunks>
class AppendOnlyTable {
 public:
  AppendOnlyTable() : chunks_(std::make_unique<std::unique_ptr<T[]>[]>(MaxChunks)) {}

  T& emplace_slot() {
    const std::size_t chunk = size_ / ChunkSize;
    if (chunk >= MaxChunks) throw Error(ErrorCode::invalid_argument, "directory capacity exhausted");
    if (!chunks_[chunk]) chunks_[chunk] = std::make_unique<T[]>(ChunkSize);
    return chunks_[chunk][size_++ % ChunkSize];
  }

  /// Makes every slot emplaced so far visible to readers.
  void publish() { published_.store(size_, std::memory_order_release); }
  std::size_t published() const noexcept { return published_.load(std::memory_order_acquire); }

  const T& operator[](std::size_t i) const noexcept { return chunks_[i / ChunkSize][i % ChunkSize]; }

 private:
  std::unique_ptr<std::unique_ptr<T[]>[]> chunks_;
  std::size_t size_ = 0;
  std::atomic<std::size_t> published_{0};
};

class Arena {
 public:
  static constexpr std::size_t kMinChunk = std::size_t{1} << 20;
  static constexpr std::size_t kMaxChunks = std::size_t{1} << 16;

  Arena() : chunks_(std::make_unique<Chunk[]>(kMaxChunks)) {}

  /// Copies `bytes` to the end of the arena; the copy is contiguous.
  const std::uint8_t* append(std::span<const std::uint8_t> bytes) {
    if (count_ == 0 || chunks_[count_ - 1].used + bytes.size() > chunks_[count_ - 1].capacity) {
      if (count_ == kMaxChunks) throw Error(ErrorCode::invalid_argument, "arena capacity exhausted");
      Chunk& c = chunks_[count_];
      c.base = size_;
      c.capacity = std::max(kMinChunk, bytes.size());
      c.data = std::make_unique<std::uint8_t[]>(c.capacity);
      c.used = 0;
      ++count_;
    }
    Chunk& c = chunks_[count_ - 1];
    std::uint8_t* dst = c.data.get() + c.used;
    if (!bytes.empty()) std::memcpy(dst, bytes.data(), bytes.size());
    c.used += bytes.size();
    size_ += bytes.size();
    return dst;
  }

  std::uint64_t size() const noexcept { return size_; }

  /// Copies the first `limit` logical bytes.
  std::vector<std::uint8_t> copy_prefix(std::uint64_t limit) const {
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(limit));
    for (std::size_t i = 0; i < count_ && out.size() < limit; ++i) {
      const Chunk& c = chunks_[i];
      const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(c.used, limit - out.size()));
      out.insert(out.end(), c.data.get(), c.data.get() + n);
    }
    return out;
  }

 private:
  struct Chunk {
    std::uint64_t base = 0;
    std::size_t capacity = 0;
    std::size_t used = 0;
    std::unique_ptr<std::uint8_t[]> data;
  };
  std::unique_ptr<Chunk[]> chunks_;
  std::size_t count_ = 0;
  std::uint64_t size_ = 0;
};

struct Record {
  BlockDirectoryEntry entry;
  const std::uint8_t* data = nullptr;
};

struct LayerStaging {
  std::vector<std::uint16_t> k;  // capacity x heads x head_dim
  std::vector<std::uint16_t> v;
  std::size_t count = 0;
  std::uint64_t start = 0;  // original index of staging row 0
};

}  // namespace

struct CompressedStore::State {
  StoreShape shape;
  StoreConfig config;
  Arena arena;
  AppendOnlyTable<Record, 256, 1 << 14> records;
  std::atomic<std::uint64_t> published_arena{0};
  std::vector<LayerStaging> staging;

  // Row accessor for the tokens of the block being compressed.
  template <typename RowFn>
  void compress_block(std::uint32_t layer, std::uint64_t token_start, RowFn&& row_of);

  void append_one(std::uint32_t layer, std::span<const std::uint16_t> k, std::span<const std::uint16_t> v);
  void check_layer(std::uint32_t layer) const {
    if (layer >= shape.layers) {
      throw Error(ErrorCode::index_out_of_range,
                  "layer " + std::to_string(layer) + " of " + std::to_string(shape.layers));
    }
  }
};

namespace {

void check_token(std::span<const std::uint16_t> token, std::size_t width) {
  if (token.size() != width) {
    throw Error(ErrorCode::dimension_mismatch,
                "token vector has " + std::to_string(token.size()) + " values, expected " + std::to_string(width));
  }
  if (!std::all_of(token.begin(), token.end(), half_is_finite)) {
    throw Error(ErrorCode::non_finite, "NaN or Inf in token vector");
  }
}

}  // namespace

template <typename RowFn>
void CompressedStore::State::compress_block(std::uint32_t layer, std::uint64_t token_start, RowFn&& row_of) {
  const std::size_t rows = config.block_size;
  const std::size_t dim = shape.head_dim;
  std::vector<QuantBlock> kq(shape.heads);
  std::vector<QuantBlock> vq(shape.heads);
  std::vector<float> buf(rows * dim);
  for (std::uint32_t h = 0; h < shape.heads; ++h) {
    for (Kind kind : {Kind::K, Kind::V}) {
      for (std::size_t r = 0; r < rows; ++r) {
        const std::span<const std::uint16_t> src = row_of(kind, h, r);
        std::transform(src.begin(), src.end(), buf.begin() + static_cast<std::ptrdiff_t>(r * dim), half_to_float);
      }
      const double rel = kind == Kind::K ? config.rel_scale_k : config.rel_scale_v;
      (kind == Kind::K ? kq : vq)[h] = quantize_token_wise(buf, rows, dim, rel, kind);
    }
  }

  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (config.repack != RepackStrategy::none) {
    perm = repack(make_repack_vectors(kq, vq), config.pack_size, config.repack).permutation;
  }

  std::vector<std::uint8_t> segment;
  std::vector<std::size_t> ends;
  ends.reserve(2 * shape.heads);
  for (Kind kind : {Kind::K, Kind::V}) {
    for (std::uint32_t h = 0; h < shape.heads; ++h) {
      const QuantBlock& src = (kind == Kind::K ? kq : vq)[h];
      encode_block_into(src.permute_rows(perm), config.pack_size, default_layout(kind), segment);
      ends.push_back(segment.size());
    }
  }

  const std::uint64_t base_offset = arena.size();
  const std::uint8_t* base = arena.append(segment);
  std::vector<std::uint64_t> absolute(rows);
  for (std::size_t r = 0; r < rows; ++r) absolute[r] = token_start + perm[r];

  std::size_t begin = 0;
  std::size_t i = 0;
  for (Kind kind : {Kind::K, Kind::V}) {
    for (std::uint32_t h = 0; h < shape.heads; ++h, ++i) {
      Record& rec = records.emplace_slot();
      rec.entry.kind = kind;
      rec.entry.layer = layer;
      rec.entry.head = h;
      rec.entry.token_start = token_start;
      rec.entry.token_end = token_start + rows;
      rec.entry.byte_offset = base_offset + begin;
      rec.entry.byte_len = static_cast<std::uint32_t>(ends[i] - begin);
      rec.entry.permutation = absolute;
      rec.data = base + begin;
      begin = ends[i];
    }
  }
  published_arena.store(arena.size(), std::memory_order_relaxed);
  records.publish();
}

void CompressedStore::State::append_one(std::uint32_t layer, std::span<const std::uint16_t> k,
                                        std::span<const std::uint16_t> v) {
  LayerStaging& st = staging[layer];
  const std::size_t width = shape.token_width();
  std::copy(k.begin(), k.end(), st.k.begin() + static_cast<std::ptrdiff_t>(st.count * width));
  std::copy(v.begin(), v.end(), st.v.begin() + static_cast<std::ptrdiff_t>(st.count * width));
  ++st.count;
  if (st.count == config.block_size) {
    compress_block(layer, st.start, [&](Kind kind, std::uint32_t h, std::size_t r) {
      const auto& src = kind == Kind::K ? st.k : st.v;
      return std::span<const std::uint16_t>(src.data() + r * width + h * shape.head_dim, shape.head_dim);
    });
    st.start += st.count;
    st.count = 0;
  }
}

CompressedStore::CompressedStore(StoreShape shape, StoreConfig config) : state_(std::make_unique<State>()) {
  config.validate();
  if (shape.layers == 0 || shape.heads == 0 || shape.head_dim == 0) {
    throw Error(ErrorCode::invalid_argument, "store shape needs layers, heads, head_dim >= 1");
  }
  if (shape.layers > 0xffff || shape.heads > 0xffff || shape.head_dim > 0xffff) {
    throw Error(ErrorCode::invalid_argument, "store shape exceeds u16 fields");
  }
  state_->shape = shape;
  state_->config = config;
  state_->staging.resize(shape.layers);
  for (auto& st : state_->staging) {
    st.k.assign(config.max_buffer_size * shape.token_width(), 0);
    st.v.assign(config.max_buffer_size * shape.token_width(), 0);
  }
}

CompressedStore::~CompressedStore() = default;
CompressedStore::CompressedStore(CompressedStore&&) noexcept = default;
CompressedStore& CompressedStore::operator=(CompressedStore&&) noexcept = default;

const StoreShape& CompressedStore::shape() const noexcept { return state_->shape; }
const StoreConfig& CompressedStore::config() const noexcept { return state_->config; }

void CompressedStore::append_token(std::uint32_t layer, std::span<const std::uint16_t> k_token,
                                   std::span<const std::uint16_t> v_token) {
  state_->check_layer(layer);
  check_token(k_token, shape().token_width());
  check_token(v_token, shape().token_width());
  state_->append_one(layer, k_token, v_token);
}

void CompressedStore::compress_batch(std::uint32_t layer, std::span<const HalfTensor> k_heads,
                                     std::span<const HalfTensor> v_heads) {
  State& s = *state_;
  s.check_layer(layer);
  if (k_heads.size() != s.shape.heads || v_heads.size() != s.shape.heads) {
    throw Error(ErrorCode::dimension_mismatch, "batch needs one K and one V tensor per head");
  }
  const std::size_t tokens = k_heads[0].rows();
  for (const auto* set : {&k_heads, &v_heads}) {
    for (const HalfTensor& t : *set) {
      if (t.rows() != tokens || t.cols() != s.shape.head_dim) {
        throw Error(ErrorCode::dimension_mismatch, "batch tensors must be tokens x head_dim");
      }
      if (!t.all_finite()) throw Error(ErrorCode::non_finite, "NaN or Inf in batch");
    }
  }

  const std::size_t width = s.shape.token_width();
  const std::size_t dim = s.shape.head_dim;
  std::vector<std::uint16_t> k_row(width), v_row(width);
  auto gather = [&](std::size_t t) {
    for (std::uint32_t h = 0; h < s.shape.heads; ++h) {
      std::copy_n(k_heads[h].row(t).begin(), dim, k_row.begin() + static_cast<std::ptrdiff_t>(h * dim));
      std::copy_n(v_heads[h].row(t).begin(), dim, v_row.begin() + static_cast<std::ptrdiff_t>(h * dim));
    }
  };

  LayerStaging& st = s.staging[layer];
  std::size_t t = 0;
  // Top up a partially filled staging buffer first.
  while (t < tokens && st.count != 0) {
    gather(t++);
    s.append_one(layer, k_row, v_row);
  }
  // Whole blocks go straight from the input tensors to the compressor.
  while (tokens - t >= s.config.block_size) {
    const std::size_t first = t;
    s.compress_block(layer, st.start, [&](Kind kind, std::uint32_t h, std::size_t r) {
      return (kind == Kind::K ? k_heads : v_heads)[h].row(first + r);
    });
    st.start += s.config.block_size;
    t += s.config.block_size;
  }
  while (t < tokens) {
    gather(t++);
    s.append_one(layer, k_row, v_row);
  }
}

void CompressedStore::ingest(const KvDump& dump) {
  if (dump.layers != shape().layers || dump.heads != shape().heads || dump.head_dim != shape().head_dim) {
    throw Error(ErrorCode::shape_mismatch, "dump shape differs from store shape");
  }
  for (std::uint32_t l = 0; l < dump.layers; ++l) {
    const auto first = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(l) * dump.heads);
    std::span<const HalfTensor> k(dump.k.data() + first, dump.heads);
    std::span<const HalfTensor> v(dump.v.data() + first, dump.heads);
    compress_batch(l, k, v);
  }
}

std::uint64_t CompressedStore::total_tokens(std::uint32_t layer) const {
  state_->check_layer(layer);
  const LayerStaging& st = state_->staging[layer];
  return st.start + st.count;
}

std::size_t CompressedStore::staged_tokens(std::uint32_t layer) const {
  state_->check_layer(layer);
  return state_->staging[layer].count;
}

std::uint64_t CompressedStore::staging_start(std::uint32_t layer) const {
  state_->check_layer(layer);
  return state_->staging[layer].start;
}

std::span<const std::uint16_t> CompressedStore::staged_row(std::uint32_t layer, Kind kind, std::uint32_t head,
                                                           std::size_t row) const {
  state_->check_layer(layer);
  const LayerStaging& st = state_->staging[layer];
  if (head >= shape().heads || row >= st.count) throw Error(ErrorCode::index_out_of_range, "staged row");
  const auto& src = kind == Kind::K ? st.k : st.v;
  return {src.data() + row * shape().token_width() + static_cast<std::size_t>(head) * shape().head_dim,
          shape().head_dim};
}

std::size_t CompressedStore::block_count() const noexcept { return state_->records.published(); }

const BlockDirectoryEntry& CompressedStore::entry(std::size_t index) const {
  if (index >= block_count()) throw Error(ErrorCode::index_out_of_range, "directory index");
  return state_->records[index].entry;
}

std::span<const std::uint8_t> CompressedStore::block_bytes(std::size_t index) const {
  if (index >= block_count()) throw Error(ErrorCode::index_out_of_range, "directory index");
  const Record& r = state_->records[index];
  return {r.data, r.entry.byte_len};
}

std::vector<BlockDirectoryEntry> CompressedStore::directory() const {
  const std::size_t n = block_count();
  std::vector<BlockDirectoryEntry> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(state_->records[i].entry);
  return out;
}

std::uint64_t CompressedStore::arena_size() const noexcept {
  return state_->published_arena.load(std::memory_order_relaxed);
}

std::vector<std::uint8_t> CompressedStore::arena_bytes() const {
  const std::size_t n = block_count();  // acquire: bytes of published blocks are visible
  const std::uint64_t limit =
      n == 0 ? 0 : state_->records[n - 1].entry.byte_offset + state_->records[n - 1].entry.byte_len;
  return state_->arena.copy_prefix(limit);
}

BlockRange CompressedStore::iterate_blocks(std::uint32_t layer, Kind kind) const {
  state_->check_layer(layer);
  return BlockRange(this, layer, kind, std::nullopt, block_count());
}

BlockRange CompressedStore::iterate_blocks(std::uint32_t layer, Kind kind, std::uint32_t head) const {
  state_->check_layer(layer);
  if (head >= shape().heads) throw Error(ErrorCode::index_out_of_range, "head " + std::to_string(head));
  return BlockRange(this, layer, kind, head, block_count());
}

std::size_t CompressedStore::staging_capacity_bytes() const noexcept {
  std::size_t bytes = 0;
  for (const auto& st : state_->staging) bytes += (st.k.size() + st.v.size()) * sizeof(std::uint16_t);
  return bytes;
}

bool BlockRange::matches(std::size_t record) const {
  const BlockDirectoryEntry& e = store_->state_->records[record].entry;
  return e.layer == layer_ && e.kind == kind_ && (!head_ || e.head == *head_);
}

BlockRange::iterator BlockRange::begin() const {
  iterator it(this, 0);
  it.skip();
  return it;
}

void BlockRange::iterator::skip() {
  while (pos_ < range_->limit_ && !range_->matches(pos_)) ++pos_;
}

BlockRange::iterator& BlockRange::iterator::operator++() {
  ++pos_;
  skip();
  return *this;
}

BlockHandle BlockRange::iterator::operator*() const {
  const CompressedStore& store = *range_->store_;
  if (pos_ == range_->limit_) {
    const LayerStaging& st = store.state_->staging[range_->layer_];
    return BlockHandle{nullptr, {}, st.start, st.start + st.count};
  }
  const Record& r = store.state_->records[pos_];
  return BlockHandle{&r.entry, {r.data, r.entry.byte_len}, r.entry.token_start, r.entry.token_end};
}

// ---------------------------------------------------------------------------
// Statistics

std::optional<double> KindStats::compression_ratio() const {
  if (compressed_bytes == 0) return std::nullopt;
  return static_cast<double>(raw_bytes) / static_cast<double>(compressed_bytes);
}

std::optional<double> KindStats::compression_ratio_with_staging() const {
  if (compressed_bytes + staging_bytes == 0) return std::nullopt;
  return static_cast<double>(raw_bytes + staging_bytes) / static_cast<double>(compressed_bytes + staging_bytes);
}

std::optional<double> KindStats::quant_only_ratio() const {
  if (quant_only_bytes == 0) return std::nullopt;
  return static_cast<double>(raw_bytes) / static_cast<double>(quant_only_bytes);
}

KindStats& KindStats::operator+=(const KindStats& o) {
  blocks += o.blocks;
  compressed_tokens += o.compressed_tokens;
  compressed_bytes += o.compressed_bytes;
  raw_bytes += o.raw_bytes;
  staging_tokens += o.staging_tokens;
  staging_bytes += o.staging_bytes;
  quant_only_bytes += o.quant_only_bytes;
  for (std::size_t i = 0; i < width_histogram.size(); ++i) width_histogram[i] += o.width_histogram[i];
  return *this;
}

StatsReport CompressedStore::snapshot_stats() const {
  const State& s = *state_;
  StatsReport report;
  report.layers.resize(s.shape.layers);
  for (std::uint32_t l = 0; l < s.shape.layers; ++l) report.layers[l].layer = l;

  const std::size_t n = block_count();
  for (std::size_t i = 0; i < n; ++i) {
    const Record& r = s.records[i];
    const BlockDirectoryEntry& e = r.entry;
    KindStats& ks = e.kind == Kind::K ? report.layers[e.layer].k : report.layers[e.layer].v;
    const BlockView view({r.data, e.byte_len});
    ++ks.blocks;
    ks.compressed_tokens += e.rows();
    ks.compressed_bytes += e.byte_len;
    ks.raw_bytes += e.rows() * view.cols() * sizeof(std::uint16_t);
    const QuantParams qp(e.kind == Kind::K ? s.config.rel_scale_k : s.config.rel_scale_v);
    const unsigned bits = bit_width(qp.max_level());
    ks.quant_only_bytes += (e.rows() * view.cols() * bits + 7) / 8 + e.rows() * kTokenParamBytes;
    for (std::size_t p = 0; p < view.pack_count(); ++p) ++ks.width_histogram[view.width(p)];
  }
  for (std::uint32_t l = 0; l < s.shape.layers; ++l) {
    const std::uint64_t staged = s.staging[l].count;
    for (KindStats* ks : {&report.layers[l].k, &report.layers[l].v}) {
      ks->staging_tokens = staged * s.shape.heads;
      ks->staging_bytes = staged * s.shape.token_width() * sizeof(std::uint16_t);
    }
    report.k_total += report.layers[l].k;
    report.v_total += report.layers[l].v;
  }
  report.directory_entries = n;
  report.arena_bytes = n == 0 ? 0 : s.records[n - 1].entry.byte_offset + s.records[n - 1].entry.byte_len;
  return report;
}

StatsReport snapshot_stats(const CompressedStore& store) { return store.snapshot_stats(); }

// ---------------------------------------------------------------------------
// Serialization

std::vector<std::uint8_t> CompressedStore::serialize() const {
  const State& s = *state_;
  std::vector<std::uint8_t> out;
  detail::ByteWriter w(out);
  w.raw(kStoreMagic, 4);
  w.u16(kStoreVersion);
  w.u16(static_cast<std::uint16_t>(s.shape.layers));
  w.u16(static_cast<std::uint16_t>(s.shape.heads));
  w.u16(static_cast<std::uint16_t>(s.shape.head_dim));
  w.u16(static_cast<std::uint16_t>(s.config.block_size));
  w.u16(static_cast<std::uint16_t>(s.config.max_buffer_size));
  w.u8(static_cast<std::uint8_t>(s.config.pack_size));
  w.u8(static_cast<std::uint8_t>(s.config.repack));
  w.u16(0);
  std::uint64_t bits;
  std::memcpy(&bits, &s.config.rel_scale_k, sizeof bits);
  w.u64(bits);
  std::memcpy(&bits, &s.config.rel_scale_v, sizeof bits);
  w.u64(bits);

  const auto arena = arena_bytes();
  w.u64(arena.size());
  w.bytes(arena);

  const std::size_t n = block_count();
  w.u32(static_cast<std::uint32_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const BlockDirectoryEntry& e = s.records[i].entry;
    w.u8(static_cast<std::uint8_t>(e.kind));
    w.u8(0);
    w.u16(static_cast<std::uint16_t>(e.layer));
    w.u16(static_cast<std::uint16_t>(e.head));
    w.u16(static_cast<std::uint16_t>(e.rows()));
    w.u64(e.token_start);
    w.u64(e.byte_offset);
    w.u32(e.byte_len);
    for (std::uint64_t t : e.permutation) w.u8(static_cast<std::uint8_t>(t - e.token_start));
  }

  const std::size_t width = s.shape.token_width();
  for (const LayerStaging& st : s.staging) {
    w.u64(st.start);
    w.u32(static_cast<std::uint32_t>(st.count));
    for (std::size_t i = 0; i < st.count * width; ++i) w.u16(st.k[i]);
    for (std::size_t i = 0; i < st.count * width; ++i) w.u16(st.v[i]);
  }
  return out;
}

CompressedStore CompressedStore::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kStoreMagic, 4) != 0) {
    throw Error(ErrorCode::bad_magic, "not a PKKS store");
  }
  detail::ByteReader r(bytes.subspan(4), ErrorCode::truncated);
  const std::uint16_t version = r.u16();
  if (version != kStoreVersion) throw Error(ErrorCode::unsupported_version, "store version " + std::to_string(version));
  StoreShape shape;
  shape.layers = r.u16();
  shape.heads = r.u16();
  shape.head_dim = r.u16();
  StoreConfig config;
  config.block_size = r.u16();
  config.max_buffer_size = r.u16();
  config.pack_size = r.u8();
  const std::uint8_t repack = r.u8();
  if (repack > 2) throw Error(ErrorCode::malformed_header, "unknown repack tag");
  config.repack = static_cast<RepackStrategy>(repack);
  if (r.u16() != 0) throw Error(ErrorCode::malformed_header, "reserved field not zero");
  std::uint64_t bits = r.u64();
  std::memcpy(&config.rel_scale_k, &bits, sizeof bits);
  bits = r.u64();
  std::memcpy(&config.rel_scale_v, &bits, sizeof bits);

  CompressedStore store = [&] {
    try {
      return CompressedStore(shape, config);
    } catch (const Error& e) {
      throw Error(ErrorCode::malformed_header, std::string("store config: ") + e.what());
    }
  }();
  State& s = *store.state_;

  const std::uint64_t arena_len = r.u64();
  if (arena_len > r.remaining()) throw Error(ErrorCode::truncated, "arena shorter than declared");
  const auto arena = r.take(static_cast<std::size_t>(arena_len));
  const std::uint8_t* base = arena_len ? s.arena.append(arena) : nullptr;

  const std::uint32_t n = r.u32();
  std::uint64_t expected_offset = 0;
  std::vector<std::uint64_t> next_token(static_cast<std::size_t>(shape.layers) * shape.heads * 2, 0);
  for (std::uint32_t i = 0; i < n; ++i) {
    BlockDirectoryEntry e;
    const std::uint8_t kind = r.u8();
    if (kind > 1 || r.u8() != 0) throw Error(ErrorCode::malformed_header, "bad directory kind");
    e.kind = static_cast<Kind>(kind);
    e.layer = r.u16();
    e.head = r.u16();
    const std::size_t rows = r.u16();
    e.token_start = r.u64();
    e.token_end = e.token_start + rows;
    e.byte_offset = r.u64();
    e.byte_len = r.u32();
    if (e.layer >= shape.layers || e.head >= shape.heads || rows != config.block_size) {
      throw Error(ErrorCode::malformed_header, "directory entry outside store shape");
    }
    if (e.byte_offset != expected_offset || e.byte_offset + e.byte_len > arena_len) {
      throw Error(ErrorCode::malformed_header, "directory entry byte range not contiguous");
    }
    expected_offset += e.byte_len;
    std::uint64_t& next = next_token[(static_cast<std::size_t>(e.layer) * shape.heads + e.head) * 2 + kind];
    if (e.token_start != next) throw Error(ErrorCode::malformed_header, "directory token ranges not contiguous");
    next = e.token_end;
    const auto perm = r.take(rows);
    e.permutation.resize(rows);
    std::vector<bool> seen(rows, false);
    for (std::size_t j = 0; j < rows; ++j) {
      if (perm[j] >= rows || seen[perm[j]]) throw Error(ErrorCode::malformed_header, "permutation is not a bijection");
      seen[perm[j]] = true;
      e.permutation[j] = e.token_start + perm[j];
    }
    const BlockView view({base + e.byte_offset, e.byte_len});
    if (view.rows() != rows || view.cols() != shape.head_dim || view.kind() != e.kind) {
      throw Error(ErrorCode::malformed_header, "block header disagrees with directory entry");
    }
    Record& rec = s.records.emplace_slot();
    rec.entry = std::move(e);
    rec.data = base + rec.entry.byte_offset;
  }
  if (expected_offset != arena_len) throw Error(ErrorCode::malformed_header, "arena has unreferenced bytes");

  const std::size_t width = shape.token_width();
  for (std::uint32_t l = 0; l < shape.layers; ++l) {
    LayerStaging& st = s.staging[l];
    st.start = r.u64();
    st.count = r.u32();
    if (st.count >= config.block_size) throw Error(ErrorCode::malformed_header, "staging holds a full block");
    for (std::uint32_t h = 0; h < shape.heads; ++h) {
      for (std::size_t kind = 0; kind < 2; ++kind) {
        if (next_token[(static_cast<std::size_t>(l) * shape.heads + h) * 2 + kind] != st.start) {
          throw Error(ErrorCode::malformed_header, "staging start disagrees with compressed coverage");
        }
      }
    }
    for (std::size_t i = 0; i < st.count * width; ++i) st.k[i] = r.u16();
    for (std::size_t i = 0; i < st.count * width; ++i) st.v[i] = r.u16();
  }
  if (r.remaining() != 0) throw Error(ErrorCode::malformed_header, "trailing bytes after store");
  s.published_arena.store(arena_len, std::memory_order_relaxed);
  s.records.publish();
  return store;
}

void CompressedStore::save(const std::filesystem::path& path) const { detail::write_file(path.string(), serialize()); }

CompressedStore CompressedStore::load(const std::filesystem::path& path) {
  return parse(detail::read_file(path.string()));
}

}  // namespace packkv
