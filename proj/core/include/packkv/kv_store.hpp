#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iterator>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "packkv/bitpack.hpp"
#include "packkv/repacker.hpp"
#include "packkv/tensor.hpp"
#include "packkv/types.hpp"

namespace packkv {

struct StoreConfig {
  double rel_scale_k = 0.1;
  double rel_scale_v = 0.2;
  std::size_t pack_size = 16;
  RepackStrategy repack = RepackStrategy::greedy;
  /// Tokens per compressed block.
  std::size_t block_size = 64;
  /// Staging capacity; must be a multiple of block_size.
  std::size_t max_buffer_size = 128;

  /// Throws invalid_argument when the combination is unusable.
  void validate() const;

  friend bool operator==(const StoreConfig&, const StoreConfig&) = default;
};

struct StoreShape {
  std::uint32_t layers = 1;
  std::uint32_t heads = 1;
  std::uint32_t head_dim = 128;

  std::size_t token_width() const noexcept { return static_cast<std::size_t>(heads) * head_dim; }

  friend bool operator==(const StoreShape&, const StoreShape&) = default;
};

struct BlockDirectoryEntry {
  Kind kind = Kind::K;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  std::uint64_t token_start = 0;
  std::uint64_t token_end = 0;
  std::uint64_t byte_offset = 0;
  std::uint32_t byte_len = 0;
  /// Block row -> original token index.
  std::vector<std::uint64_t> permutation;

  std::size_t rows() const noexcept { return static_cast<std::size_t>(token_end - token_start); }

  friend bool operator==(const BlockDirectoryEntry&, const BlockDirectoryEntry&) = default;
};

class CompressedStore;

/// One compressed block or the trailing uncompressed residue of a layer.
struct BlockHandle {
  const BlockDirectoryEntry* entry = nullptr;  // null for the residue
  std::span<const std::uint8_t> bytes;         // encoded block, empty for the residue
  std::uint64_t token_start = 0;
  std::uint64_t token_end = 0;

  bool is_residue() const noexcept { return entry == nullptr; }
  std::size_t tokens() const noexcept { return static_cast<std::size_t>(token_end - token_start); }
};

/// Lazy, allocation-free sequence of the blocks of one (layer, kind[, head])
/// in directory order, followed by exactly one residue handle.
class BlockRange {
 public:
  class iterator {
   public:
    using iterator_category = std::forward_iterator_tag;
    using value_type = BlockHandle;
    using difference_type = std::ptrdiff_t;
    using pointer = void;
    using reference = BlockHandle;

    iterator() = default;
    BlockHandle operator*() const;
    iterator& operator++();
    iterator operator++(int) {
      iterator tmp = *this;
      ++*this;
      return tmp;
    }
    friend bool operator==(const iterator& a, const iterator& b) noexcept { return a.pos_ == b.pos_; }

   private:
    friend class BlockRange;
    iterator(const BlockRange* range, std::size_t pos) : range_(range), pos_(pos) {}
    void skip();

    const BlockRange* range_ = nullptr;
    std::size_t pos_ = 0;  // record index; == limit means residue; limit + 1 is end
  };

  iterator begin() const;
  iterator end() const { return iterator(this, limit_ + 1); }

 private:
  friend class CompressedStore;
  BlockRange(const CompressedStore* store, std::uint32_t layer, Kind kind, std::optional<std::uint32_t> head,
             std::size_t limit)
      : store_(store), layer_(layer), kind_(kind), head_(head), limit_(limit) {}
  bool matches(std::size_t record) const;

  const CompressedStore* store_;
  std::uint32_t layer_;
  Kind kind_;
  std::optional<std::uint32_t> head_;
  std::size_t limit_;
};

/// Token counts are rows summed over heads.
struct KindStats {
  std::uint64_t blocks = 0;
  std::uint64_t compressed_tokens = 0;
  std::uint64_t compressed_bytes = 0;
  /// binary16 bytes of the tokens that were compressed.
  std::uint64_t raw_bytes = 0;
  std::uint64_t staging_tokens = 0;
  std::uint64_t staging_bytes = 0;
  /// Bytes the compressed tokens would take with token-wise quantization
  /// alone: fixed-width integers plus binary16 scale and zero point per row.
  std::uint64_t quant_only_bytes = 0;
  /// Pack counts by bit width 0..15.
  std::array<std::uint64_t, 16> width_histogram{};

  /// raw / compressed; empty when nothing has been compressed.
  std::optional<double> compression_ratio() const;
  /// Same, counting staged tokens as uncompressed on both sides.
  std::optional<double> compression_ratio_with_staging() const;
  std::optional<double> quant_only_ratio() const;

  KindStats& operator+=(const KindStats& other);
};

struct LayerStats {
  std::uint32_t layer = 0;
  KindStats k;
  KindStats v;
};

struct StatsReport {
  std::vector<LayerStats> layers;
  KindStats k_total;
  KindStats v_total;
  std::uint64_t arena_bytes = 0;
  std::uint64_t directory_entries = 0;
};

/// Append-only compressed KV cache. One writer may append while any number
/// of readers traverse published blocks; a block becomes visible only after
/// its bytes and directory entry are complete. Residue (staging) reads are
/// not synchronized with the writer.
class CompressedStore {
 public:
  CompressedStore(StoreShape shape, StoreConfig config);
  ~CompressedStore();
  CompressedStore(CompressedStore&&) noexcept;
  CompressedStore& operator=(CompressedStore&&) noexcept;
  CompressedStore(const CompressedStore&) = delete;
  CompressedStore& operator=(const CompressedStore&) = delete;

  const StoreShape& shape() const noexcept;
  const StoreConfig& config() const noexcept;

  /// Appends one token for `layer`. Each span holds heads x head_dim binary16
  /// values, head-major. Compresses a block once block_size tokens are staged.
  void append_token(std::uint32_t layer, std::span<const std::uint16_t> k_token,
                    std::span<const std::uint16_t> v_token);

  /// Appends every row of the per-head tensors in order; same final state as
  /// calling append_token row by row.
  void compress_batch(std::uint32_t layer, std::span<const HalfTensor> k_heads, std::span<const HalfTensor> v_heads);

  /// Appends every layer of a dump.
  void ingest(const KvDump& dump);

  std::uint64_t total_tokens(std::uint32_t layer) const;
  std::size_t staged_tokens(std::uint32_t layer) const;
  /// Original index of the first staged token.
  std::uint64_t staging_start(std::uint32_t layer) const;
  /// Staged binary16 row (head_dim values) for `head`, staging row `row`.
  std::span<const std::uint16_t> staged_row(std::uint32_t layer, Kind kind, std::uint32_t head, std::size_t row) const;

  /// Number of published directory entries.
  std::size_t block_count() const noexcept;
  const BlockDirectoryEntry& entry(std::size_t index) const;
  std::span<const std::uint8_t> block_bytes(std::size_t index) const;
  /// Copy of the published directory.
  std::vector<BlockDirectoryEntry> directory() const;

  std::uint64_t arena_size() const noexcept;
  /// Contiguous copy of the arena.
  std::vector<std::uint8_t> arena_bytes() const;

  BlockRange iterate_blocks(std::uint32_t layer, Kind kind) const;
  BlockRange iterate_blocks(std::uint32_t layer, Kind kind, std::uint32_t head) const;

  /// Bytes held by staging buffers, independent of how many blocks exist.
  std::size_t staging_capacity_bytes() const noexcept;

  StatsReport snapshot_stats() const;

  // Store file: see docs/FORMATS.md.
  std::vector<std::uint8_t> serialize() const;
  static CompressedStore parse(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static CompressedStore load(const std::filesystem::path& path);

 private:
  struct State;
  friend class BlockRange;
  std::unique_ptr<State> state_;
};

inline constexpr char kStoreMagic[4] = {'P', 'K', 'K', 'S'};
inline constexpr std::uint16_t kStoreVersion = 1;

StatsReport snapshot_stats(const CompressedStore& store);

}  // namespace packkv
