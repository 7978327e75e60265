#include "packkv/fused.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include "packkv/alloc_tracker.hpp"
#include "packkv/bitpack.hpp"
#include "packkv/error.hpp"
#include "packkv/quantizer.hpp"
#include "packkv/rng.hpp"

namespace packkv {

unsigned workers_from_env() {
  const char* env = std::getenv("PACKKV_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || v < 1) return 1;
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  return std::min(static_cast<unsigned>(v), hw);
}

std::string_view to_string(ExecMode mode) noexcept { return mode == ExecMode::fused ? "fused" : "naive"; }

std::size_t context_tokens(const CompressedStore& store, std::uint32_t layer) { return store.total_tokens(layer); }

namespace {

void check_head(const CompressedStore& store, std::uint32_t layer, std::uint32_t head) {
  if (layer >= store.shape().layers) throw Error(ErrorCode::index_out_of_range, "layer " + std::to_string(layer));
  if (head >= store.shape().heads) throw Error(ErrorCode::index_out_of_range, "head " + std::to_string(head));
}

// Visits columns in the physical slot order of `layout`.
template <typename Fn>
inline void for_each_slot(Layout layout, std::size_t cols, Fn&& fn) {
  if (layout == Layout::v_contiguous) {
    for (std::size_t c = 0; c < cols; ++c) fn(c);
  } else {
    for (std::size_t cls = 0; cls < kInterleaveStride; ++cls) {
      for (std::size_t c = cls; c < cols; c += kInterleaveStride) fn(c);
    }
  }
}

struct PackScratch {
  std::vector<std::uint32_t> values;
  std::vector<float> scale;
  std::vector<float> zero;
  std::vector<float> acc;

  explicit PackScratch(std::size_t k) : values(k), scale(k), zero(k), acc(k) {}
};

// scores[j] for the block's rows, written at `out`.
void k_block(const BlockView& view, std::span<const float> q, PackScratch& s, float* out) {
  const std::size_t k = view.pack_size();
  const std::size_t cols = view.cols();
  const std::uint8_t* payload = view.bytes().data() + view.payload_offset();
  std::size_t pack = 0;
  for (std::size_t g = 0; g < view.row_groups(); ++g) {
    for (std::size_t j = 0; j < k; ++j) {
      const TokenParams p = view.token_params(g * k + j);
      s.scale[j] = p.scale;
      s.zero[j] = p.zero_point;
      s.acc[j] = 0.0f;
    }
    for_each_slot(view.layout(), cols, [&](std::size_t c) {
      const unsigned w = view.width(pack);
      unpack_values(payload, w, view.minimum(pack), s.values);
      payload += payload_bytes(k, w);
      ++pack;
      const float qc = q[c];
      for (std::size_t j = 0; j < k; ++j) {
        s.acc[j] += (static_cast<float>(s.values[j]) * s.scale[j] + s.zero[j]) * qc;
      }
    });
    std::copy(s.acc.begin(), s.acc.end(), out + g * k);
  }
}

// partial[c] += sum_j w[j] * dequant(v[j][c]) over the block's rows.
void v_block(const BlockView& view, const float* w, PackScratch& s, std::span<float> partial) {
  const std::size_t k = view.pack_size();
  const std::size_t cols = view.cols();
  const std::uint8_t* payload = view.bytes().data() + view.payload_offset();
  std::size_t pack = 0;
  for (std::size_t g = 0; g < view.row_groups(); ++g) {
    for (std::size_t j = 0; j < k; ++j) {
      const TokenParams p = view.token_params(g * k + j);
      s.scale[j] = p.scale;
      s.zero[j] = p.zero_point;
    }
    const float* wg = w + g * k;
    for_each_slot(view.layout(), cols, [&](std::size_t c) {
      const unsigned width = view.width(pack);
      unpack_values(payload, width, view.minimum(pack), s.values);
      payload += payload_bytes(k, width);
      ++pack;
      float sum = 0.0f;
      for (std::size_t j = 0; j < k; ++j) {
        sum += wg[j] * (static_cast<float>(s.values[j]) * s.scale[j] + s.zero[j]);
      }
      partial[c] += sum;
    });
  }
}

std::size_t count_blocks(const CompressedStore& store, std::uint32_t layer, std::uint32_t head, Kind kind) {
  std::size_t n = 0;
  for (const BlockHandle h : store.iterate_blocks(layer, kind, head)) {
    if (!h.is_residue()) ++n;
  }
  return n;
}

template <typename Fn>
void run_workers(unsigned workers, Fn&& fn) {
  if (workers <= 1) {
    fn(0u);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back([&fn, w] { fn(w); });
  fn(0u);
  for (auto& t : pool) t.join();
}

// Number of fixed reduction segments for the V path.
constexpr std::size_t kVSegments = 32;

}  // namespace

void fused_k_scores_into(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                         std::span<const float> q, std::span<float> scores, std::span<std::uint64_t> token_map,
                         const ExecOptions& opts) {
  check_head(store, layer, head);
  const std::size_t dim = store.shape().head_dim;
  if (q.size() != dim) throw Error(ErrorCode::dimension_mismatch, "query length != head_dim");
  const std::size_t total = context_tokens(store, layer);
  if (scores.size() != total || token_map.size() != total) {
    throw Error(ErrorCode::dimension_mismatch, "score outputs must hold every context token");
  }
  const unsigned workers = std::max(1u, opts.workers);
  const std::size_t block_rows = store.config().block_size;
  const BlockRange range = store.iterate_blocks(layer, Kind::K, head);

  run_workers(workers, [&](unsigned worker) {
    PackScratch scratch(store.config().pack_size);
    std::size_t ordinal = 0;
    for (const BlockHandle h : range) {
      if (h.is_residue()) break;
      if (ordinal % workers == worker) {
        const BlockView view(h.bytes);
        const std::size_t at = ordinal * block_rows;
        k_block(view, q, scratch, scores.data() + at);
        std::copy(h.entry->permutation.begin(), h.entry->permutation.end(), token_map.begin() + static_cast<std::ptrdiff_t>(at));
      }
      ++ordinal;
    }
  });

  const std::size_t staged = store.staged_tokens(layer);
  const std::size_t at = total - staged;
  const std::uint64_t start = store.staging_start(layer);
  for (std::size_t r = 0; r < staged; ++r) {
    const auto row = store.staged_row(layer, Kind::K, head, r);
    float acc = 0.0f;
    for (std::size_t c = 0; c < dim; ++c) acc += half_to_float(row[c]) * q[c];
    scores[at + r] = acc;
    token_map[at + r] = start + r;
  }
}

ScoreVector fused_k_scores(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                           std::span<const float> q, const ExecOptions& opts) {
  check_head(store, layer, head);
  ScoreVector out;
  out.scores.resize(context_tokens(store, layer));
  out.token_map.resize(out.scores.size());
  fused_k_scores_into(store, layer, head, q, out.scores, out.token_map, opts);
  return out;
}

void fused_v_output_into(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                         std::span<const float> w, std::span<float> out, const ExecOptions& opts) {
  check_head(store, layer, head);
  const std::size_t dim = store.shape().head_dim;
  const std::size_t total = context_tokens(store, layer);
  if (w.size() != total) throw Error(ErrorCode::dimension_mismatch, "weight vector length != context tokens");
  if (out.size() != dim) throw Error(ErrorCode::dimension_mismatch, "output length != head_dim");

  const std::size_t blocks = count_blocks(store, layer, head, Kind::V);
  const std::size_t block_rows = store.config().block_size;
  const BlockRange range = store.iterate_blocks(layer, Kind::V, head);
  const std::size_t segments = std::min(blocks, kVSegments);
  auto segment_of = [&](std::size_t ordinal) { return ordinal * segments / blocks; };

  // Sums the blocks of one segment, block partials added in ordinal order.
  auto sum_segment = [&](std::size_t seg, PackScratch& scratch, std::span<float> block_partial,
                         std::span<float> seg_partial) {
    std::fill(seg_partial.begin(), seg_partial.end(), 0.0f);
    std::size_t ordinal = 0;
    for (const BlockHandle h : range) {
      if (h.is_residue()) break;
      const std::size_t s = segment_of(ordinal);
      if (s > seg) break;
      if (s == seg) {
        std::fill(block_partial.begin(), block_partial.end(), 0.0f);
        v_block(BlockView(h.bytes), w.data() + ordinal * block_rows, scratch, block_partial);
        for (std::size_t c = 0; c < dim; ++c) seg_partial[c] += block_partial[c];
      }
      ++ordinal;
    }
  };

  std::fill(out.begin(), out.end(), 0.0f);
  const unsigned workers = std::max(1u, std::min<unsigned>(opts.workers, static_cast<unsigned>(std::max<std::size_t>(segments, 1))));
  if (workers <= 1) {
    // Single pass; same association as the parallel path.
    PackScratch scratch(store.config().pack_size);
    std::vector<float> block_partial(dim), seg_partial(dim, 0.0f);
    std::size_t ordinal = 0;
    for (const BlockHandle h : range) {
      if (h.is_residue()) break;
      std::fill(block_partial.begin(), block_partial.end(), 0.0f);
      v_block(BlockView(h.bytes), w.data() + ordinal * block_rows, scratch, block_partial);
      for (std::size_t c = 0; c < dim; ++c) seg_partial[c] += block_partial[c];
      ++ordinal;
      if (ordinal == blocks || segment_of(ordinal) != segment_of(ordinal - 1)) {
        for (std::size_t c = 0; c < dim; ++c) out[c] += seg_partial[c];
        std::fill(seg_partial.begin(), seg_partial.end(), 0.0f);
      }
    }
  } else {
    std::vector<float> partials(segments * dim);
    run_workers(workers, [&](unsigned worker) {
      PackScratch scratch(store.config().pack_size);
      std::vector<float> block_partial(dim);
      for (std::size_t seg = worker; seg < segments; seg += workers) {
        sum_segment(seg, scratch, block_partial, std::span(partials).subspan(seg * dim, dim));
      }
    });
    for (std::size_t seg = 0; seg < segments; ++seg) {
      for (std::size_t c = 0; c < dim; ++c) out[c] += partials[seg * dim + c];
    }
  }

  const std::size_t staged = store.staged_tokens(layer);
  const std::size_t at = total - staged;
  if (staged > 0) {
    std::vector<float> residue(dim, 0.0f);
    for (std::size_t r = 0; r < staged; ++r) {
      const auto row = store.staged_row(layer, Kind::V, head, r);
      const float wr = w[at + r];
      for (std::size_t c = 0; c < dim; ++c) residue[c] += wr * half_to_float(row[c]);
    }
    for (std::size_t c = 0; c < dim; ++c) out[c] += residue[c];
  }
}

std::vector<float> fused_v_output(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                                  std::span<const float> w, const ExecOptions& opts) {
  check_head(store, layer, head);
  std::vector<float> out(store.shape().head_dim);
  fused_v_output_into(store, layer, head, w, out, opts);
  return out;
}

std::vector<float> materialize(const CompressedStore& store, std::uint32_t layer, std::uint32_t head, Kind kind) {
  check_head(store, layer, head);
  const std::size_t dim = store.shape().head_dim;
  std::vector<float> m;
  m.reserve(context_tokens(store, layer) * dim);
  for (const BlockHandle h : store.iterate_blocks(layer, kind, head)) {
    if (h.is_residue()) {
      for (std::size_t r = 0; r < h.tokens(); ++r) {
        for (std::uint16_t b : store.staged_row(layer, kind, head, r)) m.push_back(half_to_float(b));
      }
    } else {
      const std::vector<float> block = dequantize_block(decode_block(BlockView(h.bytes)));
      m.insert(m.end(), block.begin(), block.end());
    }
  }
  return m;
}

namespace {

std::vector<std::uint64_t> token_order(const CompressedStore& store, std::uint32_t layer, std::uint32_t head) {
  std::vector<std::uint64_t> map;
  for (const BlockHandle h : store.iterate_blocks(layer, Kind::K, head)) {
    if (h.is_residue()) {
      for (std::uint64_t t = h.token_start; t < h.token_end; ++t) map.push_back(t);
    } else {
      map.insert(map.end(), h.entry->permutation.begin(), h.entry->permutation.end());
    }
  }
  return map;
}

}  // namespace

ReferenceScores naive_k_scores(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                               std::span<const float> q) {
  check_head(store, layer, head);
  const std::size_t dim = store.shape().head_dim;
  if (q.size() != dim) throw Error(ErrorCode::dimension_mismatch, "query length != head_dim");
  const std::vector<float> m = materialize(store, layer, head, Kind::K);
  ReferenceScores out;
  const std::size_t rows = m.size() / dim;
  out.scores.resize(rows);
  for (std::size_t t = 0; t < rows; ++t) {
    double acc = 0.0;
    for (std::size_t c = 0; c < dim; ++c) acc += static_cast<double>(m[t * dim + c]) * q[c];
    out.scores[t] = acc;
  }
  out.token_map = token_order(store, layer, head);
  return out;
}

std::vector<double> naive_v_output(const CompressedStore& store, std::uint32_t layer, std::uint32_t head,
                                   std::span<const float> w) {
  check_head(store, layer, head);
  const std::size_t dim = store.shape().head_dim;
  const std::vector<float> m = materialize(store, layer, head, Kind::V);
  const std::size_t rows = m.size() / dim;
  if (w.size() != rows) throw Error(ErrorCode::dimension_mismatch, "weight vector length != context tokens");
  std::vector<double> out(dim, 0.0);
  for (std::size_t t = 0; t < rows; ++t) {
    const double wt = w[t];
    for (std::size_t c = 0; c < dim; ++c) out[c] += wt * m[t * dim + c];
  }
  return out;
}

ThroughputReport bench_throughput(const CompressedStore& store, ExecMode mode, Kind kind, unsigned reps,
                                  const ExecOptions& opts) {
  if (reps == 0) throw Error(ErrorCode::invalid_argument, "reps must be >= 1");
  const StoreShape& shape = store.shape();
  const std::size_t dim = shape.head_dim;

  ThroughputReport report;
  report.kind = kind;
  report.mode = mode;
  for (std::uint32_t l = 0; l < shape.layers; ++l) {
    const std::uint64_t tokens = store.total_tokens(l);
    report.tokens += tokens * shape.heads;
    report.bytes_logical += tokens * shape.token_width() * sizeof(std::uint16_t);
    report.bytes_physical += store.staged_tokens(l) * shape.token_width() * sizeof(std::uint16_t);
  }
  for (std::size_t i = 0; i < store.block_count(); ++i) {
    if (store.entry(i).kind == kind) report.bytes_physical += store.entry(i).byte_len;
  }

  // Inputs and fused outputs are prepared outside the timed region.
  SplitMix64 rng(0x5eed);
  std::vector<float> input(kind == Kind::K ? dim : 0);
  std::size_t max_tokens = 0;
  for (std::uint32_t l = 0; l < shape.layers; ++l) max_tokens = std::max<std::size_t>(max_tokens, store.total_tokens(l));
  if (kind == Kind::V) input.resize(max_tokens);
  for (auto& x : input) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  std::vector<float> scores(max_tokens);
  std::vector<std::uint64_t> token_map(max_tokens);
  std::vector<float> out(dim);
  volatile double sink = 0.0;

  const alloc::Scope scope;
  const auto t0 = std::chrono::steady_clock::now();
  for (unsigned rep = 0; rep < reps; ++rep) {
    for (std::uint32_t l = 0; l < shape.layers; ++l) {
      const std::size_t tokens = store.total_tokens(l);
      for (std::uint32_t h = 0; h < shape.heads; ++h) {
        if (kind == Kind::K) {
          if (mode == ExecMode::fused) {
            fused_k_scores_into(store, l, h, input, std::span(scores).first(tokens),
                                std::span(token_map).first(tokens), opts);
            sink = sink + (tokens ? scores[0] : 0.0f);
          } else {
            const auto ref = naive_k_scores(store, l, h, input);
            sink = sink + (tokens ? ref.scores[0] : 0.0);
          }
        } else {
          const auto w = std::span<const float>(input).first(tokens);
          if (mode == ExecMode::fused) {
            fused_v_output_into(store, l, h, w, out, opts);
            sink = sink + out[0];
          } else {
            const auto ref = naive_v_output(store, l, h, w);
            sink = sink + ref[0];
          }
        }
      }
    }
  }
  const auto t1 = std::chrono::steady_clock::now();
  report.wall_ns = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
  report.peak_alloc = scope.peak_bytes();
  report.alloc_tracked = alloc::hook_installed();
  if (report.wall_ns > 0) {
    report.gbps = static_cast<double>(report.bytes_logical) * reps / static_cast<double>(report.wall_ns);
  }
  return report;
}

}  // namespace packkv
