#include "packkv/experiments.hpp"

#include <algorithm>
#include <string>

#include "packkv/error.hpp"
#include "packkv/quantizer.hpp"

namespace packkv {

double kivi_baseline_cr(unsigned bit_width, std::size_t group, std::size_t meta_bits_per_group) {
  if (bit_width == 0 || bit_width > 16) throw Error(ErrorCode::invalid_argument, "bit width must be in [1, 16]");
  if (group == 0) throw Error(ErrorCode::invalid_argument, "group must be >= 1");
  return 16.0 * static_cast<double>(group) /
         (static_cast<double>(bit_width) * static_cast<double>(group) + static_cast<double>(meta_bits_per_group));
}

CompressedStore compress_dump(const KvDump& dump, const StoreConfig& config) {
  CompressedStore store(StoreShape{dump.layers, dump.heads, dump.head_dim}, config);
  store.ingest(dump);
  return store;
}

namespace {

std::vector<RepackVector> tiny_instance(const KvDump& dump, const StoreConfig& config, std::size_t tokens) {
  std::vector<QuantBlock> kq, vq;
  for (std::uint32_t h = 0; h < dump.heads; ++h) {
    std::vector<float> k, v;
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t c = 0; c < dump.head_dim; ++c) {
        k.push_back(dump.k_at(0, h).at(t, c));
        v.push_back(dump.v_at(0, h).at(t, c));
      }
    }
    kq.push_back(quantize_token_wise(k, tokens, dump.head_dim, config.rel_scale_k, Kind::K));
    vq.push_back(quantize_token_wise(v, tokens, dump.head_dim, config.rel_scale_v, Kind::V));
  }
  return make_repack_vectors(kq, vq);
}

}  // namespace

RepackComparison repack_compare(const KvDump& dump, const StoreConfig& config,
                                std::span<const RepackStrategy> strategies, std::size_t tiny_tokens,
                                std::size_t tiny_pack_size) {
  RepackComparison cmp;
  cmp.tiny_tokens = tiny_tokens;
  cmp.tiny_pack_size = tiny_pack_size;

  const bool tiny_ok = dump.tokens >= tiny_tokens && tiny_tokens > 0 && tiny_tokens <= kOracleMaxVectors &&
                       tiny_pack_size > 0 && tiny_tokens % tiny_pack_size == 0;
  std::vector<RepackVector> tiny;
  if (tiny_ok) {
    tiny = tiny_instance(dump, config, tiny_tokens);
    cmp.oracle_cost_bits = oracle_optimal(tiny, tiny_pack_size).cost_bits;
  }

  for (RepackStrategy s : strategies) {
    StoreConfig c = config;
    c.repack = s;
    const CompressedStore store = compress_dump(dump, c);
    const StatsReport stats = store.snapshot_stats();
    StrategyResult r{s, stats.k_total, stats.v_total, 0};
    if (tiny_ok) r.tiny_cost_bits = repack(tiny, tiny_pack_size, s).cost_bits;
    cmp.strategies.push_back(r);
  }

  const StrategyResult* none = nullptr;
  for (const auto& r : cmp.strategies) {
    if (r.strategy == RepackStrategy::none) none = &r;
  }
  for (const auto& r : cmp.strategies) {
    for (Kind kind : {Kind::K, Kind::V}) {
      const KindStats& ks = kind == Kind::K ? r.k : r.v;
      const std::vector<std::pair<std::string, std::string>> params = {
          {"strategy", std::string(to_string(r.strategy))}, {"kind", std::string(to_string(kind))}};
      cmp.rows.push_back({"repack_compare", params, "compression_ratio", ks.compression_ratio(), "x"});
      cmp.rows.push_back(
          {"repack_compare", params, "compressed_bytes", static_cast<double>(ks.compressed_bytes), "bytes"});
      if (none != nullptr) {
        const auto base = (kind == Kind::K ? none->k : none->v).compression_ratio();
        const auto cr = ks.compression_ratio();
        std::optional<double> gain;
        if (base && cr) gain = (*cr / *base - 1.0) * 100.0;
        cmp.rows.push_back({"repack_compare", params, "cr_gain_vs_none", gain, "%"});
      }
    }
    if (tiny_ok) {
      cmp.rows.push_back({"repack_compare",
                          {{"strategy", std::string(to_string(r.strategy))},
                           {"tiny_tokens", std::to_string(tiny_tokens)},
                           {"pack_size", std::to_string(tiny_pack_size)}},
                          "tiny_cost_bits",
                          static_cast<double>(r.tiny_cost_bits),
                          "bits"});
    }
  }
  if (tiny_ok) {
    cmp.rows.push_back({"repack_compare",
                        {{"strategy", "oracle"},
                         {"tiny_tokens", std::to_string(tiny_tokens)},
                         {"pack_size", std::to_string(tiny_pack_size)}},
                        "tiny_cost_bits",
                        static_cast<double>(cmp.oracle_cost_bits),
                        "bits"});
  }
  return cmp;
}

PackSweep pack_size_sweep(const KvDump& dump, const StoreConfig& config, std::span<const std::size_t> sizes) {
  PackSweep sweep;
  double best_k = -1.0;
  double best_v = -1.0;
  for (std::size_t k : sizes) {
    StoreConfig c = config;
    c.pack_size = k;
    const CompressedStore store = compress_dump(dump, c);
    const StatsReport stats = store.snapshot_stats();
    sweep.points.push_back({k, stats.k_total, stats.v_total});
    for (Kind kind : {Kind::K, Kind::V}) {
      const KindStats& ks = kind == Kind::K ? stats.k_total : stats.v_total;
      const auto cr = ks.compression_ratio();
      sweep.rows.push_back({"pack_sweep",
                            {{"pack_size", std::to_string(k)}, {"kind", std::string(to_string(kind))}},
                            "compression_ratio",
                            cr,
                            "x"});
      if (cr) {
        double& best = kind == Kind::K ? best_k : best_v;
        if (*cr > best) {
          best = *cr;
          (kind == Kind::K ? sweep.best_k : sweep.best_v) = k;
        }
      }
    }
  }
  sweep.rows.push_back({"pack_sweep", {{"kind", "K"}}, "best_pack_size", static_cast<double>(sweep.best_k), "values"});
  sweep.rows.push_back({"pack_sweep", {{"kind", "V"}}, "best_pack_size", static_cast<double>(sweep.best_v), "values"});
  return sweep;
}

}  // namespace packkv
