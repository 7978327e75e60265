#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "packkv/attention.hpp"
#include "packkv/error.hpp"
#include "packkv/experiments.hpp"
#include "packkv/fused.hpp"
#include "packkv/kv_store.hpp"
#include "packkv/report.hpp"
#include "packkv/tensor.hpp"

namespace {

using namespace packkv;

enum Exit : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kIoFormat = 3, kInvalidData = 4 };

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
      return kUsage;
    case ErrorCode::io_failure:
    case ErrorCode::bad_magic:
    case ErrorCode::unsupported_version:
    case ErrorCode::truncated:
    case ErrorCode::shape_mismatch:
    case ErrorCode::malformed_header:
    case ErrorCode::payload_length_mismatch:
      return kIoFormat;
    default:
      return kInvalidData;
  }
}

struct ConfigFlags {
  StoreConfig store;
  std::string repack = "greedy";
  std::optional<unsigned> threads;

  void add_to(CLI::App* app, bool with_threads) {
    app->add_option("--rel-scale-k", store.rel_scale_k, "K relative quantization scale")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--rel-scale-v", store.rel_scale_v, "V relative quantization scale")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--pack-size", store.pack_size, "Values per pack")
        ->capture_default_str()
        ->check(CLI::IsMember({1, 2, 4, 8, 16, 32}));
    app->add_option("--repack", repack, "Repacking strategy")
        ->capture_default_str()
        ->check(CLI::IsMember({"none", "greedy", "v_median"}));
    app->add_option("--block", store.block_size, "Tokens per compressed block")->capture_default_str();
    app->add_option("--buffer", store.max_buffer_size, "Staging capacity in tokens")->capture_default_str();
    if (with_threads) app->add_option("--threads", threads, "Worker threads (capped by PACKKV_THREADS)");
  }

  StoreConfig resolve() {
    store.repack = parse_repack_strategy(repack);
    store.validate();
    return store;
  }

  ExecOptions exec() const {
    ExecOptions opts;
    const bool env_set = std::getenv("PACKKV_THREADS") != nullptr;
    const unsigned cap = workers_from_env();
    if (threads) {
      const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
      opts.workers = std::max(1u, std::min(*threads, env_set ? cap : hw));
    } else {
      opts.workers = cap;
    }
    return opts;
  }
};

struct ReportFlags {
  std::string json;
  std::string csv;

  void add_to(CLI::App* app) {
    app->add_option("--json", json, "Write the JSON report to this path ('-' for stdout)");
    app->add_option("--csv", csv, "Write the CSV report to this path ('-' for stdout)");
  }

  bool to_stdout() const { return json == "-" || csv == "-"; }

  template <typename Rows>
  void emit(const Rows& rows) const {
    write(json, [&] { return to_json(rows); });
    write(csv, [&] { return to_csv(rows); });
  }

 private:
  template <typename F>
  static void write(const std::string& path, F render) {
    if (path.empty()) return;
    const std::string text = render();
    if (path == "-") {
      std::cout << text;
      return;
    }
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Error(ErrorCode::io_failure, "cannot write " + path);
  }
};

void print_table(const ReportFlags& report, const std::vector<ReportRow>& rows) {
  if (!report.to_stdout()) std::cout << to_table(rows);
}

struct GenFlags {
  std::string out;
  std::uint32_t layers = 2;
  std::uint32_t heads = 4;
  std::uint32_t head_dim = 128;
  std::uint32_t tokens = 1024;
  SynthProfile profile;
};

KvDump load_or_generate(const std::string& in, std::uint64_t seed, std::uint32_t tokens) {
  if (!in.empty()) return read_dump(in);
  SynthProfile p;
  p.seed = seed;
  return generate_synthetic(p, 1, 4, 128, tokens);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PackKV: error-bounded KV-cache compression with fused decode"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "packkv 0.1.0");

  // gen
  GenFlags gen;
  const std::map<std::string, SynthMode> modes{{"uniform", SynthMode::uniform},
                                               {"banded", SynthMode::channel_banded},
                                               {"token-scaled", SynthMode::token_scaled}};
  auto* cmd_gen = app.add_subcommand("gen", "Generate a synthetic KV dump");
  cmd_gen->add_option("--out", gen.out, "Output dump path")->required();
  cmd_gen->add_option("--layers", gen.layers)->capture_default_str()->check(CLI::Range(1u, 65535u));
  cmd_gen->add_option("--heads", gen.heads)->capture_default_str()->check(CLI::Range(1u, 65535u));
  cmd_gen->add_option("--head-dim", gen.head_dim)->capture_default_str()->check(CLI::Range(1u, 65535u));
  cmd_gen->add_option("--tokens", gen.tokens)->capture_default_str();
  std::string gen_mode = "banded";
  cmd_gen->add_option("--mode", gen_mode)
      ->capture_default_str()
      ->check(CLI::IsMember({"uniform", "banded", "token-scaled"}));
  cmd_gen->add_option("--seed", gen.profile.seed)->capture_default_str();
  cmd_gen->add_option("--amplitude", gen.profile.amplitude)->capture_default_str();
  cmd_gen->add_option("--noise", gen.profile.noise)->capture_default_str();
  cmd_gen->add_option("--regimes", gen.profile.regimes)->capture_default_str()->check(CLI::Range(1u, 1u << 16));
  cmd_gen->add_option("--regime-amplitude", gen.profile.regime_amplitude)->capture_default_str();

  // compress
  ConfigFlags compress_cfg;
  std::string compress_in, compress_out;
  auto* cmd_compress = app.add_subcommand("compress", "Compress a KV dump into a store file");
  cmd_compress->add_option("--in", compress_in, "Input dump")->required();
  cmd_compress->add_option("--out", compress_out, "Output store")->required();
  compress_cfg.add_to(cmd_compress, false);

  // stats
  std::string stats_in;
  ReportFlags stats_report;
  auto* cmd_stats = app.add_subcommand("stats", "Compression statistics of a store file");
  cmd_stats->add_option("--in", stats_in, "Store file")->required();
  stats_report.add_to(cmd_stats);

  // bench
  std::string bench_in, bench_mode = "both", bench_kind = "both";
  unsigned bench_reps = 3;
  ConfigFlags bench_cfg;
  ReportFlags bench_report;
  auto* cmd_bench = app.add_subcommand("bench", "Fused vs naive decode throughput on a store");
  cmd_bench->add_option("--in", bench_in, "Store file")->required();
  cmd_bench->add_option("--mode", bench_mode)->capture_default_str()->check(CLI::IsMember({"fused", "naive", "both"}));
  cmd_bench->add_option("--kind", bench_kind)->capture_default_str()->check(CLI::IsMember({"k", "v", "both"}));
  cmd_bench->add_option("--reps", bench_reps)->capture_default_str()->check(CLI::Range(1u, 100000u));
  cmd_bench->add_option("--threads", bench_cfg.threads, "Worker threads (capped by PACKKV_THREADS)");
  bench_report.add_to(cmd_bench);

  // verify
  ConfigFlags verify_cfg;
  std::uint64_t verify_seed = 1;
  ReportFlags verify_report;
  auto* cmd_verify = app.add_subcommand("verify", "Run the invariant suite");
  verify_cfg.add_to(cmd_verify, false);
  cmd_verify->add_option("--seed", verify_seed)->capture_default_str();
  verify_report.add_to(cmd_verify);

  // repack-compare
  ConfigFlags cmp_cfg;
  std::string cmp_in;
  std::uint64_t cmp_seed = 7;
  std::uint32_t cmp_tokens = 1024;
  std::vector<std::string> cmp_strategies{"none", "greedy", "v_median"};
  std::size_t tiny_tokens = 8, tiny_pack = 4;
  ReportFlags cmp_report;
  auto* cmd_cmp = app.add_subcommand("repack-compare", "Compression ratio per repacking strategy");
  cmd_cmp->add_option("--in", cmp_in, "Input dump (default: banded synthetic data)");
  cmd_cmp->add_option("--seed", cmp_seed, "Seed for synthetic data")->capture_default_str();
  cmd_cmp->add_option("--tokens", cmp_tokens, "Tokens of synthetic data")->capture_default_str();
  cmd_cmp->add_option("--strategies", cmp_strategies)
      ->capture_default_str()
      ->check(CLI::IsMember({"none", "greedy", "v_median"}))
      ->delimiter(',');
  cmd_cmp->add_option("--tiny-tokens", tiny_tokens)->capture_default_str()->check(CLI::Range(1, 12));
  cmd_cmp->add_option("--tiny-pack-size", tiny_pack)->capture_default_str()->check(CLI::Range(1, 12));
  cmp_cfg.add_to(cmd_cmp, false);
  cmp_report.add_to(cmd_cmp);

  // pack-sweep
  ConfigFlags sweep_cfg;
  std::string sweep_in;
  std::uint64_t sweep_seed = 7;
  std::uint32_t sweep_tokens = 1024;
  std::vector<std::size_t> sweep_sizes{1, 2, 4, 8, 16, 32};
  ReportFlags sweep_report;
  auto* cmd_sweep = app.add_subcommand("pack-sweep", "Compression ratio across pack sizes");
  cmd_sweep->add_option("--in", sweep_in, "Input dump (default: banded synthetic data)");
  cmd_sweep->add_option("--seed", sweep_seed)->capture_default_str();
  cmd_sweep->add_option("--tokens", sweep_tokens)->capture_default_str();
  cmd_sweep->add_option("--sizes", sweep_sizes)
      ->capture_default_str()
      ->check(CLI::IsMember({1, 2, 4, 8, 16, 32}))
      ->delimiter(',');
  sweep_cfg.add_to(cmd_sweep, false);
  sweep_report.add_to(cmd_sweep);

  // kivi-cr
  std::vector<unsigned> kivi_bits{2, 3, 4};
  std::size_t kivi_group = 64, kivi_meta = 32;
  ReportFlags kivi_report;
  auto* cmd_kivi = app.add_subcommand("kivi-cr", "Compression ratio of fixed-width group quantization");
  cmd_kivi->add_option("--bits", kivi_bits)->capture_default_str()->check(CLI::Range(1u, 16u))->delimiter(',');
  cmd_kivi->add_option("--group", kivi_group)->capture_default_str()->check(CLI::PositiveNumber);
  cmd_kivi->add_option("--meta", kivi_meta, "Metadata bits per group")->capture_default_str();
  kivi_report.add_to(cmd_kivi);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (cmd_gen->parsed()) {
      gen.profile.mode = modes.at(gen_mode);
      const KvDump dump = generate_synthetic(gen.profile, gen.layers, gen.heads, gen.head_dim, gen.tokens);
      write_dump(dump, gen.out);
      std::cout << "wrote " << gen.out << ": " << gen.layers << " layers x " << gen.heads << " heads x " << gen.tokens
                << " tokens x " << gen.head_dim << " dims\n";
    } else if (cmd_compress->parsed()) {
      const StoreConfig config = compress_cfg.resolve();
      const KvDump dump = read_dump(compress_in);
      const CompressedStore store = compress_dump(dump, config);
      store.save(compress_out);
      const StatsReport s = store.snapshot_stats();
      std::cout << "wrote " << compress_out << ": " << s.directory_entries << " blocks, " << s.arena_bytes
                << " arena bytes\n";
    } else if (cmd_stats->parsed()) {
      const CompressedStore store = CompressedStore::load(stats_in);
      const auto rows = stats_rows(store.snapshot_stats());
      print_table(stats_report, rows);
      stats_report.emit(rows);
    } else if (cmd_bench->parsed()) {
      const CompressedStore store = CompressedStore::load(bench_in);
      const ExecOptions opts = bench_cfg.exec();
      std::vector<ThroughputReport> rows;
      for (Kind kind : {Kind::K, Kind::V}) {
        if (bench_kind != "both" && bench_kind != (kind == Kind::K ? "k" : "v")) continue;
        for (ExecMode mode : {ExecMode::fused, ExecMode::naive}) {
          if (bench_mode != "both" && bench_mode != to_string(mode)) continue;
          rows.push_back(bench_throughput(store, mode, kind, bench_reps, opts));
        }
      }
      if (!bench_report.to_stdout()) {
        std::cout << "workers=" << opts.workers << "\n" << to_csv(rows);
      }
      bench_report.emit(rows);
    } else if (cmd_verify->parsed()) {
      const VerifyReport report = run_verification(verify_cfg.resolve(), verify_seed);
      if (!verify_report.to_stdout()) {
        for (const CheckResult& c : report.checks) {
          std::cout << (c.passed ? "PASS " : "FAIL ") << c.name;
          if (!c.passed) std::cout << ": " << c.detail;
          std::cout << "\n";
        }
      }
      verify_report.emit(report.rows());
      return report.passed() ? kOk : kVerifyFailed;
    } else if (cmd_cmp->parsed()) {
      const StoreConfig config = cmp_cfg.resolve();
      const KvDump dump = load_or_generate(cmp_in, cmp_seed, cmp_tokens);
      std::vector<RepackStrategy> strategies;
      for (const auto& s : cmp_strategies) strategies.push_back(parse_repack_strategy(s));
      const auto cmp = repack_compare(dump, config, strategies, tiny_tokens, tiny_pack);
      print_table(cmp_report, cmp.rows);
      cmp_report.emit(cmp.rows);
    } else if (cmd_sweep->parsed()) {
      const StoreConfig config = sweep_cfg.resolve();
      const KvDump dump = load_or_generate(sweep_in, sweep_seed, sweep_tokens);
      const auto sweep = pack_size_sweep(dump, config, sweep_sizes);
      print_table(sweep_report, sweep.rows);
      sweep_report.emit(sweep.rows);
    } else if (cmd_kivi->parsed()) {
      std::vector<ReportRow> rows;
      for (unsigned b : kivi_bits) {
        rows.push_back({"kivi_cr",
                        {{"bits", std::to_string(b)},
                         {"group", std::to_string(kivi_group)},
                         {"meta_bits", std::to_string(kivi_meta)}},
                        "compression_ratio",
                        kivi_baseline_cr(b, kivi_group, kivi_meta),
                        "x"});
      }
      print_table(kivi_report, rows);
      kivi_report.emit(rows);
    }
  } catch (const Error& e) {
    std::cerr << "packkv: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "packkv: internal: " << e.what() << "\n";
    return kInvalidData;
  }
  return kOk;
}
