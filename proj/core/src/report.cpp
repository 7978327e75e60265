#include "packkv/report.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace packkv {

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

namespace {

std::string join_params(const ReportRow& row) {
  std::string out;
  for (const auto& [k, v] : row.params) {
    if (!out.empty()) out += ';';
    out += k + '=' + v;
  }
  return out;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

std::string to_csv(const std::vector<ReportRow>& rows) {
  std::string out = "experiment,params,metric,value,units\n";
  for (const ReportRow& r : rows) {
    out += csv_escape(r.experiment) + ',' + csv_escape(join_params(r)) + ',' + csv_escape(r.metric) + ',' +
           (r.value ? format_value(*r.value) : std::string("null")) + ',' + csv_escape(r.units) + '\n';
  }
  return out;
}

std::string to_json(const std::vector<ReportRow>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const ReportRow& r : rows) {
    nlohmann::ordered_json params = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.params) params[k] = v;
    nlohmann::ordered_json o;
    o["experiment"] = r.experiment;
    o["params"] = params;
    o["metric"] = r.metric;
    // Values go through the same fixed-precision rendering as CSV.
    o["value"] = r.value ? nlohmann::ordered_json(std::stod(format_value(*r.value))) : nlohmann::ordered_json(nullptr);
    o["units"] = r.units;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + '\n';
}

std::string to_csv(const std::vector<ThroughputReport>& rows) {
  std::string out = "kind,mode,tokens,bytes_logical,bytes_physical,wall_ns,gbps,peak_alloc\n";
  for (const ThroughputReport& r : rows) {
    out += std::string(to_string(r.kind)) + ',' + std::string(to_string(r.mode)) + ',' + std::to_string(r.tokens) +
           ',' + std::to_string(r.bytes_logical) + ',' + std::to_string(r.bytes_physical) + ',' +
           std::to_string(r.wall_ns) + ',' + format_value(r.gbps) + ',' +
           (r.alloc_tracked ? std::to_string(r.peak_alloc) : std::string("null")) + '\n';
  }
  return out;
}

std::string to_json(const std::vector<ThroughputReport>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const ThroughputReport& r : rows) {
    nlohmann::ordered_json o;
    o["kind"] = std::string(to_string(r.kind));
    o["mode"] = std::string(to_string(r.mode));
    o["tokens"] = r.tokens;
    o["bytes_logical"] = r.bytes_logical;
    o["bytes_physical"] = r.bytes_physical;
    o["wall_ns"] = r.wall_ns;
    o["gbps"] = std::stod(format_value(r.gbps));
    o["peak_alloc"] = r.alloc_tracked ? nlohmann::ordered_json(r.peak_alloc) : nlohmann::ordered_json(nullptr);
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + '\n';
}

std::string to_table(const std::vector<ReportRow>& rows) {
  std::vector<std::array<std::string, 4>> cells;
  cells.push_back({"experiment", "params", "metric", "value"});
  for (const ReportRow& r : rows) {
    cells.push_back({r.experiment, join_params(r), r.metric,
                     (r.value ? format_value(*r.value) : std::string("null")) + (r.units.empty() ? "" : " " + r.units)});
  }
  std::array<std::size_t, 4> width{};
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < 4; ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < 4; ++i) {
      os << row[i];
      if (i + 1 < 4) os << std::string(width[i] - row[i].size() + 2, ' ');
    }
    os << '\n';
  }
  return os.str();
}

namespace {

void kind_rows(std::vector<ReportRow>& out, const std::string& scope, Kind kind, const KindStats& s) {
  auto row = [&](std::string metric, std::optional<double> v, std::string units) {
    out.push_back({"stats", {{"scope", scope}, {"kind", std::string(to_string(kind))}}, std::move(metric), v,
                   std::move(units)});
  };
  row("blocks", static_cast<double>(s.blocks), "count");
  row("compressed_rows", static_cast<double>(s.compressed_tokens), "rows");
  row("compressed_bytes", static_cast<double>(s.compressed_bytes), "bytes");
  row("raw_bytes", static_cast<double>(s.raw_bytes), "bytes");
  row("staging_rows", static_cast<double>(s.staging_tokens), "rows");
  row("staging_bytes", static_cast<double>(s.staging_bytes), "bytes");
  row("compression_ratio", s.compression_ratio(), "x");
  row("compression_ratio_with_staging", s.compression_ratio_with_staging(), "x");
  row("quant_only_ratio", s.quant_only_ratio(), "x");
  for (std::size_t w = 0; w < s.width_histogram.size(); ++w) {
    out.push_back({"stats",
                   {{"scope", scope}, {"kind", std::string(to_string(kind))}, {"width", std::to_string(w)}},
                   "packs_with_width",
                   static_cast<double>(s.width_histogram[w]),
                   "count"});
  }
}

}  // namespace

std::vector<ReportRow> stats_rows(const StatsReport& stats) {
  std::vector<ReportRow> out;
  for (const LayerStats& l : stats.layers) {
    const std::string scope = "layer" + std::to_string(l.layer);
    kind_rows(out, scope, Kind::K, l.k);
    kind_rows(out, scope, Kind::V, l.v);
  }
  kind_rows(out, "total", Kind::K, stats.k_total);
  kind_rows(out, "total", Kind::V, stats.v_total);
  out.push_back({"stats", {{"scope", "total"}}, "arena_bytes", static_cast<double>(stats.arena_bytes), "bytes"});
  out.push_back(
      {"stats", {{"scope", "total"}}, "directory_entries", static_cast<double>(stats.directory_entries), "count"});
  return out;
}

}  // namespace packkv
