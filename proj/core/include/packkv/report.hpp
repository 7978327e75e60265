#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "packkv/fused.hpp"
#include "packkv/kv_store.hpp"

namespace packkv {

/// One flat, machine-readable measurement. Every numeric value has units.
struct ReportRow {
  std::string experiment;
  std::vector<std::pair<std::string, std::string>> params;
  std::string metric;
  std::optional<double> value;  // empty = undefined (serialized as null)
  std::string units;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

/// experiment,params,metric,value,units with params joined as k=v;k=v.
std::string to_csv(const std::vector<ReportRow>& rows);
std::string to_json(const std::vector<ReportRow>& rows);

/// kind,mode,tokens,bytes_logical,bytes_physical,wall_ns,gbps,peak_alloc
std::string to_csv(const std::vector<ThroughputReport>& rows);
std::string to_json(const std::vector<ThroughputReport>& rows);

/// Human-readable aligned table.
std::string to_table(const std::vector<ReportRow>& rows);

std::vector<ReportRow> stats_rows(const StatsReport& stats);

/// Fixed-precision decimal rendering used by every writer.
std::string format_value(double v);

}  // namespace packkv
