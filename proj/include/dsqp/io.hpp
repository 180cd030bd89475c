#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dsqp/panel.hpp"
#include "dsqp/spatial.hpp"

namespace dsqp {

/// Column roles of a long-format panel CSV (one row per unit and period).
struct PanelSchema {
  std::string unit = "unit";
  std::string time = "time";
  std::string y = "y";
  std::vector<std::string> numeric;
  std::vector<std::string> categorical;
  /// Without an intercept the first categorical keeps all of its levels.
  bool intercept = true;
};

/// Parsed CSV: header plus string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv(std::istream& in);
CsvTable read_csv(const std::filesystem::path& path);

/// Units are ordered by first appearance; periods numerically when every id parses
/// as a number, by first appearance otherwise. Throws SchemaMismatch for missing
/// columns or non-numeric values and UnbalancedPanel for missing or repeated cells.
PanelData ingest_panel(const CsvTable& table, const PanelSchema& schema);
PanelData ingest_panel(const std::filesystem::path& path, const PanelSchema& schema);

/// Long-format writer matching ingest_panel with the default schema (constant omitted).
void write_panel_csv(const PanelData& data, const std::filesystem::path& path);
/// Schema that reads back a file produced by write_panel_csv.
PanelSchema default_schema(const PanelData& data);

/// Weight file: a JSON header line {"n": N, "row_normalized": bool}, an "i,j,w" line,
/// then one zero-based triplet per line.
SpatialWeights read_weights(const std::filesystem::path& path);
SpatialWeights read_weights(std::istream& in);
void write_weights(const SpatialWeights& w, const std::filesystem::path& path);

}  // namespace dsqp
