#include "dsqp/io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "dsqp/errors.hpp"
#include "dsqp/posterior.hpp"

namespace dsqp {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// RFC 4180 style: commas, double-quoted fields with "" escapes.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cur += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  const char* b = s.data();
  const char* e = b + s.size();
  if (*b == '+') ++b;
  const auto [ptr, ec] = std::from_chars(b, e, v);
  return ec == std::errc() && ptr == e && std::isfinite(v);
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  bool have_header = false;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size())
      throw SchemaMismatch(fmt::format("line {}: {} fields, header has {}", line_no, cells.size(), t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  if (!have_header) throw SchemaMismatch("empty CSV input");
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_csv(in);
}

PanelData ingest_panel(const CsvTable& table, const PanelSchema& schema) {
  auto col = [&](const std::string& name) {
    const int c = table.column(name);
    if (c < 0) throw SchemaMismatch("column '" + name + "' not found");
    return c;
  };
  const int cu = col(schema.unit), ct = col(schema.time), cy = col(schema.y);
  std::vector<int> cnum, ccat;
  for (const auto& n : schema.numeric) cnum.push_back(col(n));
  for (const auto& n : schema.categorical) ccat.push_back(col(n));

  std::vector<std::string> units, times;
  std::unordered_map<std::string, int> unit_idx, time_idx;
  for (const auto& r : table.rows) {
    if (unit_idx.emplace(r[cu], static_cast<int>(units.size())).second) units.push_back(r[cu]);
    if (time_idx.emplace(r[ct], static_cast<int>(times.size())).second) times.push_back(r[ct]);
  }
  bool numeric_time = !times.empty();
  std::vector<double> tval(times.size());
  for (std::size_t k = 0; k < times.size() && numeric_time; ++k) numeric_time = parse_double(times[k], tval[k]);
  if (numeric_time) {
    std::vector<std::size_t> order(times.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return tval[a] < tval[b]; });
    std::vector<std::string> sorted;
    for (auto k : order) sorted.push_back(times[k]);
    times = std::move(sorted);
    for (std::size_t k = 0; k < times.size(); ++k) time_idx[times[k]] = static_cast<int>(k);
  }
  const int n = static_cast<int>(units.size()), t_len = static_cast<int>(times.size());

  // Category levels in sorted order; the first one is the baseline.
  std::vector<std::vector<std::string>> levels(ccat.size());
  for (std::size_t c = 0; c < ccat.size(); ++c) {
    std::vector<std::string> lv;
    for (const auto& r : table.rows) lv.push_back(r[ccat[c]]);
    std::sort(lv.begin(), lv.end());
    lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
    levels[c] = std::move(lv);
  }

  PanelData d;
  d.has_intercept = schema.intercept;
  d.unit_ids = units;
  d.time_ids = times;
  d.y = Eigen::MatrixXd::Constant(n, t_len, std::nan(""));
  if (schema.intercept) d.covariate_names.push_back("const");
  for (const auto& name : schema.numeric) d.covariate_names.push_back(name);
  for (std::size_t c = 0; c < ccat.size(); ++c) {
    const bool full = !schema.intercept && c == 0;
    for (std::size_t l = full ? 0 : 1; l < levels[c].size(); ++l)
      d.covariate_names.push_back(schema.categorical[c] + "=" + levels[c][l]);
  }
  const int k = static_cast<int>(d.covariate_names.size());
  if (k == 0) throw SchemaMismatch("no regressors: enable the intercept or declare covariates");
  d.x.assign(static_cast<std::size_t>(k), Eigen::MatrixXd::Zero(n, t_len));

  Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n, t_len);
  long line = 1;
  for (const auto& r : table.rows) {
    ++line;
    const int i = unit_idx.at(r[cu]), t = time_idx.at(r[ct]);
    ++seen(i, t);
    double v;
    if (!parse_double(r[cy], v)) throw SchemaMismatch(fmt::format("line {}: response '{}' is not a number", line, r[cy]));
    d.y(i, t) = v;
    int slot = 0;
    if (schema.intercept) d.x[slot++](i, t) = 1.0;
    for (std::size_t c = 0; c < cnum.size(); ++c) {
      if (!parse_double(r[cnum[c]], v))
        throw SchemaMismatch(fmt::format("line {}: {} value '{}' is not a number", line, schema.numeric[c], r[cnum[c]]));
      d.x[slot++](i, t) = v;
    }
    for (std::size_t c = 0; c < ccat.size(); ++c) {
      const bool full = !schema.intercept && c == 0;
      const auto& lv = levels[c];
      const auto pos = std::lower_bound(lv.begin(), lv.end(), r[ccat[c]]) - lv.begin();
      const int first = full ? 0 : 1;
      if (pos >= first) d.x[static_cast<std::size_t>(slot + pos - first)](i, t) = 1.0;
      slot += static_cast<int>(lv.size()) - first;
    }
  }

  std::vector<std::string> problems;
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < t_len; ++t) {
      if (seen(i, t) == 0) problems.push_back(fmt::format("missing (unit {}, period {})", units[i], times[t]));
      if (seen(i, t) > 1) problems.push_back(fmt::format("repeated (unit {}, period {})", units[i], times[t]));
    }
  if (!problems.empty()) {
    std::string msg = fmt::format("unbalanced panel, {} problem cell(s):", problems.size());
    for (std::size_t k = 0; k < std::min<std::size_t>(problems.size(), 20); ++k) msg += "\n  " + problems[k];
    if (problems.size() > 20) msg += "\n  ...";
    throw UnbalancedPanel(msg);
  }
  d.validate();
  return d;
}

PanelData ingest_panel(const std::filesystem::path& path, const PanelSchema& schema) {
  return ingest_panel(read_csv(path), schema);
}

PanelSchema default_schema(const PanelData& data) {
  PanelSchema s;
  s.intercept = data.has_intercept;
  for (int k = data.has_intercept ? 1 : 0; k < data.n_covariates(); ++k)
    s.numeric.push_back(k < static_cast<int>(data.covariate_names.size()) ? data.covariate_names[k]
                                                                          : "x" + std::to_string(k));
  return s;
}

void write_panel_csv(const PanelData& data, const std::filesystem::path& path) {
  const PanelSchema s = default_schema(data);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "unit,time,y";
  for (const auto& n : s.numeric) out << ',' << n;
  out << '\n';
  const int first = data.has_intercept ? 1 : 0;
  for (int i = 0; i < data.n_units(); ++i)
    for (int t = 0; t < data.n_periods(); ++t) {
      const std::string uid = i < static_cast<int>(data.unit_ids.size()) ? data.unit_ids[i] : std::to_string(i);
      const std::string tid = t < static_cast<int>(data.time_ids.size()) ? data.time_ids[t] : std::to_string(t);
      out << uid << ',' << tid << ',' << format_double(data.y(i, t));
      for (int k = first; k < data.n_covariates(); ++k) out << ',' << format_double(data.x[k](i, t));
      out << '\n';
    }
}

SpatialWeights read_weights(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty weight file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaMismatch(std::string("weight file must start with a JSON header line: ") + e.what());
  }
  if (!header.contains("n")) throw SchemaMismatch("weight header lacks 'n'");
  const int n = header.at("n").get<int>();
  const bool normalized = header.value("row_normalized", false);
  std::vector<WeightTriplet> trips;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 3) throw SchemaMismatch(fmt::format("weight line {}: expected i,j,w", line_no));
    double a, b, w;
    if (!parse_double(cells[0], a) || !parse_double(cells[1], b) || !parse_double(cells[2], w)) {
      if (line_no == 2) continue;  // column header
      throw SchemaMismatch(fmt::format("weight line {}: non-numeric entry", line_no));
    }
    if (a != std::floor(a) || b != std::floor(b))
      throw SchemaMismatch(fmt::format("weight line {}: indices must be integers", line_no));
    trips.push_back({static_cast<int>(a), static_cast<int>(b), w});
  }
  SpatialWeights w(n, trips, normalized);
  if (normalized && w.max_row_sum_deviation() > 1e-8)
    throw DataError(fmt::format("weight header claims row normalization but a row sum deviates by {}",
                                w.max_row_sum_deviation()));
  return w;
}

SpatialWeights read_weights(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_weights(in);
}

void write_weights(const SpatialWeights& w, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json{{"n", w.n()}, {"row_normalized", w.row_normalized()}}.dump() << '\n';
  out << "i,j,w\n";
  for (const auto& e : w.entries()) out << e.i << ',' << e.j << ',' << format_double(e.w) << '\n';
}

}  // namespace dsqp
