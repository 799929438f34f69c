#include "cpmlho/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cpmlho/errors.hpp"

namespace cpmlho::csv {

std::size_t Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw FormatError("no column named '" + name + "'");
}

double Table::number(std::size_t row, const std::string& name) const { return parse_number(cell(row, name)); }

std::string format_number(double v) {
  if (!std::isfinite(v)) throw ContractError("refusing to write a non-finite number");
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_optional(double v) { return std::isnan(v) ? std::string() : format_number(v); }

double parse_number(const std::string& cell) {
  double v = 0.0;
  const char* end = cell.data() + cell.size();
  const auto res = std::from_chars(cell.data(), end, v);
  if (cell.empty() || res.ec != std::errc() || res.ptr != end || !std::isfinite(v)) {
    throw FormatError("not a finite number: '" + cell + "'");
  }
  return v;
}

std::optional<double> parse_optional(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  return parse_number(cell);
}

namespace {

void write_line(std::ostream& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].find_first_of(",\"\r\n") != std::string::npos) {
      throw ContractError("csv cell needs quoting: '" + cells[i] + "'");
    }
    if (i) out << ',';
    out << cells[i];
  }
  out << '\n';
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

}  // namespace

void write(std::ostream& out, const Table& table) {
  if (table.header.empty()) throw ContractError("csv table without a header");
  write_line(out, table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) {
      throw ContractError("csv row has " + std::to_string(row.size()) + " cells, header has " +
                          std::to_string(table.header.size()));
    }
    write_line(out, row);
  }
}

void write(const std::filesystem::path& path, const Table& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write(out, table);
  if (!out) throw Error("write failed: " + path.string());
}

Table read(std::istream& in) {
  Table t;
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw FormatError("csv: missing header");
  t.header = split_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    auto cells = split_line(line);
    if (cells.size() != t.header.size()) {
      throw FormatError("csv line " + std::to_string(lineno) + ": " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

Table read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return read(in);
}

}  // namespace cpmlho::csv
