#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cpmlho::csv {

/// Header plus rows of plain cells. Cells never contain commas, quotes or
/// line breaks, so no quoting is needed or produced.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  const std::string& cell(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }
  double number(std::size_t row, const std::string& name) const;
};

/// Shortest decimal text that parses back to exactly `v`. Non-finite values
/// are rejected.
std::string format_number(double v);
/// Empty text for NaN (a value that does not apply), otherwise format_number.
std::string format_optional(double v);
/// Strict parse: the whole cell must be one finite decimal literal.
double parse_number(const std::string& cell);
std::optional<double> parse_optional(const std::string& cell);

void write(std::ostream& out, const Table& table);
void write(const std::filesystem::path& path, const Table& table);
/// Throws FormatError on ragged rows or a missing header.
Table read(std::istream& in);
Table read(const std::filesystem::path& path);

}  // namespace cpmlho::csv
