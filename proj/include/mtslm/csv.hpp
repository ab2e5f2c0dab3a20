#pragma once

// Minimal CSV writing/reading for report tables. Numbers are printed with
// 17 significant digits so files round-trip and are byte-stable.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mtslm/errors.hpp"

namespace mtslm {

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }

  std::string str() const {
    std::string out;
    const auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t k = 0; k < cells.size(); ++k) {
        if (k) out += ',';
        out += cells[k];
      }
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << str();
  }
};

/// Parses a plain comma-separated file (no quoting). Every row must have
/// the header's column count; errors name file and line.
inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  std::size_t lineno = 0;
  const auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(s);
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields, found " + std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw FormatError(path.string() + ":1: empty CSV file");
  return t;
}

}  // namespace mtslm
