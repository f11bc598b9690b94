#pragma once

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "mvt/core/error.hpp"

namespace mvt {

/// Fixed-format number rendering so that logs are byte-stable.
inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::string fmt_num(std::size_t v) { return std::to_string(v); }

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<std::string> row) {
    if (row.size() != header_.size()) {
      throw ShapeError("csv: row has " + std::to_string(row.size()) + " cells, header has " +
                       std::to_string(header_.size()));
    }
    rows_.push_back(std::move(row));
  }

  [[nodiscard]] std::string str() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  [[nodiscard]] const std::vector<std::vector<std::string>>& rows() const noexcept { return rows_; }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Minimal reader for the comma-separated files this project writes (no quoting).
struct CsvData {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  [[nodiscard]] std::ptrdiff_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<std::ptrdiff_t>(i);
    }
    return -1;
  }
};

inline CsvData parse_csv(const std::string& text) {
  CsvData d;
  std::stringstream ss(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ls(l);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(ss, line)) throw FormatError("csv: empty file");
  d.header = split(line);
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != d.header.size()) {
      throw FormatError("csv: row '" + line + "' does not match the header");
    }
    d.rows.push_back(std::move(cells));
  }
  return d;
}

}  // namespace mvt
