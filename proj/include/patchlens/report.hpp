#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchlens/errors.hpp"

// Experiment report plumbing: per-sample rows as CSV, aggregates + config +
// seed as JSON. Output is byte-stable: fixed column order, shortest
// round-trip float formatting, "\n" line endings.

namespace patchlens {

constexpr const char* kArtifactVersion = "0.1.0";

using Cell = std::variant<int64_t, double, std::string, bool>;

// Shortest decimal form that round-trips the exact double.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw ShapeError("double formatting failed");
  return std::string(buf, ptr);
}

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string cell_to_string(const Cell& c) {
  if (std::holds_alternative<int64_t>(c)) return std::to_string(std::get<int64_t>(c));
  if (std::holds_alternative<double>(c)) return format_double(std::get<double>(c));
  if (std::holds_alternative<bool>(c)) return std::get<bool>(c) ? "true" : "false";
  return csv_escape(std::get<std::string>(c));
}

}  // namespace detail

// Rectangular table with a fixed column order.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  explicit Table(std::vector<std::string> cols = {}) : columns(std::move(cols)) {}

  void add_row(std::vector<Cell> row) {
    if (row.size() != columns.size())
      throw ShapeError("report row has " + std::to_string(row.size()) + " cells, table has " +
                       std::to_string(columns.size()) + " columns");
    rows.push_back(std::move(row));
  }

  std::string to_csv() const {
    std::string out;
    for (size_t i = 0; i < columns.size(); ++i) {
      if (i) out += ',';
      out += detail::csv_escape(columns[i]);
    }
    out += '\n';
    for (const auto& row : rows) {
      for (size_t i = 0; i < row.size(); ++i) {
        if (i) out += ',';
        out += detail::cell_to_string(row[i]);
      }
      out += '\n';
    }
    return out;
  }
};

struct ExperimentReport {
  std::string experiment;  // id, doubles as the output file stem
  uint64_t seed = 0;
  nlohmann::ordered_json config;      // model + run parameters snapshot
  Table rows;
  nlohmann::ordered_json aggregates;  // recomputable from rows

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["experiment"] = experiment;
    j["version"] = kArtifactVersion;
    j["seed"] = seed;
    j["config"] = config;
    j["row_count"] = rows.rows.size();
    j["aggregates"] = aggregates;
    return j;
  }

  // Writes <dir>/<experiment>.csv and <dir>/<experiment>.json; returns the
  // JSON path.
  std::filesystem::path write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const auto csv_path = dir / (experiment + ".csv");
    const auto json_path = dir / (experiment + ".json");
    {
      std::ofstream out(csv_path, std::ios::binary);
      if (!out) throw LoadError("cannot write " + csv_path.string());
      out << rows.to_csv();
    }
    {
      std::ofstream out(json_path, std::ios::binary);
      if (!out) throw LoadError("cannot write " + json_path.string());
      out << to_json().dump(2) << '\n';
    }
    return json_path;
  }
};

}  // namespace patchlens
