#pragma once

// Minimal CSV writer/reader. Numbers are written in shortest round-trip form
// so that files are byte-identical across runs and parse back exactly.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "sim2rec/errors.hpp"

namespace sim2rec {

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

class CsvWriter {
 public:
  CsvWriter(std::ostream& os, const std::vector<std::string>& header)
      : os_(os), columns_(header.size()) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) os_ << ',';
      os_ << header[i];
    }
    os_ << '\n';
  }

  template <typename... Ts>
  void row(const Ts&... values) {
    static_assert(sizeof...(Ts) > 0);
    if (sizeof...(Ts) != columns_) throw UsageError("CSV row width does not match header");
    bool first = true;
    (put(values, first), ...);
    os_ << '\n';
  }

  void row_values(const std::vector<double>& values) {
    if (values.size() != columns_) throw UsageError("CSV row width does not match header");
    bool first = true;
    for (double v : values) put(v, first);
    os_ << '\n';
  }

 private:
  template <typename T>
  void put(const T& v, bool& first) {
    if (!first) os_ << ',';
    first = false;
    if constexpr (std::is_floating_point_v<T>) {
      os_ << format_number(static_cast<double>(v));
    } else if constexpr (std::is_same_v<T, bool>) {
      os_ << (v ? 1 : 0);
    } else {
      os_ << v;
    }
  }

  std::ostream& os_;
  std::size_t columns_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw ConfigError("CSV column not found: " + std::string(name));
  }
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      break;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline CsvTable read_csv(std::istream& is) {
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("empty CSV input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split_csv_line(line);
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size()) {
      throw ConfigError("CSV row " + std::to_string(t.rows.size() + 1) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("not an integer: '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace sim2rec
