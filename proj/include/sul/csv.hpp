#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "sul/errors.hpp"

namespace sul {

/// Shortest decimal string that round-trips to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_view(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

/// Comma-separated writer: header row, LF endings, shortest round-trip floats.
class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) {
    row_strings(header);
  }

  CsvWriter& cell(std::string_view s) {
    sep();
    out_ << s;
    return *this;
  }
  CsvWriter& cell(const char* s) { return cell(std::string_view(s)); }
  CsvWriter& cell(const std::string& s) { return cell(std::string_view(s)); }
  CsvWriter& cell(double v) {
    sep();
    out_ << format_double(v);
    return *this;
  }
  CsvWriter& cell(std::int64_t v) {
    sep();
    out_ << v;
    return *this;
  }
  CsvWriter& cell(int v) { return cell(static_cast<std::int64_t>(v)); }
  CsvWriter& cell(unsigned long v) { return cell(static_cast<unsigned long long>(v)); }
  CsvWriter& cell(unsigned long long v) {
    sep();
    out_ << v;
    return *this;
  }

  void end_row() {
    out_ << '\n';
    first_ = true;
  }

  std::string str() const { return out_.str(); }

 private:
  void row_strings(const std::vector<std::string>& cells) {
    for (const auto& c : cells) cell(c);
    end_row();
  }
  void sep() {
    if (!first_) out_ << ',';
    first_ = false;
  }

  std::ostringstream out_;
  bool first_ = true;
};

}  // namespace sul
