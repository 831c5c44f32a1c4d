#pragma once

// Minimal line-plot SVG writer. CSVs stay the source of truth.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sul/csv.hpp"

namespace sul {

class SvgPlot {
 public:
  SvgPlot(std::string title, std::string x_label, std::string y_label)
      : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)) {}

  bool log_y = false;
  bool markers = false;

  void add_series(std::string name, std::vector<std::pair<double, double>> pts) {
    series_.push_back({std::move(name), std::move(pts)});
  }

  std::string render(int width = 640, int height = 420) const {
    constexpr double left = 70, right = 150, top = 40, bottom = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series_)
      for (const auto& [x, y] : s.pts) {
        if (!std::isfinite(x) || !usable(y)) continue;
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, ty(y));
        y1 = std::max(y1, ty(y));
      }
    if (!(x0 <= x1)) x0 = 0, x1 = 1;
    if (!(y0 <= y1)) y0 = 0, y1 = 1;
    if (x0 == x1) x0 -= 0.5, x1 += 0.5;
    if (y0 == y1) y0 -= 0.5, y1 += 0.5;
    const double pw = width - left - right, ph = height - top - bottom;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title_)
      << "</text>\n";
    o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double fx = x0 + (x1 - x0) * k / 4.0, fy = y0 + (y1 - y0) * k / 4.0;
      const double ylab = log_y ? std::pow(10.0, fy) : fy;
      o << "<text x=\"" << px(fx) << "\" y=\"" << top + ph + 15 << "\" text-anchor=\"middle\">" << tick(fx)
        << "</text>\n";
      o << "<text x=\"" << left - 5 << "\" y=\"" << top + (1.0 - k / 4.0) * ph + 4 << "\" text-anchor=\"end\">"
        << tick(ylab) << "</text>\n";
    }
    o << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">" << escape(x_label_)
      << "</text>\n";
    o << "<text transform=\"translate(15," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(y_label_) << "</text>\n";

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
    for (std::size_t s = 0; s < series_.size(); ++s) {
      const char* c = colors[s % 7];
      o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& [x, y] : series_[s].pts)
        if (std::isfinite(x) && usable(y)) o << px(x) << ',' << py(y) << ' ';
      o << "\"/>\n";
      if (markers)
        for (const auto& [x, y] : series_[s].pts)
          if (std::isfinite(x) && usable(y))
            o << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"2\" fill=\"" << c << "\"/>\n";
      const double ly = top + 12 + 16.0 * static_cast<double>(s);
      o << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 30 << "\" y2=\"" << ly - 4
        << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
      o << "<text x=\"" << left + pw + 35 << "\" y=\"" << ly << "\">" << escape(series_[s].name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
  }

 private:
  struct Series {
    std::string name;
    std::vector<std::pair<double, double>> pts;
  };

  bool usable(double y) const { return std::isfinite(y) && (!log_y || y > 0.0); }
  double ty(double y) const { return log_y ? std::log10(y) : y; }

  static std::string tick(double v) {
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
  }

  static std::string escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
      if (ch == '<')
        out += "&lt;";
      else if (ch == '>')
        out += "&gt;";
      else if (ch == '&')
        out += "&amp;";
      else
        out += ch;
    }
    return out;
  }

  std::string title_, x_label_, y_label_;
  std::vector<Series> series_;
};

}  // namespace sul
