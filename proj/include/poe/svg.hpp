#pragma once

// Minimal static SVG scatter and line plots.

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "poe/common.hpp"

namespace poe::svg {

struct Series {
  std::string name;
  std::string color;
  std::vector<double> x, y;
};

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> p = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  return p;
}

namespace detail {

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 480, H = 360, M = 48;

  double px(double x) const { return M + (x - x0) / (x1 - x0) * (W - 2 * M); }
  double py(double y) const { return H - M - (y - y0) / (y1 - y0) * (H - 2 * M); }
};

inline Frame frame_for(const std::vector<Series>& series) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (y0 > y1) y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double mx = 0.05 * (x1 - x0), my = 0.05 * (y1 - y0);
  return {x0 - mx, x1 + mx, y0 - my, y1 + my};
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

inline void header(std::ostringstream& o, const Frame& f, const std::string& title, const std::string& xl,
                   const std::string& yl) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\"" << Frame::H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << Frame::W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << escape(title) << "</text>\n"
    << "<rect x=\"" << Frame::M << "\" y=\"" << Frame::M << "\" width=\"" << Frame::W - 2 * Frame::M << "\" height=\""
    << Frame::H - 2 * Frame::M << "\" fill=\"none\" stroke=\"#444\"/>\n";
  o.precision(4);
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4, yv = f.y0 + (f.y1 - f.y0) * i / 4;
    o << "<text x=\"" << f.px(xv) << "\" y=\"" << Frame::H - Frame::M + 14 << "\" text-anchor=\"middle\">" << xv << "</text>\n"
      << "<text x=\"" << Frame::M - 4 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  o << "<text x=\"" << Frame::W / 2 << "\" y=\"" << Frame::H - 8 << "\" text-anchor=\"middle\">" << escape(xl) << "</text>\n"
    << "<text x=\"12\" y=\"" << Frame::H / 2 << "\" transform=\"rotate(-90 12 " << Frame::H / 2
    << ")\" text-anchor=\"middle\">" << escape(yl) << "</text>\n";
}

inline void legend(std::ostringstream& o, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = Frame::M + 12 + 14 * static_cast<double>(i);
    o << "<rect x=\"" << Frame::W - Frame::M - 110 << "\" y=\"" << y - 8 << "\" width=\"8\" height=\"8\" fill=\""
      << series[i].color << "\"/>\n"
      << "<text x=\"" << Frame::W - Frame::M - 98 << "\" y=\"" << y << "\">" << escape(series[i].name) << "</text>\n";
  }
}

}  // namespace detail

inline std::string scatter(const std::string& title, const std::string& xl, const std::string& yl,
                           const std::vector<Series>& series) {
  const auto f = detail::frame_for(series);
  std::ostringstream o;
  detail::header(o, f, title, xl, yl);
  o.precision(5);
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
        o << "<circle cx=\"" << f.px(s.x[i]) << "\" cy=\"" << f.py(s.y[i]) << "\" r=\"1.8\" fill=\"" << s.color
          << "\" fill-opacity=\"0.6\"/>\n";
  detail::legend(o, series);
  o << "</svg>\n";
  return o.str();
}

inline std::string lines(const std::string& title, const std::string& xl, const std::string& yl,
                         const std::vector<Series>& series) {
  const auto f = detail::frame_for(series);
  std::ostringstream o;
  detail::header(o, f, title, xl, yl);
  o.precision(5);
  for (const auto& s : series) {
    o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      if (std::isfinite(s.y[i])) o << f.px(s.x[i]) << ',' << f.py(s.y[i]) << ' ';
    o << "\"/>\n";
  }
  detail::legend(o, series);
  o << "</svg>\n";
  return o.str();
}

}  // namespace poe::svg
