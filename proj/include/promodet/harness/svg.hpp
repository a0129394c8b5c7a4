#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "promodet/errors.hpp"

namespace promodet::harness {

struct Series {
  std::string name;
  std::vector<double> values;
};

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* kColors[] = {"#3b6fb6", "#e8862a", "#4a9a4a", "#c43c3c", "#8a62b3"};
  return kColors[i % 5];
}

inline std::string svg_header(int w, int h, const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
     << "</text>\n";
  return os.str();
}

inline double nice_max(double v) {
  if (v <= 0) return 1;
  const double p = std::pow(10.0, std::floor(std::log10(v)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * p >= v) return m * p;
  }
  return 10 * p;
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot write");
  out << text;
}

}  // namespace detail

// Grouped bars: one group per category, one bar per series.
inline void bar_chart(const std::string& path, const std::string& title,
                      const std::vector<std::string>& categories, const std::vector<Series>& series,
                      const std::string& y_label = "") {
  const int W = 640, H = 400, L = 70, R = 20, T = 40, B = 60;
  double vmax = 0;
  for (const auto& s : series) {
    for (double v : s.values) vmax = std::max(vmax, v);
  }
  vmax = detail::nice_max(vmax);
  std::ostringstream os;
  os << detail::svg_header(W, H, title);
  const double pw = W - L - R, ph = H - T - B;
  for (int k = 0; k <= 4; ++k) {
    const double y = T + ph - ph * k / 4;
    os << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << y << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n<text x=\"" << L - 6 << "\" y=\"" << y + 4
       << "\" text-anchor=\"end\">" << vmax * k / 4 << "</text>\n";
  }
  const double gw = pw / std::max<std::size_t>(categories.size(), 1);
  const double bw = gw * 0.8 / std::max<std::size_t>(series.size(), 1);
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = L + gw * c + gw * 0.1;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = c < series[s].values.size() ? series[s].values[c] : 0;
      const double bh = ph * v / vmax;
      os << "<rect x=\"" << gx + bw * s << "\" y=\"" << T + ph - bh << "\" width=\"" << bw * 0.95
         << "\" height=\"" << bh << "\" fill=\"" << detail::palette(s) << "\"/>\n";
    }
    os << "<text x=\"" << L + gw * (c + 0.5) << "\" y=\"" << T + ph + 18
       << "\" text-anchor=\"middle\">" << categories[c] << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    os << "<rect x=\"" << L + 10 + 130 * s << "\" y=\"" << H - 24
       << "\" width=\"12\" height=\"12\" fill=\"" << detail::palette(s) << "\"/><text x=\""
       << L + 26 + 130 * s << "\" y=\"" << H - 14 << "\">" << series[s].name << "</text>\n";
  }
  if (!y_label.empty()) {
    os << "<text transform=\"translate(16," << T + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << y_label << "</text>\n";
  }
  os << "<line x1=\"" << L << "\" x2=\"" << L << "\" y1=\"" << T << "\" y2=\"" << T + ph
     << "\" stroke=\"black\"/>\n<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << T + ph
     << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n</svg>\n";
  detail::write_file(path, os.str());
}

// Polylines over a shared x axis.
inline void line_chart(const std::string& path, const std::string& title,
                       const std::vector<double>& x, const std::vector<Series>& series) {
  const int W = 640, H = 400, L = 70, R = 20, T = 40, B = 60;
  double ymax = 0, ymin = 0;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (std::isfinite(v)) ymax = std::max(ymax, v), ymin = std::min(ymin, v);
    }
  }
  ymax = detail::nice_max(ymax);
  const double xmin = x.empty() ? 0 : x.front(), xmax = x.empty() ? 1 : std::max(x.back(), xmin + 1);
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double v) { return L + pw * (v - xmin) / (xmax - xmin); };
  auto py = [&](double v) { return T + ph - ph * (v - ymin) / (ymax - ymin); };
  std::ostringstream os;
  os << detail::svg_header(W, H, title);
  for (int k = 0; k <= 4; ++k) {
    const double v = ymin + (ymax - ymin) * k / 4;
    os << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << py(v) << "\" y2=\"" << py(v)
       << "\" stroke=\"#ddd\"/>\n<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4
       << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    os << "<polyline fill=\"none\" stroke=\"" << detail::palette(s) << "\" points=\"";
    for (std::size_t i = 0; i < x.size() && i < series[s].values.size(); ++i) {
      if (std::isfinite(series[s].values[i])) os << px(x[i]) << "," << py(series[s].values[i]) << " ";
    }
    os << "\"/>\n<text x=\"" << L + 10 + 130 * s << "\" y=\"" << H - 14 << "\" fill=\""
       << detail::palette(s) << "\">" << series[s].name << "</text>\n";
  }
  os << "<text x=\"" << L << "\" y=\"" << T + ph + 18 << "\">" << xmin << "</text><text x=\""
     << W - R << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"end\">" << xmax << "</text>\n</svg>\n";
  detail::write_file(path, os.str());
}

}  // namespace promodet::harness
