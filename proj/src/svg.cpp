#include "viskin/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace viskin {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string render_svg_plot(const std::vector<PlotSeries>& series, const PlotSpec& spec) {
  const double width = 640, height = 420;
  const double ml = 70, mr = 20, mt = 40, mb = 50;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const PlotSeries& s : series) {
    for (size_t i = 0; i < s.xs.size(); ++i) {
      double y = s.ys[i];
      if (spec.log_y && y <= 0) continue;
      if (spec.log_y) y = std::log10(y);
      if (!std::isfinite(s.xs[i]) || !std::isfinite(y)) continue;
      xmin = std::min(xmin, s.xs[i]);
      xmax = std::max(xmax, s.xs[i]);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (!std::isfinite(xmin)) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
  auto sy = [&](double y) {
    if (spec.log_y) y = std::log10(std::max(y, 1e-300));
    return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb);
  };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << spec.title << "</text>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-size=\"12\">" << spec.x_label << "</text>\n";
  out << "<text x=\"16\" y=\"" << height / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
      << "transform=\"rotate(-90 16 " << height / 2 << ")\">" << spec.y_label
      << (spec.log_y ? " (log)" : "") << "</text>\n";
  // Axes with a few ticks.
  out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << height - mb
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 4.0;
    const double fy = ymin + (ymax - ymin) * i / 4.0;
    out << "<text x=\"" << sx(fx) << "\" y=\"" << height - mb + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(fx) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\""
        << height - mb - (height - mt - mb) * i / 4.0 + 3
        << "\" text-anchor=\"end\" font-size=\"10\">"
        << fmt(spec.log_y ? std::pow(10.0, fy) : fy) << "</text>\n";
  }
  int color = 0;
  double legend_y = mt + 4;
  for (const PlotSeries& s : series) {
    const char* c = kPalette[color % 8];
    ++color;
    if (!spec.scatter && s.xs.size() > 1) {
      out << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
      for (size_t i = 0; i < s.xs.size(); ++i) {
        if (spec.log_y && s.ys[i] <= 0) continue;
        out << fmt(sx(s.xs[i])) << "," << fmt(sy(s.ys[i])) << " ";
      }
      out << "\"/>\n";
    }
    for (size_t i = 0; i < s.xs.size(); ++i) {
      if (spec.log_y && s.ys[i] <= 0) continue;
      out << "<circle cx=\"" << fmt(sx(s.xs[i])) << "\" cy=\"" << fmt(sy(s.ys[i]))
          << "\" r=\"2.2\" fill=\"" << c << "\"/>\n";
    }
    if (!s.name.empty()) {
      out << "<rect x=\"" << width - mr - 150 << "\" y=\"" << legend_y - 8
          << "\" width=\"10\" height=\"10\" fill=\"" << c << "\"/>\n";
      out << "<text x=\"" << width - mr - 136 << "\" y=\"" << legend_y + 1
          << "\" font-size=\"11\">" << s.name << "</text>\n";
      legend_y += 16;
    }
  }
  out << "</svg>\n";
  return out.str();
}

std::string series_to_csv(const std::string& x_name, const std::vector<PlotSeries>& series) {
  std::ostringstream out;
  out << x_name;
  for (const PlotSeries& s : series) out << "," << s.name;
  out << "\n";
  // Union of x values across series, one row per x.
  std::map<double, std::vector<double>> rows;
  for (size_t si = 0; si < series.size(); ++si)
    for (size_t i = 0; i < series[si].xs.size(); ++i) {
      auto& row = rows[series[si].xs[i]];
      row.resize(series.size(), std::numeric_limits<double>::quiet_NaN());
      row[si] = series[si].ys[i];
    }
  for (const auto& [x, ys] : rows) {
    out << fmt(x);
    for (size_t si = 0; si < series.size(); ++si)
      out << "," << (si < ys.size() ? fmt(ys[si]) : "nan");
    out << "\n";
  }
  return out.str();
}

}  // namespace viskin
