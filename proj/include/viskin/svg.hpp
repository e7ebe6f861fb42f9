#pragma once

#include <string>
#include <vector>

namespace viskin {

struct PlotSeries {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
  bool scatter = false;  // markers only, no polyline
};

/// Self-contained SVG line/scatter plot; no display dependencies. Output is
/// deterministic for equal inputs.
std::string render_svg_plot(const std::vector<PlotSeries>& series, const PlotSpec& spec);

/// Rows of (x, one y per series) as CSV with a header line.
std::string series_to_csv(const std::string& x_name, const std::vector<PlotSeries>& series);

}  // namespace viskin
