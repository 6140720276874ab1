#include "crossfi/plot.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>

#include "crossfi/error.hpp"

namespace crossfi::plot {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const LineChart& chart) {
  if (chart.x_ticks.empty()) throw DataError("plot: no x ticks");
  for (const auto& s : chart.series) {
    if (s.values.size() != chart.x_ticks.size()) throw DataError("plot: series '" + s.name + "' length mismatch");
  }
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  const std::size_t nx = chart.x_ticks.size();
  auto xpos = [&](std::size_t i) { return kLeft + (nx == 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(nx - 1)); };
  auto ypos = [&](double v) { return kTop + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n",
      kWidth, kHeight, kWidth, kHeight);
  svg += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", kWidth, kHeight);
  svg += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                     kLeft + pw / 2, escape(chart.title));

  // axes and grid
  svg += fmt::format("<g class=\"axes\" stroke=\"black\"><line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\"/>"
                     "<line x1=\"{0}\" y1=\"{2}\" x2=\"{3}\" y2=\"{2}\"/></g>\n",
                     kLeft, kTop, kTop + ph, kLeft + pw);
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    svg += fmt::format("<g class=\"ytick\"><line x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"#ddd\"/>"
                       "<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">{:.1f}</text></g>\n",
                       kLeft, ypos(v), kLeft + pw, ypos(v), kLeft - 6, ypos(v) + 4, v);
  }
  for (std::size_t i = 0; i < nx; ++i) {
    svg += fmt::format("<g class=\"xtick\"><line x1=\"{0:.2f}\" y1=\"{1}\" x2=\"{0:.2f}\" y2=\"{2}\" stroke=\"black\"/>"
                       "<text x=\"{0:.2f}\" y=\"{3}\" text-anchor=\"middle\">{4}</text></g>\n",
                       xpos(i), kTop + ph, kTop + ph + 5, kTop + ph + 20, escape(chart.x_ticks[i]));
  }
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", kLeft + pw / 2, kHeight - 15,
                     escape(chart.x_label));
  svg += fmt::format("<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>\n",
                     kTop + ph / 2, escape(chart.y_label));

  double legend_y = kTop + 10;
  auto legend = [&](const std::string& name, const std::string& color, bool dashed) {
    svg += fmt::format("<g class=\"legend\"><line x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"{}\" "
                       "stroke-width=\"2\"{}/><text x=\"{}\" y=\"{:.2f}\">{}</text></g>\n",
                       kLeft + pw + 15, legend_y, kLeft + pw + 40, legend_y, color,
                       dashed ? " stroke-dasharray=\"6 4\"" : "", kLeft + pw + 45, legend_y + 4, escape(name));
    legend_y += 18;
  };

  for (std::size_t s = 0; s < chart.series.size(); ++s) {
    const auto& series = chart.series[s];
    const std::string color = kPalette[s % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < nx; ++i) {
      if (!series.values[i]) continue;
      points += fmt::format("{:.2f},{:.2f} ", xpos(i), ypos(*series.values[i]));
    }
    svg += fmt::format("<polyline class=\"series\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{} points=\"{}\"/>\n",
                       color, series.dashed ? " stroke-dasharray=\"6 4\"" : "", points);
    for (std::size_t i = 0; i < nx; ++i) {
      if (!series.values[i]) continue;
      svg += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", xpos(i),
                         ypos(*series.values[i]), color);
    }
    legend(series.name, color, series.dashed);
  }
  if (chart.reference) {
    svg += fmt::format("<line class=\"reference\" x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"gray\" "
                       "stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>\n",
                       kLeft, ypos(*chart.reference), kLeft + pw, ypos(*chart.reference));
    legend(chart.reference_label, "gray", true);
  }
  svg += "</svg>\n";
  return svg;
}

void write_svg(const LineChart& chart, const std::filesystem::path& path) {
  const std::string svg = render_svg(chart);
  std::ofstream out(path);
  if (!out) throw Error("cannot write figure " + path.string());
  out << svg;
}

}  // namespace crossfi::plot
