#pragma once

// Minimal SVG charts: line plots with error bars and class-coloured scatter
// panels. Output is a pure function of the inputs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ekd::plot {

struct Series {
  std::string name;
  std::vector<double> x, y, err;
};

struct ScatterPanel {
  std::string title;
  Eigen::MatrixXd coords;  // n x 2
  std::vector<int> labels;
};

inline const char* color(int i) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[((i % 10) + 10) % 10];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
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

struct Range {
  double lo = 0, hi = 1;
  void pad() {
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double m = 0.05 * (hi - lo);
    lo -= m;
    hi += m;
  }
  double map(double v, double a, double b) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
  const double W = 640, H = 420, L = 70, R = 160, T = 40, B = 60;
  Range xr{1e300, -1e300}, yr{1e300, -1e300};
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      xr.lo = std::min(xr.lo, s.x[i]);
      xr.hi = std::max(xr.hi, s.x[i]);
      yr.lo = std::min(yr.lo, s.y[i] - e);
      yr.hi = std::max(yr.hi, s.y[i] + e);
    }
  if (xr.lo > xr.hi) xr = {0, 1};
  if (yr.lo > yr.hi) yr = {0, 1};
  xr.pad();
  yr.pad();
  auto px = [&](double v) { return xr.map(v, L, W - R); };
  auto py = [&](double v) { return yr.map(v, H - B, T); };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) +
                    "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + num(W / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + escape(title) + "</text>\n";
  svg += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(H - B) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(H - B) +
         "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = xr.lo + (xr.hi - xr.lo) * t / 4, yv = yr.lo + (yr.hi - yr.lo) * t / 4;
    svg += "<text x=\"" + num(px(xv)) + "\" y=\"" + num(H - B + 18) + "\" text-anchor=\"middle\">" + num(xv) + "</text>\n";
    svg += "<text x=\"" + num(L - 6) + "\" y=\"" + num(py(yv) + 4) + "\" text-anchor=\"end\">" + num(yv) + "</text>\n";
  }
  svg += "<text x=\"" + num((L + W - R) / 2) + "\" y=\"" + num(H - 15) + "\" text-anchor=\"middle\">" +
         escape(xlabel) + "</text>\n";
  svg += "<text x=\"18\" y=\"" + num((T + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
         num((T + H - B) / 2) + ")\">" + escape(ylabel) + "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* c = color(static_cast<int>(k));
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts += num(px(s.x[i])) + "," + num(py(s.y[i])) + " ";
    if (s.x.size() > 1)
      svg += "<polyline fill=\"none\" stroke=\"" + std::string(c) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      if (e > 0)
        svg += "<line x1=\"" + num(px(s.x[i])) + "\" y1=\"" + num(py(s.y[i] - e)) + "\" x2=\"" + num(px(s.x[i])) +
               "\" y2=\"" + num(py(s.y[i] + e)) + "\" stroke=\"" + c + "\"/>\n";
      svg += "<circle cx=\"" + num(px(s.x[i])) + "\" cy=\"" + num(py(s.y[i])) + "\" r=\"4\" fill=\"" + c + "\"/>\n";
    }
    const double ly = T + 20 * static_cast<double>(k);
    svg += "<rect x=\"" + num(W - R + 15) + "\" y=\"" + num(ly) + "\" width=\"12\" height=\"12\" fill=\"" + c + "\"/>\n";
    svg += "<text x=\"" + num(W - R + 32) + "\" y=\"" + num(ly + 10) + "\">" + escape(s.name) + "</text>\n";
  }
  return svg + "</svg>\n";
}

inline std::string scatter(const std::string& title, const std::vector<ScatterPanel>& panels) {
  const double P = 360, G = 20, T = 50;
  const double W = G + static_cast<double>(panels.size()) * (P + G);
  const double H = T + P + G;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) +
                    "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + num(W / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">" + escape(title) + "</text>\n";
  for (std::size_t k = 0; k < panels.size(); ++k) {
    const auto& p = panels[k];
    const double ox = G + static_cast<double>(k) * (P + G);
    svg += "<rect x=\"" + num(ox) + "\" y=\"" + num(T) + "\" width=\"" + num(P) + "\" height=\"" + num(P) +
           "\" fill=\"none\" stroke=\"#999\"/>\n";
    svg += "<text x=\"" + num(ox + P / 2) + "\" y=\"" + num(T - 8) + "\" text-anchor=\"middle\">" + escape(p.title) +
           "</text>\n";
    Range xr{1e300, -1e300}, yr{1e300, -1e300};
    for (Eigen::Index i = 0; i < p.coords.rows(); ++i) {
      xr.lo = std::min(xr.lo, p.coords(i, 0));
      xr.hi = std::max(xr.hi, p.coords(i, 0));
      yr.lo = std::min(yr.lo, p.coords(i, 1));
      yr.hi = std::max(yr.hi, p.coords(i, 1));
    }
    if (xr.lo > xr.hi) xr = {0, 1};
    if (yr.lo > yr.hi) yr = {0, 1};
    xr.pad();
    yr.pad();
    for (Eigen::Index i = 0; i < p.coords.rows(); ++i) {
      const int label = static_cast<std::size_t>(i) < p.labels.size() ? p.labels[static_cast<std::size_t>(i)] : 0;
      svg += "<circle cx=\"" + num(xr.map(p.coords(i, 0), ox, ox + P)) + "\" cy=\"" +
             num(yr.map(p.coords(i, 1), T + P, T)) + "\" r=\"2.5\" fill=\"" + color(label) +
             "\" fill-opacity=\"0.7\"/>\n";
    }
  }
  return svg + "</svg>\n";
}

}  // namespace ekd::plot
