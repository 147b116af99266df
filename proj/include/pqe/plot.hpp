#pragma once

// Time-domain rendering of a single record as CSV rows and a standalone SVG.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>

#include "pqe/error.hpp"
#include "pqe/key_value.hpp"

namespace pqe {

/// "t,v" header followed by one row per sample, t = k / sample_rate.
template <class T>
std::string signal_csv(std::span<const T> v, double sample_rate) {
  require(sample_rate > 0.0, "signal_csv: sample rate must be positive");
  std::string out = "t,v\n";
  for (std::size_t k = 0; k < v.size(); ++k) {
    out += kv::format(static_cast<double>(k) / sample_rate);
    out += ',';
    out += kv::format(static_cast<double>(v[k]));
    out += '\n';
  }
  return out;
}

struct PlotStyle {
  double width = 800.0;
  double height = 320.0;
  double margin = 50.0;
  std::size_t x_ticks = 10;
  std::size_t y_ticks = 4;
};

/// Polyline plot with time on x (seconds) and amplitude on y (pu).
template <class T>
std::string signal_svg(std::span<const T> v, double sample_rate, const std::string& title, const PlotStyle& st = {}) {
  require(sample_rate > 0.0, "signal_svg: sample rate must be positive");
  require(!v.empty(), "signal_svg: empty signal");
  const double duration = static_cast<double>(v.size()) / sample_rate;
  double peak = 0.0;
  for (const auto x : v) peak = std::max(peak, std::abs(static_cast<double>(x)));
  const double y_max = peak > 0.0 ? std::ceil(peak * 10.0) / 10.0 : 1.0;
  const double pw = st.width - 2 * st.margin, ph = st.height - 2 * st.margin;
  auto px = [&](double t) { return st.margin + pw * t / duration; };
  auto py = [&](double y) { return st.margin + ph * (0.5 - 0.5 * y / y_max); };

  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n",
                st.width, st.height, st.width, st.height);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"14\" text-anchor=\"middle\">", st.width / 2,
                st.margin / 2);
  s += buf + title + "</text>\n";
  std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"black\"/>\n",
                st.margin, st.margin, pw, ph);
  s += buf;
  for (std::size_t i = 0; i <= st.x_ticks; ++i) {
    const double t = duration * static_cast<double>(i) / static_cast<double>(st.x_ticks);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.2f\" y1=\"%g\" x2=\"%.2f\" y2=\"%g\" stroke=\"#ddd\"/>"
                  "<text x=\"%.2f\" y=\"%g\" font-size=\"10\" text-anchor=\"middle\">%g</text>\n",
                  px(t), st.margin, px(t), st.margin + ph, px(t), st.margin + ph + 14, t);
    s += buf;
  }
  for (std::size_t i = 0; i <= 2 * st.y_ticks; ++i) {
    const double y = y_max * (static_cast<double>(i) / static_cast<double>(st.y_ticks) - 1.0);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%g\" y1=\"%.2f\" x2=\"%g\" y2=\"%.2f\" stroke=\"#ddd\"/>"
                  "<text x=\"%g\" y=\"%.2f\" font-size=\"10\" text-anchor=\"end\">%g</text>\n",
                  st.margin, py(y), st.margin + pw, py(y), st.margin - 4, py(y) + 3, y);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">time (s)</text>\n",
                st.width / 2, st.height - 8);
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"14\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 %g)\">"
                "amplitude (pu)</text>\n",
                st.height / 2, st.height / 2);
  s += buf;
  s += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1\" points=\"";
  for (std::size_t k = 0; k < v.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(static_cast<double>(k) / sample_rate),
                  py(static_cast<double>(v[k])));
    s += buf;
  }
  s += "\"/>\n</svg>\n";
  return s;
}

}  // namespace pqe
