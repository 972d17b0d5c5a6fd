#pragma once

#include <tsrl/common.hpp>
#include <tsrl/metrics.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace tsrl::harness {

struct Series {
  std::vector<double> steps;
  std::vector<double> values;
};

/// Extracts (step, field) pairs from a metrics JSONL file, skipping records
/// where the field is absent or null.
inline Series read_series(const std::filesystem::path& path, const std::string& field) {
  Series s;
  for (const auto& rec : read_jsonl(path)) {
    if (!rec.contains("step") || !rec.contains(field) || rec[field].is_null()) continue;
    s.steps.push_back(rec["step"].get<double>());
    s.values.push_back(rec[field].get<double>());
  }
  return s;
}

struct BandData {
  std::vector<double> steps, mean, lo, hi;
};

/// Pointwise mean and min/max band over the steps common to all series.
inline BandData build_band(const std::vector<Series>& series) {
  if (series.empty()) throw ArgumentError("plot: no input series");
  std::map<double, std::pair<int, std::vector<double>>> by_step;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.steps.size(); ++i)
      by_step[s.steps[i]].second.push_back(s.values[i]);
  BandData band;
  for (const auto& [step, entry] : by_step) {
    const auto& vals = entry.second;
    if (vals.size() != series.size()) continue;  // keep only fully covered steps
    double sum = 0.0, lo = vals[0], hi = vals[0];
    for (double v : vals) {
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    band.steps.push_back(step);
    band.mean.push_back(sum / static_cast<double>(vals.size()));
    band.lo.push_back(lo);
    band.hi.push_back(hi);
  }
  if (band.steps.empty()) throw ValidationError("plot: series share no common steps");
  return band;
}

/// Learning-curve SVG: mean line plus a min/max band across seeds.
inline std::string render_svg(const BandData& band, const std::string& title,
                              const std::string& ylabel) {
  const double W = 860, H = 520, ml = 80, mr = 30, mt = 50, mb = 60;
  double xmin = band.steps.front(), xmax = band.steps.back();
  double ymin = *std::min_element(band.lo.begin(), band.lo.end());
  double ymax = *std::max_element(band.hi.begin(), band.hi.end());
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) {
    ymax += 1.0;
    ymin -= 1.0;
  }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  auto X = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto Y = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\" "
        "font-family=\"sans-serif\">"
     << title << "</text>\n";

  // band polygon: forward over hi, backward over lo
  os << "<polygon fill=\"#4c72b0\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
  for (std::size_t i = 0; i < band.steps.size(); ++i)
    os << X(band.steps[i]) << "," << Y(band.hi[i]) << " ";
  for (std::size_t i = band.steps.size(); i-- > 0;)
    os << X(band.steps[i]) << "," << Y(band.lo[i]) << " ";
  os << "\"/>\n";

  os << "<polyline fill=\"none\" stroke=\"#4c72b0\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < band.steps.size(); ++i)
    os << X(band.steps[i]) << "," << Y(band.mean[i]) << " ";
  os << "\"/>\n";

  // axes
  os << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
     << H - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
     << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 5.0;
    const double yv = ymin + (ymax - ymin) * k / 5.0;
    os << "<text x=\"" << X(xv) << "\" y=\"" << H - mb + 20
       << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">"
       << static_cast<long long>(xv) << "</text>\n";
    std::ostringstream yl;
    yl.precision(3);
    yl << yv;
    os << "<text x=\"" << ml - 8 << "\" y=\"" << Y(yv) + 4
       << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << yl.str()
       << "</text>\n";
  }
  os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 16
     << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">step</text>\n";
  os << "<text x=\"20\" y=\"" << (mt + H - mb) / 2
     << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
        "transform=\"rotate(-90 20 "
     << (mt + H - mb) / 2 << ")\">" << ylabel << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

/// Renders learning curves for one metrics field across seed files.
inline void plot_metrics(const std::vector<std::filesystem::path>& files,
                         const std::string& field, const std::filesystem::path& out_svg,
                         const std::string& title = "") {
  if (files.empty()) throw ArgumentError("plot: empty input list");
  std::vector<Series> series;
  for (const auto& f : files) {
    Series s = read_series(f, field);
    if (s.steps.empty())
      throw ValidationError("plot: no values for field '" + field + "' in " + f.string());
    series.push_back(std::move(s));
  }
  const BandData band = build_band(series);
  std::ofstream out(out_svg);
  if (!out) throw ArgumentError("plot: cannot write " + out_svg.string());
  out << render_svg(band, title.empty() ? field : title, field);
}

}  // namespace tsrl::harness
