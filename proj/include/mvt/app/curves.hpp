#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mvt/app/csv.hpp"
#include "mvt/core/error.hpp"
#include "mvt/data/io.hpp"

namespace mvt {

struct Curve {
  std::string label;
  std::vector<double> epochs;
  std::vector<double> accuracy;
  std::optional<double> activation_epoch;
};

struct CurveSet {
  std::vector<Curve> curves;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (const std::logic_error&) {
    return false;
  }
}

inline std::string curve_label(const std::filesystem::path& p) {
  if (p.stem() == "train_log" && p.has_parent_path() && !p.parent_path().filename().empty()) {
    return p.parent_path().filename().string();
  }
  return p.stem().string();
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

/// Reads training logs; unusable ones are skipped with a warning.
inline CurveSet read_curves(const std::vector<std::filesystem::path>& logs) {
  CurveSet set;
  for (const auto& path : logs) {
    try {
      const auto csv = parse_csv(read_file(path));
      const auto ie = csv.column("epoch"), ia = csv.column("test_accuracy");
      const auto ir = csv.column("relabel_active");
      if (ie < 0 || ia < 0) throw FormatError("missing epoch or test_accuracy column");
      if (csv.rows.empty()) throw FormatError("no rows");
      Curve c;
      c.label = detail::curve_label(path);
      for (const auto& row : csv.rows) {
        double e = 0, a = 0;
        if (!detail::parse_double(row[ie], e) || !detail::parse_double(row[ia], a)) {
          throw FormatError("non-numeric value in row starting '" + row[0] + "'");
        }
        c.epochs.push_back(e);
        c.accuracy.push_back(a);
        if (ir >= 0 && row[ir] == "1" && !c.activation_epoch) c.activation_epoch = e;
      }
      set.curves.push_back(std::move(c));
    } catch (const std::exception& e) {
      set.warnings.push_back("skipped " + path.string() + ": " + e.what());
    }
  }
  return set;
}

inline std::string curves_csv(const CurveSet& set) {
  CsvTable t({"run", "epoch", "test_accuracy", "relabel_active"});
  for (const auto& c : set.curves) {
    for (std::size_t i = 0; i < c.epochs.size(); ++i) {
      const bool active = c.activation_epoch && c.epochs[i] >= *c.activation_epoch;
      t.add({c.label, fmt_num(c.epochs[i]), fmt_num(c.accuracy[i]), active ? "1" : "0"});
    }
  }
  return t.str();
}

/// Self-contained SVG: one polyline per run, epoch on x, test accuracy on y,
/// relabel activation marked with a dashed line and a dot.
inline std::string curves_svg(const CurveSet& set, const std::string& title = "Test accuracy") {
  if (set.curves.empty()) throw FormatError("curves: no usable logs");
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  constexpr double W = 760, H = 460, left = 70, right = 190, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;

  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& c : set.curves) {
    for (auto e : c.epochs) xmin = std::min(xmin, e), xmax = std::max(xmax, e);
    for (auto a : c.accuracy) ymin = std::min(ymin, a), ymax = std::max(ymax, a);
  }
  if (xmax - xmin < 1.0) xmax = xmin + 1.0;
  ymin = std::max(0.0, std::floor((ymin - 0.02) * 20.0) / 20.0);
  ymax = std::min(1.0, std::ceil((ymax + 0.02) * 20.0) / 20.0);
  if (ymax - ymin < 0.1) {
    ymin = std::max(0.0, ymin - 0.05);
    ymax = std::min(1.0, ymax + 0.05);
  }
  auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };
  using detail::num;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) +
       "\" viewBox=\"0 0 " + num(W) + " " + num(H) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + num(W) + "\" height=\"" + num(H) + "\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(left + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
       detail::xml_escape(title) + "</text>\n";
  s += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(pw) + "\" height=\"" +
       num(ph) + "\" fill=\"none\" stroke=\"#444\"/>\n";

  for (int i = 0; i <= 5; ++i) {
    const double y = ymin + (ymax - ymin) * i / 5.0;
    s += "<line x1=\"" + num(left) + "\" y1=\"" + num(sy(y)) + "\" x2=\"" + num(left + pw) +
         "\" y2=\"" + num(sy(y)) + "\" stroke=\"#ddd\"/>\n";
    s += "<text x=\"" + num(left - 6) + "\" y=\"" + num(sy(y) + 4) + "\" text-anchor=\"end\">" +
         num(y * 100.0) + "</text>\n";
  }
  const int xticks = static_cast<int>(std::min(10.0, xmax - xmin));
  for (int i = 0; i <= xticks; ++i) {
    const double x = xmin + (xmax - xmin) * i / xticks;
    s += "<text x=\"" + num(sx(x)) + "\" y=\"" + num(top + ph + 18) + "\" text-anchor=\"middle\">" +
         num(x) + "</text>\n";
  }
  s += "<text x=\"" + num(left + pw / 2) + "\" y=\"" + num(H - 18) +
       "\" text-anchor=\"middle\">epoch</text>\n";
  s += "<text x=\"18\" y=\"" + num(top + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
       num(top + ph / 2) + ")\">test accuracy (%)</text>\n";

  for (std::size_t k = 0; k < set.curves.size(); ++k) {
    const auto& c = set.curves[k];
    const std::string color = palette[k % std::size(palette)];
    std::string pts;
    for (std::size_t i = 0; i < c.epochs.size(); ++i) {
      if (i) pts += ' ';
      pts += num(sx(c.epochs[i])) + "," + num(sy(c.accuracy[i]));
    }
    s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + pts +
         "\"/>\n";
    if (c.activation_epoch) {
      const double x = sx(*c.activation_epoch);
      const auto it = std::find(c.epochs.begin(), c.epochs.end(), *c.activation_epoch);
      const double y = sy(c.accuracy[static_cast<std::size_t>(it - c.epochs.begin())]);
      s += "<line x1=\"" + num(x) + "\" y1=\"" + num(top) + "\" x2=\"" + num(x) + "\" y2=\"" +
           num(top + ph) + "\" stroke=\"" + color + "\" stroke-dasharray=\"4 4\" stroke-opacity=\"0.6\"/>\n";
      s += "<circle cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"4\" fill=\"" + color + "\"/>\n";
    }
    const double ly = top + 14 + 18.0 * static_cast<double>(k);
    s += "<line x1=\"" + num(left + pw + 14) + "\" y1=\"" + num(ly - 4) + "\" x2=\"" +
         num(left + pw + 38) + "\" y2=\"" + num(ly - 4) + "\" stroke=\"" + color +
         "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(left + pw + 44) + "\" y=\"" + num(ly) + "\">" +
         detail::xml_escape(c.label) + "</text>\n";
  }
  const double note_y = top + 14 + 18.0 * static_cast<double>(set.curves.size()) + 10;
  s += "<text x=\"" + num(left + pw + 14) + "\" y=\"" + num(note_y) +
       "\" font-size=\"10\" fill=\"#555\">dot: relabel on</text>\n";
  for (std::size_t i = 0; i < set.warnings.size(); ++i) {
    s += "<text x=\"" + num(left) + "\" y=\"" + num(H - 4 - 12.0 * static_cast<double>(i)) +
         "\" font-size=\"9\" fill=\"#a00\">warning: " + detail::xml_escape(set.warnings[i]) +
         "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace mvt
