#pragma once

// Minimal static SVG charts: lines, shaded bands, scatter points and line
// segments on linear or log-y axes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace mfcscore::svg {

inline std::string escape(const std::string& s) {
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
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  return colors[i % 6];
}

struct Segment {
  double x0, y0, x1, y1;
};

class Chart {
 public:
  Chart(std::string title, std::string xlabel, std::string ylabel, bool log_y = false)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)), log_y_(log_y) {}

  void line(std::vector<double> x, std::vector<double> y, std::string label, std::string color = "",
            bool dashed = false) {
    series_.push_back({Kind::line, std::move(x), std::move(y), {}, {}, std::move(label), pick(color), dashed});
  }
  void band(std::vector<double> x, std::vector<double> lo, std::vector<double> hi, std::string color = "") {
    series_.push_back({Kind::band, std::move(x), std::move(lo), std::move(hi), {}, "", pick(color), false});
  }
  void points(std::vector<double> x, std::vector<double> y, std::string label, std::string color = "") {
    series_.push_back({Kind::points, std::move(x), std::move(y), {}, {}, std::move(label), pick(color), false});
  }
  void segments(std::vector<Segment> segs, std::string label, std::string color = "", bool dashed = false) {
    series_.push_back({Kind::segments, {}, {}, {}, std::move(segs), std::move(label), pick(color), dashed});
  }

  std::string render(int width = 640, int height = 420) const {
    Range xr, yr;
    for (const auto& s : series_) {
      for (double v : s.x) xr.add(v);
      for (double v : s.y) add_y(yr, v);
      for (double v : s.y2) add_y(yr, v);
      for (const auto& g : s.segs) {
        xr.add(g.x0);
        xr.add(g.x1);
        add_y(yr, g.y0);
        add_y(yr, g.y1);
      }
    }
    xr.finish();
    yr.finish();
    const double left = 70, right = 20, top = 40, bottom = 50;
    const double pw = width - left - right, ph = height - top - bottom;
    auto sx = [&](double v) { return left + (v - xr.lo) / (xr.hi - xr.lo) * pw; };
    auto sy = [&](double v) {
      const double t = log_y_ ? std::log10(std::max(v, tiny())) : v;
      return top + ph - (t - yr.lo) / (yr.hi - yr.lo) * ph;
    };

    std::ostringstream o;
    o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title_)
      << "</text>\n"
      << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";

    for (int i = 0; i <= 4; ++i) {
      const double xv = xr.lo + (xr.hi - xr.lo) * i / 4.0;
      const double px = sx(xv);
      o << "<line x1=\"" << num(px) << "\" y1=\"" << top + ph << "\" x2=\"" << num(px) << "\" y2=\""
        << top + ph + 5 << "\" stroke=\"black\"/>\n"
        << "<text x=\"" << num(px) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << num(xv)
        << "</text>\n";
      const double t = yr.lo + (yr.hi - yr.lo) * i / 4.0;
      const double py = top + ph - (t - yr.lo) / (yr.hi - yr.lo) * ph;
      o << "<line x1=\"" << left - 5 << "\" y1=\"" << num(py) << "\" x2=\"" << left << "\" y2=\"" << num(py)
        << "\" stroke=\"black\"/>\n"
        << "<text x=\"" << left - 8 << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">"
        << num(log_y_ ? std::pow(10.0, t) : t) << "</text>\n";
    }
    o << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">"
      << escape(xlabel_) << "</text>\n"
      << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << top + ph / 2 << ")\">" << escape(ylabel_) << "</text>\n";

    int legend = 0;
    for (const auto& s : series_) {
      const std::string dash = s.dashed ? " stroke-dasharray=\"6 4\"" : "";
      switch (s.kind) {
        case Kind::line: {
          o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"" << dash << " points=\"";
          for (std::size_t i = 0; i < s.x.size(); ++i) o << num(sx(s.x[i])) << ',' << num(sy(s.y[i])) << ' ';
          o << "\"/>\n";
          break;
        }
        case Kind::band: {
          o << "<polygon fill=\"" << s.color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
          for (std::size_t i = 0; i < s.x.size(); ++i) o << num(sx(s.x[i])) << ',' << num(sy(s.y2[i])) << ' ';
          for (std::size_t i = s.x.size(); i-- > 0;) o << num(sx(s.x[i])) << ',' << num(sy(s.y[i])) << ' ';
          o << "\"/>\n";
          break;
        }
        case Kind::points: {
          o << "<g fill=\"" << s.color << "\" fill-opacity=\"0.6\">\n";
          for (std::size_t i = 0; i < s.x.size(); ++i) {
            o << "<circle cx=\"" << num(sx(s.x[i])) << "\" cy=\"" << num(sy(s.y[i])) << "\" r=\"1.8\"/>\n";
          }
          o << "</g>\n";
          break;
        }
        case Kind::segments: {
          o << "<g stroke=\"" << s.color << "\" stroke-width=\"1.2\"" << dash << ">\n";
          for (const auto& g : s.segs) {
            o << "<line x1=\"" << num(sx(g.x0)) << "\" y1=\"" << num(sy(g.y0)) << "\" x2=\"" << num(sx(g.x1))
              << "\" y2=\"" << num(sy(g.y1)) << "\"/>\n";
          }
          o << "</g>\n";
          break;
        }
      }
      if (!s.label.empty()) {
        const double ly = top + 14 + 16 * legend++;
        o << "<line x1=\"" << left + pw - 140 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw - 118
          << "\" y2=\"" << ly - 4 << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"" << dash << "/>\n"
          << "<text x=\"" << left + pw - 112 << "\" y=\"" << ly << "\">" << escape(s.label) << "</text>\n";
      }
    }
    o << "</svg>\n";
    return o.str();
  }

 private:
  enum class Kind { line, band, points, segments };
  struct Series {
    Kind kind;
    std::vector<double> x, y, y2;
    std::vector<Segment> segs;
    std::string label;
    std::string color;
    bool dashed;
  };
  struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void add(double v) {
      if (!std::isfinite(v)) return;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    void finish() {
      if (!(lo <= hi)) lo = 0.0, hi = 1.0;
      if (hi - lo < 1e-12) {
        const double pad = std::max(std::abs(lo) * 0.05, 1e-6);
        lo -= pad;
        hi += pad;
      }
    }
  };

  static double tiny() { return 1e-300; }
  void add_y(Range& r, double v) const {
    if (log_y_) {
      if (v > 0.0) r.add(std::log10(v));
    } else {
      r.add(v);
    }
  }
  std::string pick(const std::string& c) {
    return c.empty() ? palette(next_color_++) : c;
  }

  std::string title_, xlabel_, ylabel_;
  bool log_y_;
  std::vector<Series> series_;
  std::size_t next_color_ = 0;
};

/// Iso-line segments of a scalar field sampled on a regular grid
/// (marching squares; saddle cells take the first pairing).
inline std::vector<Segment> contour(const std::vector<double>& xs, const std::vector<double>& ys,
                                    const std::vector<double>& field, double level) {
  // field is indexed [iy * nx + ix].
  const std::size_t nx = xs.size(), ny = ys.size();
  std::vector<Segment> out;
  auto at = [&](std::size_t ix, std::size_t iy) { return field[iy * nx + ix]; };
  auto lerp = [&](double a, double b, double fa, double fb) { return a + (level - fa) / (fb - fa) * (b - a); };
  for (std::size_t iy = 0; iy + 1 < ny; ++iy) {
    for (std::size_t ix = 0; ix + 1 < nx; ++ix) {
      const double f0 = at(ix, iy), f1 = at(ix + 1, iy), f2 = at(ix + 1, iy + 1), f3 = at(ix, iy + 1);
      const double x0 = xs[ix], x1 = xs[ix + 1], y0 = ys[iy], y1 = ys[iy + 1];
      // Crossing points on the four edges: bottom, right, top, left.
      std::vector<std::pair<double, double>> pts;
      if ((f0 < level) != (f1 < level)) pts.emplace_back(lerp(x0, x1, f0, f1), y0);
      if ((f1 < level) != (f2 < level)) pts.emplace_back(x1, lerp(y0, y1, f1, f2));
      if ((f3 < level) != (f2 < level)) pts.emplace_back(lerp(x0, x1, f3, f2), y1);
      if ((f0 < level) != (f3 < level)) pts.emplace_back(x0, lerp(y0, y1, f0, f3));
      for (std::size_t k = 0; k + 1 < pts.size(); k += 2) {
        out.push_back({pts[k].first, pts[k].second, pts[k + 1].first, pts[k + 1].second});
      }
    }
  }
  return out;
}

}  // namespace mfcscore::svg
