#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace xattn::svg {

// Minimal standalone SVG writer; enough for scatter plots, bar charts and
// banded curves without a plotting dependency.
class Document {
 public:
  Document(int width, int height) : w_(width), h_(height) {
    body_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
          << "\" viewBox=\"0 0 " << w_ << " " << h_ << "\">\n"
          << "<rect width=\"" << w_ << "\" height=\"" << h_ << "\" fill=\"white\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0, const std::string& dash = "") {
    body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
          << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"";
    if (!dash.empty()) body_ << " stroke-dasharray=\"" << dash << "\"";
    body_ << "/>\n";
  }

  void circle(double cx, double cy, double r, const std::string& fill, double opacity = 1.0) {
    body_ << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << r << "\" fill=\"" << fill
          << "\" fill-opacity=\"" << opacity << "\"/>\n";
  }

  void rect(double x, double y, double w, double h, const std::string& fill,
            double opacity = 1.0) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
          << "\" fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\"/>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
                double width = 1.5) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << width
          << "\" points=\"";
    for (const auto& [x, y] : pts) body_ << x << "," << y << " ";
    body_ << "\"/>\n";
  }

  void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& fill,
               double opacity) {
    body_ << "<polygon fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\" points=\"";
    for (const auto& [x, y] : pts) body_ << x << "," << y << " ";
    body_ << "\"/>\n";
  }

  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& anchor = "start", const std::string& fill = "#333") {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\" fill=\"" << fill
          << "\">" << escape(s) << "</text>\n";
  }

  void save(const std::filesystem::path& path) {
    std::ofstream out(path);
    out << body_.str() << "</svg>\n";
  }

  int width() const { return w_; }
  int height() const { return h_; }

 private:
  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        default: out += c;
      }
    }
    return out;
  }

  int w_, h_;
  std::ostringstream body_;
};

struct Frame {
  double x0, y0, x1, y1;          // pixel corners (y0 = bottom, y1 = top)
  double xmin, xmax, ymin, ymax;  // data range
};

// Axes with ticks and numeric labels.
inline Frame make_frame(Document& doc, double xmin, double xmax, double ymin, double ymax,
                        const std::string& xlabel, const std::string& ylabel,
                        const std::string& title) {
  const double left = 60, right = 20, top = 34, bottom = 46;
  Frame f{left, static_cast<double>(doc.height()) - bottom, static_cast<double>(doc.width()) - right,
          top, xmin, xmax, ymin, ymax};
  // frame box
  doc.line(f.x0, f.y1, f.x0, f.y0, "#444");
  doc.line(f.x0, f.y0, f.x1, f.y0, "#444");
  const int ticks = 5;
  for (int i = 0; i <= ticks; ++i) {
    const double tx = xmin + (xmax - xmin) * i / ticks;
    const double ty = ymin + (ymax - ymin) * i / ticks;
    const double pxx = f.x0 + (f.x1 - f.x0) * i / ticks;
    const double pyy = f.y0 - (f.y0 - f.y1) * i / ticks;
    doc.line(pxx, f.y0, pxx, f.y0 + 4, "#444");
    doc.line(f.x0 - 4, pyy, f.x0, pyy, "#444");
    std::ostringstream xs, ys;
    xs.precision(3);
    ys.precision(3);
    xs << tx;
    ys << ty;
    doc.text(pxx, f.y0 + 16, xs.str(), 10, "middle");
    doc.text(f.x0 - 7, pyy + 3, ys.str(), 10, "end");
  }
  doc.text((f.x0 + f.x1) / 2, static_cast<double>(doc.height()) - 8, xlabel, 11, "middle");
  doc.text(14, (f.y0 + f.y1) / 2, ylabel, 11, "middle");
  doc.text((f.x0 + f.x1) / 2, 18, title, 13, "middle");
  return f;
}

// y vs y_hat scatter with the identity line.
inline void scatter_with_identity(const std::filesystem::path& path,
                                  const std::vector<double>& y, const std::vector<double>& y_hat,
                                  const std::string& title) {
  Document doc(420, 420);
  double lo = 1e30, hi = -1e30;
  for (double v : y) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : y_hat) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double pad = 0.06 * (hi - lo + 1e-12);
  auto f = make_frame(doc, lo - pad, hi + pad, lo - pad, hi + pad, "actual BMD (g/cm^2)",
                      "estimated", title);
  auto px = [&](double v) { return f.x0 + (v - f.xmin) / (f.xmax - f.xmin) * (f.x1 - f.x0); };
  auto py = [&](double v) { return f.y0 - (v - f.ymin) / (f.ymax - f.ymin) * (f.y0 - f.y1); };
  doc.line(px(f.xmin), py(f.xmin), px(f.xmax), py(f.xmax), "red", 1.2);
  for (size_t i = 0; i < y.size(); ++i) doc.circle(px(y[i]), py(y_hat[i]), 3, "#2266bb", 0.7);
  doc.save(path);
}

inline void bar_chart(const std::filesystem::path& path, const std::vector<std::string>& labels,
                      const std::vector<double>& values, const std::string& title,
                      double ymax_hint = 0.0) {
  Document doc(std::max(420, 60 + static_cast<int>(labels.size()) * 56), 340);
  double vmax = ymax_hint;
  for (double v : values) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1.0;
  auto f = make_frame(doc, 0, static_cast<double>(labels.size()), 0, vmax * 1.1, "", "", title);
  const double bw = (f.x1 - f.x0) / static_cast<double>(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    const double x = f.x0 + bw * static_cast<double>(i);
    const double h = values[i] / (vmax * 1.1) * (f.y0 - f.y1);
    doc.rect(x + bw * 0.15, f.y0 - h, bw * 0.7, h, "#2266bb", 0.85);
    std::ostringstream vs;
    vs.precision(3);
    vs << values[i];
    doc.text(x + bw / 2, f.y0 - h - 4, vs.str(), 9, "middle");
    doc.text(x + bw / 2, f.y0 + 28, labels[i], 9, "middle");
  }
  doc.save(path);
}

// Curve with a shaded pointwise band (e.g. ROC or PR with bootstrap bands).
inline void curve_with_band(const std::filesystem::path& path, const std::vector<double>& grid,
                            const std::vector<double>& point, const std::vector<double>& lo,
                            const std::vector<double>& hi, const std::string& xlabel,
                            const std::string& ylabel, const std::string& title,
                            bool diagonal = false) {
  Document doc(420, 420);
  auto f = make_frame(doc, 0, 1, 0, 1, xlabel, ylabel, title);
  auto px = [&](double v) { return f.x0 + v * (f.x1 - f.x0); };
  auto py = [&](double v) { return f.y0 - v * (f.y0 - f.y1); };
  std::vector<std::pair<double, double>> band;
  for (size_t i = 0; i < grid.size(); ++i) band.emplace_back(px(grid[i]), py(hi[i]));
  for (size_t i = grid.size(); i-- > 0;) band.emplace_back(px(grid[i]), py(lo[i]));
  doc.polygon(band, "#88aadd", 0.35);
  std::vector<std::pair<double, double>> curve;
  for (size_t i = 0; i < grid.size(); ++i) curve.emplace_back(px(grid[i]), py(point[i]));
  doc.polyline(curve, "#2255aa", 2.0);
  if (diagonal) doc.line(px(0), py(0), px(1), py(1), "#999", 1.0, "4,4");
  doc.save(path);
}

}  // namespace xattn::svg
