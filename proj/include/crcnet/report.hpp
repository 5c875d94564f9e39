#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/eval.hpp"
#include "crcnet/training.hpp"

namespace crcnet::report {

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline const char* kMetricsHeader = "fold,variant,miou,fbiou,episodes,seed";

/// Per-fold rows followed by a `mean` row.
inline std::string cv_csv(const eval::CvTable& table, const std::string& variant, std::uint64_t seed) {
  std::string out = std::string(kMetricsHeader) + "\n";
  std::size_t episodes = 0;
  for (const auto& f : table.folds) {
    out += std::to_string(f.fold) + "," + variant + "," + fixed(f.miou) + "," + fixed(f.fbiou) + "," +
           std::to_string(f.episodes) + "," + std::to_string(seed) + "\n";
    episodes += f.episodes;
  }
  out += "mean," + variant + "," + fixed(table.mean_miou) + "," + fixed(table.mean_fbiou) + "," +
         std::to_string(episodes) + "," + std::to_string(seed) + "\n";
  return out;
}

/// One fold-averaged row per variant.
inline std::string ablation_csv(const std::vector<eval::AblationRow>& rows, std::uint64_t seed) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    std::size_t episodes = 0;
    for (const auto& f : r.table.folds) episodes += f.episodes;
    out += "mean," + r.variant + "," + fixed(r.table.mean_miou) + "," + fixed(r.table.mean_fbiou) + "," +
           std::to_string(episodes) + "," + std::to_string(seed) + "\n";
  }
  return out;
}

inline std::string iteration_csv(const std::string& variant, const std::vector<double>& miou) {
  std::string out = "variant,iteration,miou\n";
  for (std::size_t t = 0; t < miou.size(); ++t) out += variant + "," + std::to_string(t + 1) + "," + fixed(miou[t]) + "\n";
  return out;
}

inline std::string train_log_csv(const std::vector<training::TrainLogRow>& log) {
  std::string out = "epoch,step,l_qm,l_sm,l_qm_sub,l_sm_sub,total,miou\n";
  for (const auto& r : log) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fixed(r.l_qm) + "," + fixed(r.l_sm) + "," +
           fixed(r.l_qm_sub) + "," + fixed(r.l_sm_sub) + "," + fixed(r.total) + "," + fixed(r.miou) + "\n";
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::ptrdiff_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  }
};

inline CsvTable parse_csv(const std::string& text, const std::string& origin = "<csv>") {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw CsvError(origin + ":" + std::to_string(number) + ": expected " + std::to_string(t.header.size()) +
                     " fields, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw CsvError(origin + ": empty CSV");
  return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CsvError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), path.string());
}

namespace detail {

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

inline double cell_number(const CsvTable& t, std::size_t row, std::ptrdiff_t col, const std::string& origin) {
  const std::string& s = t.rows[row][static_cast<std::size_t>(col)];
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CsvError(origin + ": row " + std::to_string(row + 2) + ": '" + s + "' is not a number");
  }
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return colors[i % 8];
}

struct Frame {
  double width = 640, height = 400;
  double left = 64, right = 160, top = 40, bottom = 56;
  double plot_w() const { return width - left - right; }
  double plot_h() const { return height - top - bottom; }
};

inline double nice_ceiling(double v) {
  if (v <= 0) return 1.0;
  const double mag = std::pow(10.0, std::floor(std::log10(v)));
  for (double step : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (step * mag >= v) return step * mag;
  return 10 * mag;
}

inline std::string open_svg(const Frame& f, const std::string& title, const std::string& xlabel,
                            const std::string& ylabel, double ymax) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
     << "\" viewBox=\"0 0 " << f.width << " " << f.height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << f.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
  const double x0 = f.left, y0 = f.top + f.plot_h();
  os << "<line x1=\"" << x0 << "\" y1=\"" << f.top << "\" x2=\"" << x0 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 + f.plot_w() << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = ymax * i / 5.0;
    const double y = y0 - f.plot_h() * i / 5.0;
    os << "<line x1=\"" << x0 - 4 << "\" y1=\"" << y << "\" x2=\"" << x0 + f.plot_w() << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << x0 - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fixed(v, 3) << "</text>\n";
  }
  os << "<text x=\"" << x0 + f.plot_w() / 2 << "\" y=\"" << f.height - 14 << "\" text-anchor=\"middle\">"
     << escape(xlabel) << "</text>\n";
  os << "<text transform=\"translate(16," << f.top + f.plot_h() / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(ylabel) << "</text>\n";
  return os.str();
}

inline std::string legend(const Frame& f, const std::vector<std::string>& names) {
  std::ostringstream os;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = f.top + 10 + 20.0 * static_cast<double>(i);
    const double x = f.width - f.right + 16;
    os << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\"" << palette(i) << "\"/>\n";
    os << "<text x=\"" << x + 18 << "\" y=\"" << y + 2 << "\">" << escape(names[i]) << "</text>\n";
  }
  return os.str();
}

inline std::vector<std::string> distinct(const CsvTable& t, std::ptrdiff_t col) {
  std::vector<std::string> out;
  for (const auto& r : t.rows) {
    const auto& v = r[static_cast<std::size_t>(col)];
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

}  // namespace detail

/// mIoU against refinement iteration, one polyline per variant.
inline std::string line_chart(const CsvTable& t, const std::string& title, const std::string& origin = "<csv>") {
  const auto vc = t.column("variant"), ic = t.column("iteration"), mc = t.column("miou");
  if (vc < 0 || ic < 0 || mc < 0) throw CsvError(origin + ": line chart needs variant,iteration,miou columns");
  const auto variants = detail::distinct(t, vc);
  double xmax = 1, ymax = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    xmax = std::max(xmax, detail::cell_number(t, r, ic, origin));
    ymax = std::max(ymax, detail::cell_number(t, r, mc, origin));
  }
  ymax = detail::nice_ceiling(ymax);
  detail::Frame f;
  std::string svg = detail::open_svg(f, title, "refinement iteration", "mIoU", ymax);
  std::ostringstream os;
  const double x0 = f.left, y0 = f.top + f.plot_h();
  auto px = [&](double x) { return x0 + (xmax > 1 ? (x - 1) / (xmax - 1) : 0.5) * f.plot_w(); };
  auto py = [&](double y) { return y0 - y / ymax * f.plot_h(); };
  for (int x = 1; x <= static_cast<int>(xmax); ++x) {
    os << "<text x=\"" << px(x) << "\" y=\"" << y0 + 18 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  }
  for (std::size_t v = 0; v < variants.size(); ++v) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t r = 0; r < t.rows.size(); ++r)
      if (t.rows[r][static_cast<std::size_t>(vc)] == variants[v])
        pts.emplace_back(detail::cell_number(t, r, ic, origin), detail::cell_number(t, r, mc, origin));
    std::sort(pts.begin(), pts.end());
    os << "<polyline fill=\"none\" stroke=\"" << detail::palette(v) << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : pts) os << fixed(px(x), 2) << "," << fixed(py(y), 2) << " ";
    os << "\"/>\n";
    for (const auto& [x, y] : pts)
      os << "<circle cx=\"" << fixed(px(x), 2) << "\" cy=\"" << fixed(py(y), 2) << "\" r=\"3\" fill=\""
         << detail::palette(v) << "\"/>\n";
  }
  return svg + os.str() + detail::legend(f, variants) + "</svg>\n";
}

/// Grouped bars: one group per fold value, one bar (series) per variant.
inline std::string bar_chart(const CsvTable& t, const std::string& title, const std::string& origin = "<csv>") {
  const auto fc = t.column("fold"), vc = t.column("variant"), mc = t.column("miou");
  if (fc < 0 || vc < 0 || mc < 0) throw CsvError(origin + ": bar chart needs fold,variant,miou columns");
  const auto folds = detail::distinct(t, fc);
  const auto variants = detail::distinct(t, vc);
  double ymax = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) ymax = std::max(ymax, detail::cell_number(t, r, mc, origin));
  ymax = detail::nice_ceiling(ymax);
  detail::Frame f;
  std::string svg = detail::open_svg(f, title, "fold", "mIoU", ymax);
  std::ostringstream os;
  const double y0 = f.top + f.plot_h();
  const double group_w = f.plot_w() / static_cast<double>(folds.size());
  const double bar_w = group_w * 0.8 / static_cast<double>(variants.size());
  for (std::size_t g = 0; g < folds.size(); ++g) {
    const double gx = f.left + group_w * static_cast<double>(g) + group_w * 0.1;
    os << "<text x=\"" << gx + group_w * 0.4 << "\" y=\"" << y0 + 18 << "\" text-anchor=\"middle\">"
       << detail::escape(folds[g]) << "</text>\n";
    for (std::size_t v = 0; v < variants.size(); ++v) {
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (t.rows[r][static_cast<std::size_t>(fc)] != folds[g] || t.rows[r][static_cast<std::size_t>(vc)] != variants[v])
          continue;
        const double value = detail::cell_number(t, r, mc, origin);
        const double h = value / ymax * f.plot_h();
        os << "<rect x=\"" << fixed(gx + bar_w * static_cast<double>(v), 2) << "\" y=\"" << fixed(y0 - h, 2)
           << "\" width=\"" << fixed(bar_w * 0.9, 2) << "\" height=\"" << fixed(h, 2) << "\" fill=\""
           << detail::palette(v) << "\"><title>" << detail::escape(variants[v]) << ": " << fixed(value, 4)
           << "</title></rect>\n";
      }
    }
  }
  return svg + os.str() + detail::legend(f, variants) + "</svg>\n";
}

/// Line chart for refinement-curve CSVs (an `iteration` column), grouped bars otherwise.
inline std::string plot_csv(const CsvTable& t, const std::string& title, const std::string& origin = "<csv>") {
  if (t.rows.empty()) throw CsvError(origin + ": no data rows");
  return t.column("iteration") >= 0 ? line_chart(t, title, origin) : bar_chart(t, title, origin);
}

}  // namespace crcnet::report
