#pragma once

// SVG panels for a finished sweep: loss (log scale, with the SVD error as a
// horizontal line), gradient norm, gradient consistency and effective rank.
// One file per panel and optimizer; output bytes depend only on the inputs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "oplora/diagnostics.hpp"
#include "oplora/errors.hpp"
#include "oplora/harness.hpp"

namespace oplora {

inline constexpr double kPlotWidth = 640.0;
inline constexpr double kPlotHeight = 420.0;
inline constexpr double kPlotLeft = 70.0;
inline constexpr double kPlotRight = 620.0;
inline constexpr double kPlotTop = 30.0;
inline constexpr double kPlotBottom = 370.0;

/// Maps data y to pixel y. Log axes span whole decades around the data.
struct YAxis {
  bool log = false;
  double lo = 0.0;
  double hi = 1.0;

  double map(double y) const {
    const double u = log ? (std::log10(y) - std::log10(lo)) / (std::log10(hi) - std::log10(lo)) : (y - lo) / (hi - lo);
    return kPlotBottom - u * (kPlotBottom - kPlotTop);
  }
};

/// Log axis from 10^floor(log10(min)) to 10^ceil(log10(max)) over the positive finite values.
inline YAxis log_axis(const std::vector<double>& values) {
  double mn = std::numeric_limits<double>::infinity();
  double mx = 0.0;
  for (double v : values) {
    if (!std::isfinite(v) || v <= 0.0) continue;
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (!std::isfinite(mn)) return {true, 1e-1, 1e1};
  YAxis a{true, std::pow(10.0, std::floor(std::log10(mn))), std::pow(10.0, std::ceil(std::log10(mx)))};
  if (a.hi <= a.lo) a.hi = a.lo * 10.0;
  return a;
}

inline YAxis linear_axis(const std::vector<double>& values) {
  double mn = std::numeric_limits<double>::infinity();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (!std::isfinite(mn)) return {false, 0.0, 1.0};
  if (mx - mn < 1e-12) {
    mn -= 0.5;
    mx += 0.5;
  }
  const double pad = 0.05 * (mx - mn);
  return {false, mn - pad, mx + pad};
}

struct PlotOutput {
  std::vector<std::filesystem::path> files;
  std::string notice;  // set when nothing was drawn
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

/// Blue for the smallest lr through light blue for the largest.
inline std::string lr_color(double lr, double lr_min, double lr_max) {
  const double u = lr_max > lr_min ? (std::log(lr) - std::log(lr_min)) / (std::log(lr_max) - std::log(lr_min)) : 0.0;
  const auto mix = [u](int a, int b) { return static_cast<int>(std::lround(a + u * (b - a))); };
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", mix(0x08, 0x9e), mix(0x30, 0xca), mix(0x8c, 0xe1));
  return buf;
}

struct Series {
  std::string fingerprint;
  std::string kind;
  double lr = 0.0;
  std::vector<StepRow> rows;
};

struct Panel {
  std::string name;
  std::string y_label;
  bool log_y = false;
  std::function<std::optional<double>(const StepRow&)> value;
};

inline std::vector<Panel> panels() {
  return {
      {"loss", "loss (log)", true, [](const StepRow& r) { return std::optional<double>(r.loss); }},
      {"grad_norm", "gradient norm (log)", true, [](const StepRow& r) { return std::optional<double>(r.grad_norm); }},
      {"grad_consistency", "cosine vs 10 steps earlier", false, [](const StepRow& r) { return r.grad_cos_param; }},
      {"effective_rank", "effective rank of BA", false, [](const StepRow& r) { return r.eff_rank_sum; }},
  };
}

inline std::string render_panel(const Panel& panel, const std::string& title, const std::vector<Series>& series,
                                 std::optional<double> reference, const std::string& reference_id) {
  std::vector<double> ys;
  std::int64_t max_step = 1;
  double lr_min = std::numeric_limits<double>::infinity();
  double lr_max = 0.0;
  for (const auto& s : series) {
    lr_min = std::min(lr_min, s.lr);
    lr_max = std::max(lr_max, s.lr);
    for (const auto& r : s.rows) {
      max_step = std::max(max_step, r.step);
      if (auto v = panel.value(r)) ys.push_back(*v);
    }
  }
  if (reference) ys.push_back(*reference);
  const YAxis axis = panel.log_y ? log_axis(ys) : linear_axis(ys);
  const auto x_of = [&](std::int64_t step) {
    return kPlotLeft + (kPlotRight - kPlotLeft) * static_cast<double>(step) / static_cast<double>(max_step);
  };
  const auto drawable = [&](double v) { return std::isfinite(v) && (!panel.log_y || v > 0.0); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(kPlotWidth) << "\" height=\"" << fmt(kPlotHeight)
     << "\" viewBox=\"0 0 " << fmt(kPlotWidth) << ' ' << fmt(kPlotHeight) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<title>" << title << "</title>\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << fmt(kPlotWidth) << "\" height=\"" << fmt(kPlotHeight) << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << fmt(kPlotWidth / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n";
  os << "<g id=\"axes\" stroke=\"black\" fill=\"none\">\n";
  os << "<line x1=\"" << fmt(kPlotLeft) << "\" y1=\"" << fmt(kPlotBottom) << "\" x2=\"" << fmt(kPlotRight) << "\" y2=\""
     << fmt(kPlotBottom) << "\"/>\n";
  os << "<line x1=\"" << fmt(kPlotLeft) << "\" y1=\"" << fmt(kPlotTop) << "\" x2=\"" << fmt(kPlotLeft) << "\" y2=\""
     << fmt(kPlotBottom) << "\"/>\n";
  os << "</g>\n";

  os << "<g id=\"ticks\">\n";
  std::vector<double> ticks;
  if (axis.log) {
    for (double t = axis.lo; t <= axis.hi * 1.0000001; t *= 10.0) ticks.push_back(t);
  } else {
    for (int k = 0; k <= 4; ++k) ticks.push_back(axis.lo + (axis.hi - axis.lo) * k / 4.0);
  }
  for (double t : ticks) {
    os << "<text x=\"" << fmt(kPlotLeft - 6) << "\" y=\"" << fmt(axis.map(t) + 4) << "\" text-anchor=\"end\">"
       << fmt_tick(t) << "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const auto step = max_step * k / 4;
    os << "<text x=\"" << fmt(x_of(step)) << "\" y=\"" << fmt(kPlotBottom + 16) << "\" text-anchor=\"middle\">" << step
       << "</text>\n";
  }
  os << "<text x=\"" << fmt((kPlotLeft + kPlotRight) / 2) << "\" y=\"" << fmt(kPlotHeight - 12)
     << "\" text-anchor=\"middle\">step</text>\n";
  os << "<text x=\"14\" y=\"" << fmt((kPlotTop + kPlotBottom) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << fmt((kPlotTop + kPlotBottom) / 2) << ")\">" << panel.y_label << "</text>\n";
  os << "</g>\n";

  os << "<g id=\"series\" fill=\"none\" stroke-width=\"1.2\">\n";
  for (const auto& s : series) {
    std::string points;
    for (const auto& r : s.rows) {
      const auto v = panel.value(r);
      if (!v || !drawable(*v)) continue;
      if (!points.empty()) points += ' ';
      points += fmt(x_of(r.step)) + "," + fmt(axis.map(std::clamp(*v, axis.lo, axis.hi)));
    }
    if (points.empty()) continue;
    os << "<polyline data-run=\"" << s.fingerprint << "\" stroke=\"" << lr_color(s.lr, lr_min, lr_max) << '"'
       << (s.kind == "mf" ? " stroke-dasharray=\"4 3\"" : "") << " points=\"" << points << "\"/>\n";
  }
  os << "</g>\n";

  if (reference && drawable(*reference)) {
    const double y = axis.map(*reference);
    os << "<line id=\"" << reference_id << "\" x1=\"" << fmt(kPlotLeft) << "\" y1=\"" << fmt(y) << "\" x2=\""
       << fmt(kPlotRight) << "\" y2=\"" << fmt(y) << "\" stroke=\"red\" stroke-width=\"1.5\"/>\n";
  }
  os << "<text x=\"" << fmt(kPlotRight) << "\" y=\"" << fmt(kPlotTop - 4)
     << "\" text-anchor=\"end\">solid: OP-MF, dashed: MF; dark to light: small to large lr</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace detail

/// Writes `<experiment>_<panel>_<optimizer>.svg` next to the manifest (or into out_dir).
inline PlotOutput plot_manifest(const std::filesystem::path& manifest_path,
                                std::optional<std::filesystem::path> out_dir = std::nullopt) {
  const json manifest = load_manifest(manifest_path);
  const std::filesystem::path dir = manifest_path.parent_path().empty() ? "." : manifest_path.parent_path();
  const std::filesystem::path out = out_dir.value_or(dir);
  PlotOutput result;
  const json& runs = manifest.at("runs");
  if (runs.empty()) {
    result.notice = "manifest '" + manifest_path.string() + "' lists no runs; no plots written";
    return result;
  }
  ensure_writable_dir(out);
  const std::string experiment = manifest.at("experiment").get<std::string>();

  std::map<std::string, std::vector<detail::Series>> by_optimizer;
  for (const auto& r : runs) {
    const std::string fp = r.at("fingerprint").get<std::string>();
    const std::filesystem::path csv = dir / r.at("csv").get<std::string>();
    if (!std::filesystem::exists(csv)) {
      throw ConfigError("plot: CSV for run '" + fp + "' is missing (" + csv.string() + ")");
    }
    const json& cell = r.at("cell");
    by_optimizer[cell.at("optimizer").get<std::string>()].push_back(
        {fp, cell.at("kind").get<std::string>(), cell.at("lr").get<double>(), read_csv_file(csv.string())});
  }

  for (const auto& [opt, series] : by_optimizer) {
    for (const auto& panel : detail::panels()) {
      std::optional<double> reference;
      std::string ref_id;
      if (panel.name == "loss") {
        reference = manifest.at("svd_error").get<double>();
        ref_id = "svd-line";
      } else if (panel.name == "effective_rank" && manifest.contains("svd_effective_rank")) {
        reference = manifest.at("svd_effective_rank").get<double>();
        ref_id = "svd-rank-line";
      }
      const std::string title = experiment + ": " + panel.name + " (" + opt + ")";
      const auto path = out / (experiment + "_" + panel.name + "_" + opt + ".svg");
      write_file_atomic(path, detail::render_panel(panel, title, series, reference, ref_id));
      result.files.push_back(path);
    }
  }
  return result;
}

}  // namespace oplora
