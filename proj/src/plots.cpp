#include "perturbkit/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "perturbkit/common.hpp"

namespace perturbkit {

using json = nlohmann::json;

namespace {

void check_spec(const PlotSpec& spec) {
  if (!(spec.color_gamma > 0.0))
    throw ConfigError("color_gamma must be positive");
  if (spec.clip && !(*spec.clip > 0.0))
    throw ConfigError("clip must be positive");
}

double clip_value(double v, const PlotSpec& spec) {
  if (!spec.clip || !std::isfinite(v)) return v;
  return std::clamp(v, -*spec.clip, *spec.clip);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
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

/// Short display form; tooltips carry full precision via format_double.
std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string fmt_px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::vector<std::string> distinct_in_order(const std::vector<std::string>& labels) {
  std::vector<std::string> out;
  for (const auto& l : labels)
    if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
  return out;
}

/// Requested groups first (validated against `present`), then the rest in
/// data order.
std::vector<std::string> arrange_groups(const std::vector<std::string>& present,
                                        const std::vector<std::string>& requested) {
  std::vector<std::string> out;
  for (const auto& g : requested) {
    if (std::find(present.begin(), present.end(), g) == present.end())
      throw ConfigError("group '" + g + "' matches nothing in the data");
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  }
  for (const auto& g : present)
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  return out;
}

/// Axis indices sorted by group, original order within each group. Also
/// reports the index boundaries between consecutive groups.
struct AxisOrder {
  std::vector<int> index;
  std::vector<int> boundaries;  // positions where a new group starts
  std::vector<std::pair<std::string, std::pair<int, int>>> spans;  // group -> [first,last]
};

AxisOrder order_axis(const std::vector<std::string>& labels,
                     const std::vector<std::string>& groups) {
  AxisOrder out;
  for (const auto& g : groups) {
    int first = -1;
    for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
      if (labels[i] != g) continue;
      if (first < 0) {
        first = static_cast<int>(out.index.size());
        if (first > 0) out.boundaries.push_back(first);
      }
      out.index.push_back(i);
    }
    if (first >= 0)
      out.spans.push_back({g, {first, static_cast<int>(out.index.size()) - 1}});
  }
  return out;
}

std::string blend(double t, int r0, int g0, int b0, int r1, int g1, int b1) {
  auto mix = [t](int a, int b) {
    return static_cast<int>(std::lround(a + t * (b - a)));
  };
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", mix(r0, r1), mix(g0, g1),
                mix(b0, b1));
  return buf;
}

/// Diverging palette around white: negative values toward blue, positive
/// toward red, with |v|/vmax passed through the power-law curve.
std::string cell_color(double v, double vmax, double gamma) {
  if (!std::isfinite(v)) return "#d4d4d4";
  if (vmax <= 0.0) return "#f7f7f7";
  double t = std::pow(std::min(std::fabs(v) / vmax, 1.0), gamma);
  if (v >= 0.0) return blend(t, 247, 247, 247, 178, 24, 43);
  return blend(t, 247, 247, 247, 33, 102, 172);
}

double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  if (n == 0) return 0.0;
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double quantile_of(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  double pos = q * (static_cast<double>(sorted.size()) - 1.0);
  size_t lo = static_cast<size_t>(pos);
  size_t hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

/// Silverman's rule; zero when the sample has no spread.
double kde_bandwidth(const std::vector<double>& sorted) {
  size_t n = sorted.size();
  if (n < 2) return 0.0;
  double mean = 0.0;
  for (double v : sorted) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : sorted) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  double sd = std::sqrt(var);
  double iqr = quantile_of(sorted, 0.75) - quantile_of(sorted, 0.25);
  double width = sd;
  if (iqr > 0.0) width = std::min(width, iqr / 1.34);
  return 0.9 * width * std::pow(static_cast<double>(n), -0.2);
}

}  // namespace

std::string plot_spec_to_json(const PlotSpec& spec) {
  json j;
  if (spec.clip)
    j["clip"] = *spec.clip;
  else
    j["clip"] = nullptr;
  j["color_gamma"] = spec.color_gamma;
  j["group_order"] = spec.group_order;
  j["medians"] = spec.medians;
  return j.dump(2) + "\n";
}

PlotSpec plot_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad plot spec JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("plot spec JSON must be an object");
  static const std::set<std::string> known = {"clip", "color_gamma",
                                              "group_order", "medians"};
  for (auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown plot spec key '" + key + "'");
  PlotSpec spec;
  try {
    if (j.contains("clip") && !j["clip"].is_null())
      spec.clip = j["clip"].get<double>();
    spec.color_gamma = j.value("color_gamma", spec.color_gamma);
    if (j.contains("group_order"))
      spec.group_order = j["group_order"].get<std::vector<std::string>>();
    spec.medians = j.value("medians", spec.medians);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad plot spec field: ") + e.what());
  }
  check_spec(spec);
  return spec;
}

std::string heatmap_svg(const TransferMatrix& m, const PlotSpec& spec) {
  check_spec(spec);
  if (m.rows() == 0 || m.cols() == 0) throw ConfigError("empty matrix");

  // group_order may name groups living on either axis
  auto row_groups = distinct_in_order(m.row_labels);
  auto col_groups = distinct_in_order(m.col_labels);
  {
    auto all = row_groups;
    for (const auto& g : col_groups)
      if (std::find(all.begin(), all.end(), g) == all.end()) all.push_back(g);
    arrange_groups(all, spec.group_order);
  }
  std::vector<std::string> row_req, col_req;
  for (const auto& g : spec.group_order) {
    if (std::find(row_groups.begin(), row_groups.end(), g) != row_groups.end())
      row_req.push_back(g);
    if (std::find(col_groups.begin(), col_groups.end(), g) != col_groups.end())
      col_req.push_back(g);
  }
  AxisOrder rows = order_axis(m.row_labels, arrange_groups(row_groups, row_req));
  AxisOrder cols = order_axis(m.col_labels, arrange_groups(col_groups, col_req));

  double vmax = 0.0;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) {
      double v = clip_value(m.values.at(r, c), spec);
      if (std::isfinite(v)) vmax = std::max(vmax, std::fabs(v));
    }

  const double cell = 16.0;
  size_t row_chars = 0, col_chars = 0;
  for (const auto& id : m.row_ids) row_chars = std::max(row_chars, id.size());
  for (const auto& id : m.col_ids) col_chars = std::max(col_chars, id.size());
  const double left = std::clamp(14.0 + 6.5 * static_cast<double>(row_chars), 60.0, 190.0);
  const double top = std::clamp(14.0 + 5.5 * static_cast<double>(col_chars), 60.0, 170.0);
  const double grid_w = cell * m.cols();
  const double grid_h = cell * m.rows();
  const double legend_h = 64.0;
  const double width = left + grid_w + 24.0;
  const double height = top + grid_h + legend_h;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt_px(width)
      << "\" height=\"" << fmt_px(height) << "\" viewBox=\"0 0 "
      << fmt_px(width) << " " << fmt_px(height) << "\">\n";
  svg << "<style>text{font-family:monospace;fill:#222;}</style>\n";
  svg << "<rect width=\"" << fmt_px(width) << "\" height=\"" << fmt_px(height)
      << "\" fill=\"#ffffff\"/>\n";

  for (size_t ri = 0; ri < rows.index.size(); ++ri) {
    int r = rows.index[ri];
    double y = top + cell * static_cast<double>(ri);
    for (size_t ci = 0; ci < cols.index.size(); ++ci) {
      int c = cols.index[ci];
      double x = left + cell * static_cast<double>(ci);
      double raw = m.values.at(r, c);
      double v = clip_value(raw, spec);
      svg << "<rect x=\"" << fmt_px(x) << "\" y=\"" << fmt_px(y) << "\" width=\""
          << fmt_px(cell) << "\" height=\"" << fmt_px(cell) << "\" fill=\""
          << cell_color(v, vmax, spec.color_gamma) << "\"><title>"
          << xml_escape(m.row_ids[r]) << " / " << xml_escape(m.col_ids[c])
          << ": " << (std::isfinite(raw) ? format_double(raw) : "skipped")
          << "</title></rect>\n";
    }
  }

  // id labels
  for (size_t ri = 0; ri < rows.index.size(); ++ri) {
    double y = top + cell * (static_cast<double>(ri) + 0.72);
    svg << "<text x=\"" << fmt_px(left - 4.0) << "\" y=\"" << fmt_px(y)
        << "\" font-size=\"9\" text-anchor=\"end\">"
        << xml_escape(m.row_ids[rows.index[ri]]) << "</text>\n";
  }
  for (size_t ci = 0; ci < cols.index.size(); ++ci) {
    double x = left + cell * (static_cast<double>(ci) + 0.72);
    double y = top - 4.0;
    svg << "<text x=\"" << fmt_px(x) << "\" y=\"" << fmt_px(y)
        << "\" font-size=\"9\" text-anchor=\"start\" transform=\"rotate(-60 "
        << fmt_px(x) << " " << fmt_px(y) << ")\">"
        << xml_escape(m.col_ids[cols.index[ci]]) << "</text>\n";
  }

  // group separator rules across the full grid
  for (int b : rows.boundaries) {
    double y = top + cell * static_cast<double>(b);
    svg << "<line class=\"group-sep\" x1=\"" << fmt_px(left) << "\" y1=\""
        << fmt_px(y) << "\" x2=\"" << fmt_px(left + grid_w) << "\" y2=\""
        << fmt_px(y) << "\" stroke=\"#111\" stroke-width=\"1.6\"/>\n";
  }
  for (int b : cols.boundaries) {
    double x = left + cell * static_cast<double>(b);
    svg << "<line class=\"group-sep\" x1=\"" << fmt_px(x) << "\" y1=\""
        << fmt_px(top) << "\" x2=\"" << fmt_px(x) << "\" y2=\""
        << fmt_px(top + grid_h) << "\" stroke=\"#111\" stroke-width=\"1.6\"/>\n";
  }
  svg << "<rect x=\"" << fmt_px(left) << "\" y=\"" << fmt_px(top)
      << "\" width=\"" << fmt_px(grid_w) << "\" height=\"" << fmt_px(grid_h)
      << "\" fill=\"none\" stroke=\"#111\" stroke-width=\"1\"/>\n";

  // legend: swatch ramp from -vmax to +vmax plus the mapping parameters
  double ly = top + grid_h + 18.0;
  const int swatches = 48;
  double sw = std::min(240.0, grid_w) / swatches;
  for (int i = 0; i < swatches; ++i) {
    double v = vmax * (2.0 * (i + 0.5) / swatches - 1.0);
    svg << "<rect x=\"" << fmt_px(left + sw * i) << "\" y=\"" << fmt_px(ly)
        << "\" width=\"" << fmt_px(sw + 0.3) << "\" height=\"10\" fill=\""
        << cell_color(v, vmax, spec.color_gamma) << "\"/>\n";
  }
  svg << "<text x=\"" << fmt_px(left) << "\" y=\"" << fmt_px(ly + 22.0)
      << "\" font-size=\"9\">" << fmt_short(-vmax) << "</text>\n";
  svg << "<text x=\"" << fmt_px(left + sw * swatches) << "\" y=\""
      << fmt_px(ly + 22.0) << "\" font-size=\"9\" text-anchor=\"end\">"
      << fmt_short(vmax) << "</text>\n";
  std::string caption = "gamma=" + fmt_short(spec.color_gamma);
  if (spec.clip) caption += " clip=" + fmt_short(*spec.clip);
  if (!m.skipped.empty())
    caption += " skipped=" + std::to_string(m.skipped.size());
  svg << "<text x=\"" << fmt_px(left) << "\" y=\"" << fmt_px(ly + 36.0)
      << "\" font-size=\"9\">" << xml_escape(caption) << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::string distribution_svg(const std::vector<EffectRecord>& records,
                             const PlotSpec& spec) {
  check_spec(spec);
  if (records.empty()) throw ConfigError("no records to plot");

  std::map<std::string, std::vector<double>> by_relation;
  for (const auto& rec : records) {
    auto tc = rec.metadata.find("train_class");
    auto ec = rec.metadata.find("eval_class");
    if (tc == rec.metadata.end() || ec == rec.metadata.end())
      throw ConfigError("record " + rec.train_id + "/" + rec.eval_id +
                        " lacks class metadata");
    std::string rel = rec.train_id == rec.eval_id ? "self"
                      : tc->second == ec->second  ? "within"
                                                  : "between";
    by_relation[rel].push_back(clip_value(rec.effect, spec));
  }
  // canonical order for whatever relations are present
  std::vector<std::string> present;
  for (const char* rel : {"self", "within", "between"})
    if (by_relation.count(rel)) present.push_back(rel);
  auto groups = arrange_groups(present, spec.group_order);

  struct Violin {
    std::string name;
    std::vector<double> sorted;
    double bandwidth = 0.0;
    double median = 0.0;
  };
  std::vector<Violin> violins;
  double lo = clip_value(records[0].effect, spec);
  double hi = lo;
  for (const auto& g : groups) {
    Violin v;
    v.name = g;
    v.sorted = by_relation[g];
    std::sort(v.sorted.begin(), v.sorted.end());
    v.bandwidth = kde_bandwidth(v.sorted);
    v.median = median_of(v.sorted);
    lo = std::min(lo, v.sorted.front() - 2.0 * v.bandwidth);
    hi = std::max(hi, v.sorted.back() + 2.0 * v.bandwidth);
    violins.push_back(std::move(v));
  }
  if (hi <= lo) {
    lo -= 0.5;
    hi += 0.5;
  }

  const double top = 16.0, bottom = 44.0, axis_w = 56.0;
  const double plot_h = 240.0;
  const double slot = 120.0, half_w = 38.0;
  const double width = axis_w + slot * static_cast<double>(violins.size()) + 16.0;
  const double height = top + plot_h + bottom;
  auto y_of = [&](double v) {
    return top + plot_h * (hi - v) / (hi - lo);
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt_px(width)
      << "\" height=\"" << fmt_px(height) << "\" viewBox=\"0 0 "
      << fmt_px(width) << " " << fmt_px(height) << "\">\n";
  svg << "<style>text{font-family:monospace;fill:#222;}</style>\n";
  svg << "<rect width=\"" << fmt_px(width) << "\" height=\"" << fmt_px(height)
      << "\" fill=\"#ffffff\"/>\n";

  // y axis with min, zero, max ticks
  svg << "<line x1=\"" << fmt_px(axis_w) << "\" y1=\"" << fmt_px(top)
      << "\" x2=\"" << fmt_px(axis_w) << "\" y2=\"" << fmt_px(top + plot_h)
      << "\" stroke=\"#111\"/>\n";
  std::vector<double> ticks = {lo, hi};
  if (lo < 0.0 && hi > 0.0) ticks.push_back(0.0);
  for (double t : ticks) {
    svg << "<line x1=\"" << fmt_px(axis_w - 4.0) << "\" y1=\"" << fmt_px(y_of(t))
        << "\" x2=\"" << fmt_px(axis_w) << "\" y2=\"" << fmt_px(y_of(t))
        << "\" stroke=\"#111\"/>\n";
    svg << "<text x=\"" << fmt_px(axis_w - 7.0) << "\" y=\""
        << fmt_px(y_of(t) + 3.0) << "\" font-size=\"9\" text-anchor=\"end\">"
        << fmt_short(t) << "</text>\n";
  }

  const int grid_n = 48;
  for (size_t vi = 0; vi < violins.size(); ++vi) {
    const Violin& v = violins[vi];
    double cx = axis_w + slot * (static_cast<double>(vi) + 0.5);
    size_t n = v.sorted.size();
    if (v.bandwidth > 0.0) {
      double glo = v.sorted.front() - 2.0 * v.bandwidth;
      double ghi = v.sorted.back() + 2.0 * v.bandwidth;
      std::vector<double> gy(grid_n), gd(grid_n);
      double dmax = 0.0;
      const double inv = 1.0 / (static_cast<double>(n) * v.bandwidth *
                                std::sqrt(2.0 * 3.14159265358979323846));
      for (int i = 0; i < grid_n; ++i) {
        gy[i] = glo + (ghi - glo) * i / (grid_n - 1);
        double d = 0.0;
        for (double x : v.sorted) {
          double z = (gy[i] - x) / v.bandwidth;
          d += std::exp(-0.5 * z * z);
        }
        gd[i] = d * inv;
        dmax = std::max(dmax, gd[i]);
      }
      svg << "<path class=\"violin\" d=\"M";
      for (int i = 0; i < grid_n; ++i) {
        double w = half_w * (dmax > 0.0 ? gd[i] / dmax : 0.0);
        svg << (i ? " L" : "") << fmt_px(cx + w) << " " << fmt_px(y_of(gy[i]));
      }
      for (int i = grid_n - 1; i >= 0; --i) {
        double w = half_w * (dmax > 0.0 ? gd[i] / dmax : 0.0);
        svg << " L" << fmt_px(cx - w) << " " << fmt_px(y_of(gy[i]));
      }
      svg << " Z\" fill=\"#9ecae1\" fill-opacity=\"0.8\" stroke=\"#3b6ea5\"/>\n";
    } else {
      // no spread: a bare rule at the shared value
      svg << "<line class=\"violin\" x1=\"" << fmt_px(cx - half_w * 0.6)
          << "\" y1=\"" << fmt_px(y_of(v.median)) << "\" x2=\""
          << fmt_px(cx + half_w * 0.6) << "\" y2=\"" << fmt_px(y_of(v.median))
          << "\" stroke=\"#3b6ea5\" stroke-width=\"3\"/>\n";
    }
    if (spec.medians) {
      svg << "<line class=\"median\" x1=\"" << fmt_px(cx - half_w * 0.5)
          << "\" y1=\"" << fmt_px(y_of(v.median)) << "\" x2=\""
          << fmt_px(cx + half_w * 0.5) << "\" y2=\"" << fmt_px(y_of(v.median))
          << "\" stroke=\"#111\" stroke-width=\"1.6\"/>\n";
      svg << "<text class=\"median\" x=\"" << fmt_px(cx + half_w * 0.5 + 4.0)
          << "\" y=\"" << fmt_px(y_of(v.median) + 3.0) << "\" font-size=\"9\">"
          << fmt_short(v.median) << "</text>\n";
    }
    svg << "<text x=\"" << fmt_px(cx) << "\" y=\"" << fmt_px(top + plot_h + 16.0)
        << "\" font-size=\"10\" text-anchor=\"middle\">" << xml_escape(v.name)
        << "</text>\n";
    svg << "<text x=\"" << fmt_px(cx) << "\" y=\"" << fmt_px(top + plot_h + 30.0)
        << "\" font-size=\"9\" text-anchor=\"middle\">n="
        << n << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace perturbkit
