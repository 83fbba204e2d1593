#include "nbnlab/report.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace nbnlab {
namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

std::string escape_field(const std::string& f) {
  if (f.find_first_of(",\"\n") == std::string::npos) return f;
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string xml_escape(const std::string& s) {
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

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Plot frame shared by all charts: maps data coordinates into the inner box.
struct Frame {
  double width = 720, height = 440;
  double left = 70, right = 170, top = 40, bottom = 55;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }

  void fit(double lo_x, double hi_x, double lo_y, double hi_y) {
    if (!(hi_x > lo_x)) { lo_x -= 0.5; hi_x += 0.5; }
    if (!(hi_y > lo_y)) { lo_y -= 0.5; hi_y += 0.5; }
    x0 = lo_x; x1 = hi_x; y0 = lo_y; y1 = hi_y;
  }
};

std::string open_svg(const Frame& f, const PlotLabels& labels) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << f.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << xml_escape(labels.title) << "</text>\n";
  const double bx = f.left, by = f.top, bw = f.width - f.left - f.right, bh = f.height - f.top - f.bottom;
  s << "<rect x=\"" << bx << "\" y=\"" << by << "\" width=\"" << bw << "\" height=\"" << bh
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s << "<text x=\"" << f.px(xv) << "\" y=\"" << f.height - f.bottom + 16
      << "\" text-anchor=\"middle\">" << short_num(xv) << "</text>\n";
    s << "<text x=\"" << f.left - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">"
      << short_num(yv) << "</text>\n";
  }
  s << "<text x=\"" << f.left + bw / 2 << "\" y=\"" << f.height - 12 << "\" text-anchor=\"middle\">"
    << xml_escape(labels.x) << "</text>\n";
  s << "<text transform=\"translate(16," << f.top + bh / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << xml_escape(labels.y) << "</text>\n";
  return s.str();
}

std::string legend(const Frame& f, const std::vector<std::string>& names) {
  std::ostringstream s;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = f.top + 14 + 18.0 * static_cast<double>(i);
    const double x = f.width - f.right + 12;
    s << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"10\" fill=\"" << color(i)
      << "\"/>\n<text x=\"" << x + 18 << "\" y=\"" << y << "\">" << xml_escape(names[i]) << "</text>\n";
  }
  return s.str();
}

void save_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << text;
}

std::string file_label(const std::string& label) {
  std::string out;
  for (char c : label) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_';
  return out.empty() ? "model" : out;
}

}  // namespace

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header.size())
    throw std::invalid_argument("csv row has " + std::to_string(row.size()) + " fields, header has " +
                                std::to_string(header.size()));
  rows.push_back(std::move(row));
}

std::size_t CsvTable::column_index(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::out_of_range("no csv column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> CsvTable::column(const std::string& name) const {
  const std::size_t c = column_index(name);
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(std::stod(r[c]));
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  auto put = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << escape_field(fields[i]);
    out << "\n";
  };
  put(header);
  for (const auto& r : rows) put(r);
}

CsvTable CsvTable::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open file");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty csv");
  t.header = split_line(line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_line(line);
    if (fields.size() != t.header.size())
      throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) + ": expected " +
                               std::to_string(t.header.size()) + " fields");
    t.rows.push_back(std::move(fields));
  }
  return t;
}

void write_line_svg(const std::filesystem::path& path, const PlotLabels& labels,
                    const std::vector<Series>& series) {
  double lx = INFINITY, hx = -INFINITY, ly = INFINITY, hy = -INFINITY;
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      lx = std::min(lx, s.x[i]);
      hx = std::max(hx, s.x[i]);
      ly = std::min(ly, s.y[i]);
      hy = std::max(hy, s.y[i]);
    }
  if (!std::isfinite(lx)) lx = hx = ly = hy = 0.0;
  Frame f;
  f.fit(lx, hx, std::min(ly, 0.0), hy);
  std::string out = open_svg(f, labels);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    names.push_back(series[k].name);
    std::ostringstream pts;
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      if (std::isfinite(series[k].x[i]) && std::isfinite(series[k].y[i]))
        pts << f.px(series[k].x[i]) << "," << f.py(series[k].y[i]) << " ";
    out += "<polyline fill=\"none\" stroke-width=\"1.8\" stroke=\"" + color(k) + "\" points=\"" +
           pts.str() + "\"/>\n";
  }
  out += legend(f, names) + "</svg>\n";
  save_text(path, out);
}

void write_histogram_svg(const std::filesystem::path& path, const PlotLabels& labels,
                         const Histogram& hist, const std::vector<std::string>& names) {
  std::size_t peak = 1;
  for (const auto& row : hist.counts)
    for (std::size_t c : row) peak = std::max(peak, c);
  Frame f;
  f.fit(hist.lo, hist.hi, 0.0, static_cast<double>(peak));
  std::string out = open_svg(f, labels);
  for (std::size_t s = 0; s < hist.counts.size(); ++s)
    for (std::size_t b = 0; b < hist.bins; ++b) {
      const double a = hist.lo + hist.bin_width() * static_cast<double>(b);
      const double x = f.px(a), w = f.px(a + hist.bin_width()) - x;
      const double y = f.py(static_cast<double>(hist.counts[s][b]));
      std::ostringstream r;
      r << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << f.py(0) - y
        << "\" fill=\"" << color(s) << "\" fill-opacity=\"0.35\" stroke=\"" << color(s) << "\"/>\n";
      out += r.str();
    }
  out += legend(f, names) + "</svg>\n";
  save_text(path, out);
}

void write_bar_svg(const std::filesystem::path& path, const PlotLabels& labels,
                   const std::vector<std::string>& categories,
                   const std::vector<std::string>& names,
                   const std::vector<std::vector<double>>& values) {
  double lo = 0.0, hi = 0.0;
  for (const auto& row : values)
    for (double v : row)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  Frame f;
  f.fit(0.0, static_cast<double>(categories.size()), lo, hi);
  std::string out = open_svg(f, labels);
  const double slot = 0.8 / static_cast<double>(std::max<std::size_t>(1, values.size()));
  for (std::size_t s = 0; s < values.size(); ++s)
    for (std::size_t c = 0; c < categories.size() && c < values[s].size(); ++c) {
      const double v = std::isfinite(values[s][c]) ? values[s][c] : 0.0;
      const double x = f.px(static_cast<double>(c) + 0.1 + slot * static_cast<double>(s));
      const double w = f.px(static_cast<double>(c) + 0.1 + slot * static_cast<double>(s + 1)) - x;
      const double ya = f.py(std::max(v, 0.0)), yb = f.py(std::min(v, 0.0));
      std::ostringstream r;
      r << "<rect x=\"" << x << "\" y=\"" << ya << "\" width=\"" << w << "\" height=\"" << yb - ya
        << "\" fill=\"" << color(s) << "\"/>\n";
      out += r.str();
    }
  for (std::size_t c = 0; c < categories.size(); ++c) {
    std::ostringstream t;
    t << "<text x=\"" << f.px(static_cast<double>(c) + 0.5) << "\" y=\"" << f.py(f.y1) - 6
      << "\" text-anchor=\"middle\">" << xml_escape(categories[c]) << "</text>\n";
    out += t.str();
  }
  out += legend(f, names) + "</svg>\n";
  save_text(path, out);
}

AnalysisSummary write_analysis(const std::vector<LabeledModel>& models, const PreparedData& data,
                               const std::filesystem::path& out_dir, double quantile) {
  if (models.empty()) throw std::invalid_argument("analysis needs at least one model");
  if (data.test.size() == 0) throw std::invalid_argument("test set is empty");
  std::filesystem::create_directories(out_dir);
  AnalysisSummary summary;
  auto emit = [&](const std::filesystem::path& p) { summary.files.push_back(p); };

  std::vector<ChannelProfile> profiles;
  std::vector<Series> curves;
  CsvTable stats_table{{"model", "var_mean", "var_std", "balance_cv", "max_min_ratio"}, {}};
  CsvTable masking{{"model", "mask", "channels", "overall", "tail", "medium", "head"}, {}};
  std::vector<std::string> bar_names;
  std::vector<std::vector<double>> bar_values;
  static const ChannelTag kMasks[] = {ChannelTag::neither, ChannelTag::rare_specific,
                                      ChannelTag::frequent_specific, ChannelTag::common};

  for (const LabeledModel& lm : models) {
    Model& model = *lm.model;
    if (model.config().input_dim != data.test.num_features)
      throw std::invalid_argument("model input dimension " + std::to_string(model.config().input_dim) +
                                  " does not match data dimension " +
                                  std::to_string(data.test.num_features));
    const std::string tag = file_label(lm.label);
    summary.labels.push_back(lm.label);

    const Tensor features = extract_features(model, data.test);
    const FeatureStatVariance fs = feature_stat_variance(features);
    summary.feature_stats.push_back(fs);
    {
      CsvTable t;
      for (std::size_t c = 0; c < features.dim(1); ++c) t.header.push_back("c" + std::to_string(c));
      for (std::size_t r = 0; r < features.dim(0); ++r) {
        std::vector<std::string> row;
        for (std::size_t c = 0; c < features.dim(1); ++c) row.push_back(format_number(features.at(r, c)));
        t.rows.push_back(std::move(row));
      }
      t.write(out_dir / ("features_" + tag + ".csv"));
      emit(out_dir / ("features_" + tag + ".csv"));
    }

    ChannelProfile profile = channel_profile(model, data.test, lm.label);
    {
      CsvTable t{{"channel", "mean", "std", "gamma", "beta"}, {}};
      for (std::size_t c = 0; c < profile.mean.size(); ++c)
        t.add_row({std::to_string(c), format_number(profile.mean[c]), format_number(profile.std[c]),
                   format_number(profile.gamma.empty() ? NAN : profile.gamma[c]),
                   format_number(profile.beta.empty() ? NAN : profile.beta[c])});
      t.write(out_dir / ("channel_stats_" + tag + ".csv"));
      emit(out_dir / ("channel_stats_" + tag + ".csv"));
    }

    double cv = NAN, ratio = NAN;
    if (!model.final_norm().is_identity()) {
      const BalanceCurve curve = bn_weight_curve(model);
      cv = curve.cv;
      ratio = curve.max_min_ratio;
      Series s{lm.label, {}, curve.sorted};
      for (std::size_t i = 0; i < curve.sorted.size(); ++i) s.x.push_back(static_cast<double>(i));
      curves.push_back(std::move(s));
    }
    summary.balance_cv.push_back(cv);
    stats_table.add_row({lm.label, format_number(fs.var_mean), format_number(fs.var_std),
                         format_number(cv), format_number(ratio)});

    const ChannelImportance ci = channel_importance(model.classifier().weight, data.groups, quantile);
    {
      CsvTable t{{"channel", "rare", "frequent", "tag"}, {}};
      for (std::size_t c = 0; c < ci.tags.size(); ++c)
        t.add_row({std::to_string(c), format_number(ci.rare[c]), format_number(ci.frequent[c]),
                   to_string(ci.tags[c])});
      t.add_row({"tau", format_number(ci.tau_rare), format_number(ci.tau_frequent),
                 "q=" + format_number(quantile)});
      t.write(out_dir / ("channel_importance_" + tag + ".csv"));
      emit(out_dir / ("channel_importance_" + tag + ".csv"));
    }
    std::vector<double> tail_row, head_row;
    for (ChannelTag mask : kMasks) {
      const std::vector<std::size_t> channels =
          mask == ChannelTag::neither ? std::vector<std::size_t>{} : ci.channels_with(mask);
      const GroupReport rep = mask_channels_eval(model, channels, data.test, data.groups);
      masking.add_row({lm.label, mask == ChannelTag::neither ? "none" : to_string(mask),
                       std::to_string(channels.size()), format_number(rep.overall),
                       format_number(rep.tail), format_number(rep.medium), format_number(rep.head)});
      tail_row.push_back(rep.tail);
      head_row.push_back(rep.head);
    }
    bar_names.push_back(lm.label + " tail");
    bar_names.push_back(lm.label + " head");
    bar_values.push_back(std::move(tail_row));
    bar_values.push_back(std::move(head_row));
    profiles.push_back(std::move(profile));
  }

  stats_table.write(out_dir / "feature_stats.csv");
  emit(out_dir / "feature_stats.csv");
  {
    std::vector<std::vector<double>> per_model;
    for (const FeatureStatVariance& fs : summary.feature_stats) per_model.push_back({fs.var_mean, fs.var_std});
    write_bar_svg(out_dir / "feature_stats.svg", {"Variance of feature statistics", "", "variance"},
                  {"Var(mean)", "Var(std)"}, summary.labels, per_model);
    emit(out_dir / "feature_stats.svg");
  }

  if (!curves.empty()) {
    CsvTable t{{"rank"}, {}};
    for (const Series& s : curves) t.header.push_back(s.name);
    for (std::size_t i = 0; i < curves.front().y.size(); ++i) {
      std::vector<std::string> row{std::to_string(i)};
      for (const Series& s : curves) row.push_back(i < s.y.size() ? format_number(s.y[i]) : "nan");
      t.rows.push_back(std::move(row));
    }
    t.write(out_dir / "bn_weight_curve.csv");
    write_line_svg(out_dir / "bn_weight_curve.svg",
                   {"Sorted |weight| of the final normalization layer", "channel rank", "|weight|"},
                   curves);
    emit(out_dir / "bn_weight_curve.csv");
    emit(out_dir / "bn_weight_curve.svg");
  }

  const StatisticsHistogram sh = statistics_histogram(profiles);
  for (const auto& [name, hist] : {std::pair{"mean", &sh.mean}, std::pair{"std", &sh.std}}) {
    CsvTable t{{"bin_lo", "bin_hi"}, {}};
    for (const std::string& l : sh.labels) t.header.push_back(l);
    for (std::size_t b = 0; b < hist->bins; ++b) {
      const double a = hist->lo + hist->bin_width() * static_cast<double>(b);
      std::vector<std::string> row{format_number(a), format_number(a + hist->bin_width())};
      for (const auto& counts : hist->counts) row.push_back(std::to_string(counts[b]));
      t.rows.push_back(std::move(row));
    }
    const std::string stem = std::string("statistics_histogram_") + name;
    t.write(out_dir / (stem + ".csv"));
    write_histogram_svg(out_dir / (stem + ".svg"),
                        {std::string("Per-channel feature ") + name, name, "channels"}, *hist, sh.labels);
    emit(out_dir / (stem + ".csv"));
    emit(out_dir / (stem + ".svg"));
  }

  masking.write(out_dir / "masking.csv");
  write_bar_svg(out_dir / "masking.svg", {"Accuracy with channel groups masked", "", "accuracy"},
                {"none", "rare-specific", "frequent-specific", "common"}, bar_names, bar_values);
  emit(out_dir / "masking.csv");
  emit(out_dir / "masking.svg");
  return summary;
}

}  // namespace nbnlab
