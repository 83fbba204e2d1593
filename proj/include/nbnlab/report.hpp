#pragma once

// CSV tables, plain SVG plots, and the analysis artifact set.

#include <filesystem>
#include <string>
#include <vector>

#include "nbnlab/analysis.hpp"
#include "nbnlab/experiment.hpp"

namespace nbnlab {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row);
  std::size_t column_index(const std::string& name) const;
  std::vector<double> column(const std::string& name) const;

  void write(const std::filesystem::path& path) const;
  // Expects a header row; every row must have the header's field count.
  static CsvTable read(const std::filesystem::path& path);
};

// Shortest text that parses back to the same double ("nan", "inf" allowed).
std::string format_number(double v);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotLabels {
  std::string title;
  std::string x;
  std::string y;
};

void write_line_svg(const std::filesystem::path& path, const PlotLabels& labels,
                    const std::vector<Series>& series);
// One outlined bar set per histogram series.
void write_histogram_svg(const std::filesystem::path& path, const PlotLabels& labels,
                         const Histogram& hist, const std::vector<std::string>& names);
// values[s][c]: series s, category c.
void write_bar_svg(const std::filesystem::path& path, const PlotLabels& labels,
                   const std::vector<std::string>& categories,
                   const std::vector<std::string>& names,
                   const std::vector<std::vector<double>>& values);

struct LabeledModel {
  std::string label;
  Model* model;
};

struct AnalysisSummary {
  std::vector<std::string> labels;
  std::vector<FeatureStatVariance> feature_stats;
  std::vector<double> balance_cv;  // NaN when the final slot has no normalization
  std::vector<std::filesystem::path> files;
};

// Writes, for every model: weight curve, statistics histograms, feature
// statistics (and the raw test features), channel importance and the masking
// table, each as CSV and SVG under `out_dir`.
AnalysisSummary write_analysis(const std::vector<LabeledModel>& models, const PreparedData& data,
                               const std::filesystem::path& out_dir, double quantile = 0.6);

}  // namespace nbnlab
