#pragma once

// Long-tailed dataset synthesis, tabular ingestion and head/medium/tail
// grouping.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nbnlab/tensor.hpp"

namespace nbnlab {

enum class CountProfile { exp, step };

std::string to_string(CountProfile p);
CountProfile count_profile_from_string(const std::string& text);

struct LongTailSpec {
  std::size_t num_classes = 10;
  std::size_t n_max = 1280;
  double imbalance_factor = 100.0;
  CountProfile profile = CountProfile::exp;
  std::size_t input_dim = 32;
  // Standard deviation of each class-mean coordinate; within-class noise has
  // unit variance.
  double separation = 0.6;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const LongTailSpec&) const = default;
};

// Exp: n_k = round(n_max * IF^(-k / (K - 1))). Step: the first ceil(K/2)
// classes get n_max, the rest round(n_max / IF).
std::vector<std::size_t> class_counts(const LongTailSpec& spec);

struct Dataset {
  std::size_t num_features = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;  // row-major [size x num_features]
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> per_class_counts() const;
  // Copies the selected rows into a [n x D] tensor.
  Tensor rows(std::span<const std::size_t> indices) const;
  Tensor all_rows() const;
  std::vector<std::size_t> labels_at(std::span<const std::size_t> indices) const;
  bool operator==(const Dataset&) const = default;
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

// Gaussian class clusters; the training split follows class_counts, the test
// split is balanced. Reproducible from spec.seed.
SplitDataset synthesize(const LongTailSpec& spec);

enum class Group { tail, medium, head };
std::string to_string(Group g);

// tail: count < tail_max; head: count > head_min; medium otherwise.
struct GroupThresholds {
  double tail_max = 20.0;
  double head_min = 100.0;

  void validate() const;
  // (20, 100) scaled by n_max / 1280.
  static GroupThresholds scaled_for(std::size_t n_max);
};

std::vector<Group> group_assignment(std::span<const std::size_t> counts,
                                    const GroupThresholds& thresholds);

// Per-feature affine standardization fitted on a training split.
struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> inv_std;

  static FeatureScaler fit(const Dataset& train);
  void apply(Dataset& data) const;
};

enum class TableFormat { csv, binary };

struct IngestOptions {
  // Label count for range checks; 0 infers max(label) + 1.
  std::size_t num_classes = 0;
  // Standardize with `scaler` if given, else with statistics of this file.
  bool standardize = true;
  const FeatureScaler* scaler = nullptr;
};

// CSV: comma-separated, optional header row, integer label in the last column.
// Binary: "LTD1", u32 count, u32 dim, f64 features row-major, u32 labels, all
// little-endian. Errors carry the path (and line number for CSV).
Dataset ingest_table(const std::filesystem::path& path, TableFormat format,
                     const IngestOptions& options = {});

void write_csv(const Dataset& data, const std::filesystem::path& path);
void write_binary(const Dataset& data, const std::filesystem::path& path);

}  // namespace nbnlab
