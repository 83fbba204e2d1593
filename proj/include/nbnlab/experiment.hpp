#pragma once

// Experiment configuration documents and the end-to-end run pipeline shared by
// the command-line tool, the sweep runner and the tests.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>

#include "nbnlab/analysis.hpp"
#include "nbnlab/data.hpp"
#include "nbnlab/model.hpp"
#include "nbnlab/training.hpp"

namespace nbnlab {

struct GroupConfig {
  double tail_max = 20.0;
  double head_min = 100.0;
  // Multiply both cutoffs by n_max / 1280 (ignored for external data).
  bool scale_with_n_max = true;

  bool operator==(const GroupConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  LongTailSpec data;
  GroupConfig groups;
  ModelConfig model;
  OptimizerConfig optimizer;
  std::optional<TwoStageConfig> two_stage;
  bool freeze_g = false;
  // Test-set evaluation cadence in steps; 0 evaluates at the end only.
  std::size_t eval_every = 0;
  // Periodic checkpoint cadence for the train command; 0 disables.
  std::size_t checkpoint_every = 0;

  // Cross-section checks (e.g. data and model agree on dimensions). Throws
  // std::invalid_argument naming the field.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;

  // The data spec, model seed and sampler seed derived from `seed`.
  LongTailSpec data_spec() const;
  std::uint64_t model_seed() const;
  OptimizerConfig optimizer_config() const;
};

// JSON text. Every field is optional on input; unknown keys raise
// ConfigError naming the full key path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

ExperimentConfig parse_config(const std::string& text);
std::string serialize_config(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

GroupThresholds thresholds_for(const GroupConfig& groups, std::size_t n_max);

struct PreparedData {
  Dataset train;
  Dataset test;
  std::vector<Group> groups;
  FeatureScaler scaler;
};

// Standardizes both splits with statistics of the training split and assigns
// class groups from the training counts.
PreparedData prepare_data(Dataset train, Dataset test, const GroupThresholds& thresholds);
PreparedData prepare_synthetic(const ExperimentConfig& config);

struct RunResult {
  GroupReport report;
  double balance_cv = std::numeric_limits<double>::quiet_NaN();
  FeatureStatVariance feature_stats;
  double pattern_a_fraction = 0.0;
  double g_initial = std::numeric_limits<double>::quiet_NaN();
  double g_final = std::numeric_limits<double>::quiet_NaN();
  RunLog log;
};

// Builds the model, trains (one or two stages) and evaluates on the test set.
RunResult run_experiment(const ExperimentConfig& config, const PreparedData& data,
                         std::optional<Model>* trained = nullptr);

// Fills the summary fields of a RunResult from a trained model and its log.
void summarize(RunResult& result, Model& model, const PreparedData& data);

}  // namespace nbnlab
