#pragma once

// SGD training loops: single-stage joint training and the two-stage
// (representation, then classifier-only) protocol, with per-step logging of
// every NBN magnitude and its gradient pattern.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbnlab/analysis.hpp"
#include "nbnlab/data.hpp"
#include "nbnlab/model.hpp"

namespace nbnlab {

enum class Schedule { cosine, constant };
std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& text);

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  std::size_t total_iterations = 3000;
  std::size_t warmup_iterations = 200;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

struct TwoStageConfig {
  std::size_t stage2_iterations = 600;
  bool stage2_update_g = false;
  // Stage-2 constant learning rate as a fraction of the stage-1 peak.
  double stage2_lr_factor = 0.1;

  void validate() const;
  bool operator==(const TwoStageConfig&) const = default;
};

// Linear ramp from 0 over the warmup, then cosine decay (or constant).
double lr_at(std::size_t step, const OptimizerConfig& config);

// v = momentum * v + (grad + weight_decay * p); p -= lr * v.
void sgd_step(std::span<double> params, std::span<const double> grads,
              std::span<double> velocity, double momentum, double weight_decay, double lr);

struct StepRecord {
  std::size_t step = 0;
  int stage = 1;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> g;      // one per magnitude, before the update
  std::vector<double> alpha;  // -dL/dg
  std::vector<char> pattern;  // 'A', 'B' or 'N'

  bool operator==(const StepRecord&) const = default;
};

struct EvalRecord {
  std::size_t step = 0;
  GroupReport report;
};

struct RunLog {
  std::vector<std::string> magnitude_names;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  // Columns step, loss, lr, g, alpha, pattern, stage. Multiple magnitudes are
  // joined with ';' inside a field.
  void write_csv(const std::filesystem::path& path) const;
  static RunLog read_csv(const std::filesystem::path& path);
  void write_eval_csv(const std::filesystem::path& path) const;
  // Reads the group accuracies back into `evals` (per-class detail is not stored).
  void read_eval_csv(const std::filesystem::path& path);

  // Fraction of logged (step, magnitude) pairs tagged pattern A.
  double pattern_a_fraction(int stage = 1) const;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, RunLog log, std::map<std::string, double> norms)
      : std::runtime_error(what), log_(std::move(log)), norms_(std::move(norms)) {}
  const RunLog& log() const { return log_; }
  const std::map<std::string, double>& parameter_norms() const { return norms_; }

 private:
  RunLog log_;
  std::map<std::string, double> norms_;
};

enum class Sampling { instance, class_balanced };

struct PhaseConfig {
  OptimizerConfig optimizer;
  Sampling sampling = Sampling::instance;
  int stage = 1;
  // Classifier-only training with the backbone in eval mode.
  bool classifier_only = false;
  // With classifier_only: also update the NBN magnitudes.
  bool update_g = false;
  // First global step number used in the log.
  std::size_t step_offset = 0;
};

struct EvalOptions {
  const Dataset* test = nullptr;
  std::vector<Group> groups;
  // 0 evaluates only at the end of the phase.
  std::size_t every = 0;
};

// Everything needed to continue a phase exactly where it stopped.
struct TrainerState {
  std::size_t step = 0;  // local to the phase
  std::map<std::string, std::vector<double>> velocity;
  std::string rng;  // std::mt19937_64 textual state
};

class Trainer {
 public:
  Trainer(Model& model, const Dataset& train, PhaseConfig phase, EvalOptions eval = {});

  bool done() const { return step_ >= phase_.optimizer.total_iterations; }
  std::size_t step() const { return step_; }
  // One optimizer step. Throws TrainingAborted on a non-finite loss.
  const StepRecord& step_once();
  // Runs until the phase ends or `max_steps` more steps were taken.
  void run(std::size_t max_steps = SIZE_MAX);

  const RunLog& log() const { return log_; }
  RunLog& log() { return log_; }
  const PhaseConfig& phase() const { return phase_; }

  TrainerState state() const;
  void restore(const TrainerState& state);

 private:
  std::vector<std::size_t> sample_batch();
  Tensor loss_on(const Tensor& x, std::span<const std::size_t> labels);
  bool updates(const Parameter& p) const;
  void maybe_evaluate(bool final_step);

  Model& model_;
  const Dataset& train_;
  PhaseConfig phase_;
  EvalOptions eval_;
  std::vector<double> log_priors_;
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<std::size_t> nonempty_classes_;
  std::mt19937_64 rng_;
  std::size_t step_ = 0;
  std::map<std::string, std::vector<double>> velocity_;
  RunLog log_;
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

RunLog train(Model& model, const Dataset& train, const OptimizerConfig& config,
             const EvalOptions& eval = {});

// Phase description for stage 2 following a stage-1 optimizer config.
PhaseConfig stage2_phase(const OptimizerConfig& stage1, const TwoStageConfig& config);

RunLog two_stage_train(Model& model, const Dataset& train, const OptimizerConfig& stage1,
                       const TwoStageConfig& config, const EvalOptions& eval = {});

// Excludes every NBN magnitude from updates. Throws without NBN layers.
void freeze_magnitude(Model& model);
void unfreeze_magnitude(Model& model);

}  // namespace nbnlab
