#pragma once

// Ablation grids: a base experiment, a set of axes and a seed count. Every
// (cell, seed) run is recorded in a JSON-lines ledger so an interrupted sweep
// resumes where it stopped.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nbnlab/experiment.hpp"

namespace nbnlab {

struct SweepSpec {
  ExperimentConfig base;
  // Axis name -> values as text. Known axes: policy, var_reg, scope,
  // freeze_g, loss, logit_rectifier, imbalance_factor, two_stage,
  // stage2_update_g.
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::size_t seeds = 5;
  std::uint64_t first_seed = 0;
};

// {"base": {...config...}, "axes": {"policy": ["baseline-bn", "ours"]},
//  "seeds": 5, "first_seed": 0}. Axis values may be strings, numbers or bools.
SweepSpec parse_sweep_spec(const std::string& text);
SweepSpec load_sweep_spec(const std::filesystem::path& path);

struct SweepCell {
  std::string key;  // "policy=ours,var_reg=0"; "base" with no axes
  std::map<std::string, std::string> values;
  ExperimentConfig config;  // seed not yet applied
};

// Cartesian product in axis order. Throws ConfigError for unknown axes or
// values, and for combinations that fail validation.
std::vector<SweepCell> expand_cells(const SweepSpec& spec);

struct SweepRun {
  std::string cell;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double overall = 0.0, tail = 0.0, medium = 0.0, head = 0.0;
  double balance_cv = 0.0;
  double var_mean = 0.0, var_std = 0.0;
  double pattern_a = 0.0, g_initial = 0.0, g_final = 0.0;
};

struct CellSummary {
  std::string cell;
  std::size_t runs = 0;
  std::size_t failed = 0;
  // metric name -> (mean, sample std)
  std::map<std::string, std::pair<double, double>> stats;
};

struct SweepOptions {
  std::filesystem::path out_dir;
  std::size_t workers = 1;
  // Called after each completed run (from worker threads, serialized).
  std::function<void(const SweepRun&, std::size_t done, std::size_t total)> progress;
};

struct SweepResult {
  std::vector<SweepRun> runs;       // ledger order
  std::vector<CellSummary> cells;   // expand_cells order
  std::size_t executed = 0;         // runs performed by this call
};

// Writes ledger.jsonl (append-only), summary.csv and spec.json in out_dir.
SweepResult run_sweep(const SweepSpec& spec, const SweepOptions& options);

std::vector<CellSummary> summarize_runs(const std::vector<SweepCell>& cells,
                                        const std::vector<SweepRun>& runs);
void write_summary_csv(const std::filesystem::path& path, const std::vector<CellSummary>& cells);

// min(requested, NBNLAB_THREADS) when the variable is set, at least 1.
std::size_t effective_workers(std::size_t requested);

}  // namespace nbnlab
