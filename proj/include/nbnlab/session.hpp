#pragma once

// Checkpointed, resumable training runs as driven by the train command.
//
// Output directory layout:
//   checkpoints/step_NNNNNN.ckpt (+ .runlog.csv, .eval.csv)
//   final.ckpt, runlog.csv, eval.csv, report.csv

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>

#include "nbnlab/checkpoint.hpp"
#include "nbnlab/experiment.hpp"

namespace nbnlab {

struct SessionOptions {
  std::filesystem::path out_dir;
  // Resume from this checkpoint; its run log is read from the sibling files.
  std::optional<std::filesystem::path> resume;
  // Stop (with a checkpoint) once this many global steps are done.
  std::size_t stop_after = SIZE_MAX;
};

struct SessionResult {
  bool finished = false;
  std::size_t steps_done = 0;
  std::filesystem::path last_checkpoint;
  // Filled only when finished.
  std::optional<RunResult> result;
};

// Periodic checkpoints follow config.checkpoint_every. Resuming requires the
// checkpoint to carry the same serialized config.
SessionResult run_session(const ExperimentConfig& config, const PreparedData& data,
                          const SessionOptions& options);

void write_report_csv(const std::filesystem::path& path, const GroupReport& report);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t step);

}  // namespace nbnlab
