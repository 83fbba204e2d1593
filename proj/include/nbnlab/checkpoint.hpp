#pragma once

// Versioned binary checkpoints.
//
// Layout (little-endian): 8-byte magic "NBNLCKPT", u32 format version, u64
// header length, a JSON header of that length, then every tensor listed in
// the header as raw f64 values in header order.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "nbnlab/model.hpp"
#include "nbnlab/training.hpp"

namespace nbnlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainerSnapshot {
  int stage = 1;
  TrainerState state;
};

struct Checkpoint {
  ModelConfig model_config;
  std::optional<Model> model;
  std::optional<TrainerSnapshot> trainer;
  // Serialized experiment config the run was started with, or empty.
  std::string experiment;
};

void save_checkpoint(const std::filesystem::path& path, Model& model,
                     const TrainerSnapshot* trainer = nullptr,
                     const std::string& experiment = {});

Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace nbnlab
