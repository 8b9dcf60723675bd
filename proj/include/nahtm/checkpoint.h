#pragma once

// Model checkpoints.
//
// Layout: the 8 magic bytes "NAHTMCKP", a little-endian u64 header length,
// a JSON header (dimensions, hyperparameters, training position, metadata and
// the ordered tensor list) and then every tensor as row-major float64
// little-endian in header order.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "nahtm/model.h"

namespace nahtm {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  model::HyperParams hyper;
  model::ModelParams params;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  // Free-form provenance, e.g. the embedding source used for training.
  std::map<std::string, std::string> metadata;
};

nlohmann::json hyper_to_json(const model::HyperParams& hp);
// Missing keys keep their defaults; unknown keys throw ConfigError.
model::HyperParams hyper_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nahtm
