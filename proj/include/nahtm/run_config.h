#pragma once

// Run configuration files.
//
// A flat list of `key = value` lines; `#` starts a comment and values may be
// double-quoted. Every key has a default, unknown keys are rejected, and
// to_text() writes every key so a snapshot reproduces the run exactly.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "nahtm/corpus.h"
#include "nahtm/trainer.h"

namespace nahtm {

struct SynthEmbeddingSpec {
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  bool operator==(const SynthEmbeddingSpec&) const = default;
};

struct RunConfig {
  train::TrainConfig train;
  corpus::PreprocessOptions preprocess;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 1;
  std::filesystem::path corpus_dir;
  std::filesystem::path embeddings_dir;
  std::filesystem::path output_dir;
  std::filesystem::path reference_dir;
  std::optional<SynthEmbeddingSpec> synth_embeddings;

  // Throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

// Errors carry "<source>:<line>".
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

// Applies NAHTM_SEED from the environment when set.
void apply_seed_override(RunConfig& cfg);

}  // namespace nahtm
