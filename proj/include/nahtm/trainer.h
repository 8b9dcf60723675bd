#pragma once

// Minibatch Adam training with validation-perplexity model selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nahtm/checkpoint.h"
#include "nahtm/model.h"

namespace nahtm::train {

struct TrainConfig {
  model::HyperParams hyper;
  double learning_rate = 0.002;
  std::size_t batch_size = 20;
  std::size_t max_epochs = 100;
  // Epochs without a strict validation improvement before stopping.
  std::size_t patience = 10;
  std::uint64_t seed = 42;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Sets one configuration entry from its textual value. Keys are the
// HyperParams field names plus learning_rate, batch_size, max_epochs,
// patience and seed. Throws ConfigError naming the key.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);
// Every key accepted by apply_setting with its current value, in a fixed order.
std::vector<std::pair<std::string, std::string>> settings(const TrainConfig& cfg);
// Shortest text that parses back to the same double.
std::string format_double(double v);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState init(std::span<const model::NamedTensor> params);
};

// One bias-corrected Adam update from the accumulated gradients. Throws
// NumericError naming the tensor when a gradient is not finite.
void adam_step(std::span<const model::NamedTensor> params, AdamState& state, double lr);

struct EpochRecord {
  std::size_t epoch = 0;
  // Per-document averages over the training split.
  double train_loss = 0.0;
  double doc_ll = 0.0;
  double sent_ll = 0.0;
  double q_doc = 0.0;
  double q_sent = 0.0;
  double q_word = 0.0;
  double valid_perplexity = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path);
std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);

struct TrainResult {
  Checkpoint best;
  std::vector<EpochRecord> history;
  double initial_valid_perplexity = 0.0;
  double best_valid_perplexity = 0.0;
  std::size_t best_epoch = 0;
  // Parameters after the last completed epoch.
  model::ModelParams last;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const model::ModelData& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Trains from already-initialized parameters (used by tests to control the
// starting point).
TrainResult train_from(const model::ModelData& data, const TrainConfig& cfg, model::ModelParams params,
                       const EpochCallback& on_epoch = {});

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

struct GridRun {
  TrainConfig config;
  double valid_perplexity = 0.0;
};

struct GridResult {
  std::size_t best_index = 0;
  std::vector<GridRun> runs;  // cartesian order, first axis varying slowest
  const TrainConfig& best() const { return runs.at(best_index).config; }
};

// Trains every combination and keeps the lowest best-validation perplexity;
// ties go to the earlier combination.
GridResult grid_search(const model::ModelData& data, const TrainConfig& base, std::span<const GridAxis> grid,
                       std::size_t jobs = 1);

}  // namespace nahtm::train
