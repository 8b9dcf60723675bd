#pragma once

// Held-out perplexity, topic extraction and NPMI coherence.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nahtm/corpus.h"
#include "nahtm/matrix.h"
#include "nahtm/model.h"

namespace nahtm::eval {

enum class Level { kDocument, kSentence };

// Log-likelihood and token count of every scored unit (document or
// sentence) of `docs`, using posterior means throughout.
struct UnitLikelihoods {
  std::vector<double> loglik;
  std::vector<double> length;
};
UnitLikelihoods unit_likelihoods(const model::ModelParams& p, const model::HyperParams& hp,
                                 const model::ModelData& data, std::span<const std::size_t> docs, Level level,
                                 std::size_t batch_size = 64);

// exp(-(1/I) sum_i loglik_i / N_i). Units with N_i = 0 are skipped.
double perplexity_from(const UnitLikelihoods& u);

double perplexity(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data,
                  std::span<const std::size_t> docs, Level level, std::size_t batch_size = 64);

// Phi^B + gamma1 * mean(Phi^E), V x K.
Matrix combined_topic_matrix(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data);

// Per column, the n largest rows in descending order; ties go to the lower
// row index.
std::vector<std::vector<std::size_t>> top_words(const Matrix& phi, std::size_t n = 10);

// Mean over sentences of ||mean(s_B) - mean(z_B of its document)||.
double sentence_doc_distance(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data,
                             std::span<const std::size_t> docs);

inline constexpr std::size_t kNpmiWindow = 10;
inline constexpr double kNpmiEpsilon = 1e-12;

// Window co-occurrence statistics of a reference collection. Windows of
// `window` tokens slide by one and stay inside a document; a document with
// at most `window` tokens is a single window.
class NpmiReference {
 public:
  NpmiReference(const corpus::Vocabulary& vocab, std::span<const std::vector<std::uint32_t>> token_streams,
                std::size_t window = kNpmiWindow);
  static NpmiReference from_corpus(const corpus::BowCorpus& corpus, std::span<const std::size_t> docs,
                                   std::size_t window = kNpmiWindow);

  std::uint64_t num_windows() const { return num_windows_; }
  // Number of windows containing the word; 0 when unknown.
  std::uint64_t count(const std::string& word) const;
  std::uint64_t joint_count(const std::string& a, const std::string& b) const;
  // Empty when either word never occurs in the reference.
  std::optional<double> npmi(const std::string& a, const std::string& b) const;

 private:
  const std::vector<std::uint64_t>& windows_of(std::uint32_t word) const;

  std::unordered_map<std::string, std::uint32_t> index_;
  // Per word, the inclusive range of global window ids covering each occurrence.
  std::vector<std::vector<std::pair<std::uint64_t, std::uint64_t>>> spans_;
  mutable std::unordered_map<std::uint32_t, std::vector<std::uint64_t>> cache_;
  std::uint64_t num_windows_ = 0;
};

struct Coverage {
  std::size_t words_missing = 0;
  std::size_t pairs_scored = 0;
  std::size_t pairs_skipped = 0;
};

struct TopicCoherence {
  std::vector<std::optional<double>> per_topic;  // empty when no pair was scorable
  std::optional<double> mean;
  Coverage coverage;
};
TopicCoherence topic_npmi(const std::vector<std::vector<std::string>>& topics, const NpmiReference& ref);

struct Topic {
  std::vector<std::string> words;
  std::vector<double> scores;
};

struct Metrics {
  double doc_perplexity = 0.0;
  double sent_perplexity = 0.0;
  std::vector<Topic> topics;
  TopicCoherence internal;
  std::optional<TopicCoherence> external;
  double sentence_doc_distance = 0.0;

  nlohmann::json to_json() const;
  // One line per topic: index, NPMI and the top words.
  std::string topic_report() const;
};

// Scores the `split` of the corpus. Internal NPMI uses the training split as
// the reference; external NPMI is computed only when `external` is given.
Metrics evaluate(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data,
                 corpus::Split split, const corpus::BowCorpus* external = nullptr, std::size_t top_n = 10);

// Line chart of validation perplexity against epoch.
std::string perplexity_svg(std::span<const double> epochs, std::span<const double> values);

}  // namespace nahtm::eval
