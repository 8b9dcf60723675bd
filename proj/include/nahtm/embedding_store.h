#pragma once

// External pre-trained embeddings at word, sentence and document level.
//
// On disk an embedding set is a directory holding header.json plus
// words.bin (V x M), sentences.bin (sum_i J_i x M, documents concatenated in
// corpus order) and optionally docs.bin (I x M); payloads are row-major
// float64 little-endian.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nahtm/corpus.h"
#include "nahtm/matrix.h"

namespace nahtm::embeddings {

inline constexpr int kEmbeddingFormatVersion = 1;

struct EmbeddingSet {
  std::size_t dim = 0;
  Matrix words;
  std::vector<std::size_t> sentence_counts;
  Matrix sentences;
  // Absent means document embeddings are derived as sentence means.
  std::optional<Matrix> docs;
  std::string provenance;
  // Checksum of the corpus the set was built against; empty when unknown.
  std::string corpus_checksum;

  bool docs_derivable() const { return !docs.has_value(); }
  bool operator==(const EmbeddingSet&) const = default;
};

// Throws AlignmentError naming the level (words/sentences/documents) when
// row counts disagree with the corpus, DataError on non-finite entries.
void validate(const EmbeddingSet& set, const corpus::BowCorpus& corpus);

void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& dir);
// Reads and checks internal consistency only.
EmbeddingSet read_embeddings(const std::filesystem::path& dir);
// Reads and validates against `corpus`.
EmbeddingSet load_embeddings(const std::filesystem::path& dir, const corpus::BowCorpus& corpus);

// Row i is the arithmetic mean of document i's sentence rows.
Matrix derive_doc_embeddings_mean(const Matrix& sentences, std::span<const std::size_t> sentence_counts);

// The stored document embeddings, or the sentence means when absent.
Matrix document_embeddings(const EmbeddingSet& set);

// Builds sentence embeddings as count-weighted means of the word rows of
// each sentence and document embeddings as means of sentence rows. With
// `unit_norm`, every row of all three levels is scaled to unit length.
EmbeddingSet pool_word_embeddings(const corpus::BowCorpus& corpus, Matrix words, std::string provenance,
                                  bool unit_norm);

// Deterministic pseudo-random word embeddings pooled as above.
EmbeddingSet synth_embeddings(const corpus::BowCorpus& corpus, std::size_t dim, std::uint64_t seed);

}  // namespace nahtm::embeddings
