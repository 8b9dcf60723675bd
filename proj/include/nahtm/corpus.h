#pragma once

// Document- and sentence-level bag-of-words corpora.
//
// A corpus keeps, per document, the document count vector, one count vector
// per retained sentence, the in-vocabulary token stream (the reference for
// sliding-window coherence) and the raw text of the retained sentences (the
// input an external sentence encoder needs).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace nahtm::corpus {

// (word index, count) pairs in ascending index order, counts > 0.
using SparseVector = std::vector<std::pair<std::uint32_t, std::uint32_t>>;

enum class Split { kTrain, kValid, kTest };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

class Vocabulary {
 public:
  Vocabulary() = default;
  // Index of a word is its position in `words`. Frequencies default to zero.
  explicit Vocabulary(std::vector<std::string> words, std::vector<std::uint64_t> frequencies = {});

  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t index) const { return words_.at(index); }
  std::optional<std::uint32_t> find(std::string_view word) const;
  const std::vector<std::string>& words() const { return words_; }
  const std::vector<std::uint64_t>& frequencies() const { return frequencies_; }

  bool operator==(const Vocabulary& other) const {
    return words_ == other.words_ && frequencies_ == other.frequencies_;
  }

 private:
  std::vector<std::string> words_;
  std::vector<std::uint64_t> frequencies_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct PreprocessOptions {
  std::size_t max_vocab = 10000;
  std::size_t max_sentences = 50;
  bool remove_stopwords = true;
  // Replaces the built-in English list when non-empty.
  std::vector<std::string> stopwords;
  bool stem = false;
  std::size_t min_token_length = 1;
  // Count the document vector over the retained (capped) sentences only.
  bool cap_document_bow = false;

  bool operator==(const PreprocessOptions&) const = default;
};

struct Document {
  std::string id;
  Split split = Split::kTrain;
  SparseVector counts;
  std::vector<SparseVector> sentences;
  std::vector<std::uint32_t> tokens;
  std::vector<std::string> sentence_text;
  // More sentences existed than max_sentences.
  bool truncated = false;

  std::uint64_t length() const;
  bool operator==(const Document&) const = default;
};

struct BowCorpus {
  Vocabulary vocab;
  std::vector<Document> docs;
  PreprocessOptions options;

  std::size_t num_docs() const { return docs.size(); }
  std::size_t num_sentences() const;
  // Prefix sums of J_i; size I + 1. Sentence j of document i has global
  // index offsets[i] + j.
  std::vector<std::size_t> sentence_offsets() const;
  std::vector<std::size_t> indices(Split split) const;
  // Throws DataError when any structural invariant is violated.
  void validate() const;

  bool operator==(const BowCorpus&) const = default;
};

struct RawDocument {
  std::string id;
  std::string text;
};

// One document given as sentences of vocabulary indices, with optional raw
// sentence text (same length as `sentences` when present).
struct TokenizedDocument {
  std::string id;
  std::vector<std::vector<std::uint32_t>> sentences;
  std::vector<std::string> sentence_text;
};

BowCorpus build_corpus(std::span<const RawDocument> raw_docs, const PreprocessOptions& options);

// Builds count vectors from pre-tokenized documents over a fixed vocabulary.
// Empty sentences and empty documents are dropped; the sentence cap of
// `options` applies.
BowCorpus assemble_corpus(Vocabulary vocab, std::span<const TokenizedDocument> docs,
                          const PreprocessOptions& options);

// Deterministic shuffled train/valid/test assignment; each ratio must be
// positive and the three must sum to 1.
BowCorpus split_corpus(BowCorpus corpus, std::array<double, 3> ratios, std::uint64_t seed);

inline constexpr int kCorpusFormatVersion = 1;

// Writes vocab.txt, docs.jsonl and meta.json into `dir`.
void save_corpus(const BowCorpus& corpus, const std::filesystem::path& dir);
BowCorpus load_corpus(const std::filesystem::path& dir);

// FNV-1a 64 over the serialized vocabulary and documents, as 16 hex digits.
std::string corpus_checksum(const BowCorpus& corpus);

// Summary statistics: I, V and the average document length.
struct CorpusSummary {
  std::size_t num_docs = 0;
  std::size_t vocab_size = 0;
  std::size_t num_sentences = 0;
  double avg_doc_length = 0.0;
  // Average length over retained sentences only.
  double avg_sentence_capped_length = 0.0;
};
CorpusSummary summarize(const BowCorpus& corpus);

}  // namespace nahtm::corpus
