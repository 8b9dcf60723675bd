#include "nahtm/embedding_store.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nahtm/error.h"
#include "nahtm/rng.h"

namespace nahtm::embeddings {

using json = nlohmann::ordered_json;

namespace {

std::size_t total(std::span<const std::size_t> counts) {
  std::size_t n = 0;
  for (std::size_t c : counts) n += c;
  return n;
}

void check_finite(const Matrix& m, const std::string& level) {
  for (double v : m.data) {
    if (!std::isfinite(v)) throw DataError(level + ": non-finite embedding entry");
  }
}

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& level) {
  if (m.rows != rows) {
    throw AlignmentError(level, "expected " + std::to_string(rows) + " rows, found " + std::to_string(m.rows));
  }
  if (m.cols != cols) {
    throw AlignmentError(level, "expected dimension " + std::to_string(cols) + ", found " + std::to_string(m.cols));
  }
  if (m.data.size() != rows * cols) throw AlignmentError(level, "payload size disagrees with shape");
}

void write_f64(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (double v : m.data) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
  if (!out) throw DataError("write failed for " + path.string());
}

Matrix read_f64(const std::filesystem::path& path, std::size_t rows, std::size_t cols, const std::string& level) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() != rows * cols * 8) {
    throw AlignmentError(level, path.filename().string() + " holds " + std::to_string(bytes.size()) +
                                    " bytes, header implies " + std::to_string(rows * cols * 8));
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
    }
    m.data[i] = std::bit_cast<double>(bits);
  }
  return m;
}

void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    auto row = m.row(r);
    double n2 = 0.0;
    for (double v : row) n2 += v * v;
    if (n2 > 0.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (double& v : row) v *= inv;
    }
  }
}

}  // namespace

void validate(const EmbeddingSet& set, const corpus::BowCorpus& corpus) {
  if (set.dim == 0) throw AlignmentError("header", "embedding dimension must be at least 1");
  check_shape(set.words, corpus.vocab.size(), set.dim, "words");
  if (set.sentence_counts.size() != corpus.docs.size()) {
    throw AlignmentError("documents", "embedding set covers " + std::to_string(set.sentence_counts.size()) +
                                          " documents, corpus has " + std::to_string(corpus.docs.size()));
  }
  for (std::size_t i = 0; i < corpus.docs.size(); ++i) {
    if (set.sentence_counts[i] != corpus.docs[i].sentences.size()) {
      throw AlignmentError("sentences", "document " + std::to_string(i) + " has " +
                                            std::to_string(set.sentence_counts[i]) + " sentence embeddings, corpus has " +
                                            std::to_string(corpus.docs[i].sentences.size()) + " sentences");
    }
  }
  check_shape(set.sentences, corpus.num_sentences(), set.dim, "sentences");
  if (set.docs) check_shape(*set.docs, corpus.docs.size(), set.dim, "documents");
  if (!set.corpus_checksum.empty() && set.corpus_checksum != corpus::corpus_checksum(corpus)) {
    throw AlignmentError("header", "corpus checksum differs from the paired corpus");
  }
  check_finite(set.words, "words");
  check_finite(set.sentences, "sentences");
  if (set.docs) check_finite(*set.docs, "documents");
}

void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json h;
  h["format"] = "nahtm-embeddings";
  h["format_version"] = kEmbeddingFormatVersion;
  h["M"] = set.dim;
  h["V"] = set.words.rows;
  h["I"] = set.sentence_counts.size();
  h["J"] = set.sentence_counts;
  h["provenance"] = set.provenance;
  h["has_docs"] = set.docs.has_value();
  if (!set.corpus_checksum.empty()) h["corpus_checksum"] = set.corpus_checksum;
  {
    std::ofstream out(dir / "header.json", std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / "header.json").string());
    out << h.dump(2) << "\n";
  }
  write_f64(dir / "words.bin", set.words);
  write_f64(dir / "sentences.bin", set.sentences);
  if (set.docs) {
    write_f64(dir / "docs.bin", *set.docs);
  } else {
    std::filesystem::remove(dir / "docs.bin");
  }
}

EmbeddingSet read_embeddings(const std::filesystem::path& dir) {
  json h;
  {
    std::ifstream in(dir / "header.json", std::ios::binary);
    if (!in) throw DataError("cannot read " + (dir / "header.json").string());
    try {
      h = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError("header.json: " + std::string(e.what()));
    }
  }
  EmbeddingSet set;
  std::size_t V = 0;
  bool has_docs = false;
  try {
    if (h.at("format").get<std::string>() != "nahtm-embeddings") throw ParseError("header.json: not an embedding set");
    const int version = h.at("format_version").get<int>();
    if (version != kEmbeddingFormatVersion) {
      throw DataError("header.json: unsupported embedding format version " + std::to_string(version));
    }
    set.dim = h.at("M").get<std::size_t>();
    V = h.at("V").get<std::size_t>();
    set.sentence_counts = h.at("J").get<std::vector<std::size_t>>();
    if (h.at("I").get<std::size_t>() != set.sentence_counts.size()) {
      throw AlignmentError("documents", "header I disagrees with the J list");
    }
    set.provenance = h.value("provenance", std::string());
    set.corpus_checksum = h.value("corpus_checksum", std::string());
    has_docs = h.value("has_docs", false);
  } catch (const json::exception& e) {
    throw ParseError("header.json: " + std::string(e.what()));
  }
  if (set.dim == 0) throw AlignmentError("header", "embedding dimension must be at least 1");
  set.words = read_f64(dir / "words.bin", V, set.dim, "words");
  set.sentences = read_f64(dir / "sentences.bin", total(set.sentence_counts), set.dim, "sentences");
  if (has_docs) set.docs = read_f64(dir / "docs.bin", set.sentence_counts.size(), set.dim, "documents");
  return set;
}

EmbeddingSet load_embeddings(const std::filesystem::path& dir, const corpus::BowCorpus& corpus) {
  EmbeddingSet set = read_embeddings(dir);
  validate(set, corpus);
  return set;
}

Matrix derive_doc_embeddings_mean(const Matrix& sentences, std::span<const std::size_t> sentence_counts) {
  Matrix out(sentence_counts.size(), sentences.cols);
  std::size_t at = 0;
  for (std::size_t i = 0; i < sentence_counts.size(); ++i) {
    const std::size_t J = sentence_counts[i];
    auto dst = out.row(i);
    for (std::size_t j = 0; j < J; ++j) {
      auto src = sentences.row(at + j);
      for (std::size_t m = 0; m < dst.size(); ++m) dst[m] += src[m];
    }
    if (J > 0) {
      for (double& v : dst) v /= static_cast<double>(J);
    }
    at += J;
  }
  return out;
}

Matrix document_embeddings(const EmbeddingSet& set) {
  if (set.docs) return *set.docs;
  return derive_doc_embeddings_mean(set.sentences, set.sentence_counts);
}

EmbeddingSet pool_word_embeddings(const corpus::BowCorpus& corpus, Matrix words, std::string provenance,
                                  bool unit_norm) {
  if (words.rows != corpus.vocab.size()) {
    throw AlignmentError("words", "word matrix rows differ from vocabulary size");
  }
  if (words.cols == 0) throw AlignmentError("header", "embedding dimension must be at least 1");
  EmbeddingSet set;
  set.dim = words.cols;
  if (unit_norm) normalize_rows(words);
  set.words = std::move(words);
  set.sentences = Matrix(corpus.num_sentences(), set.dim);
  std::size_t at = 0;
  for (const corpus::Document& d : corpus.docs) {
    set.sentence_counts.push_back(d.sentences.size());
    for (const auto& sent : d.sentences) {
      auto dst = set.sentences.row(at++);
      double n = 0.0;
      for (const auto& [idx, c] : sent) {
        auto src = set.words.row(idx);
        for (std::size_t m = 0; m < dst.size(); ++m) dst[m] += c * src[m];
        n += c;
      }
      for (double& v : dst) v /= n;
    }
  }
  if (unit_norm) normalize_rows(set.sentences);
  Matrix docs = derive_doc_embeddings_mean(set.sentences, set.sentence_counts);
  if (unit_norm) normalize_rows(docs);
  set.docs = std::move(docs);
  set.provenance = std::move(provenance);
  set.corpus_checksum = corpus::corpus_checksum(corpus);
  return set;
}

EmbeddingSet synth_embeddings(const corpus::BowCorpus& corpus, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw AlignmentError("header", "embedding dimension must be at least 1");
  Matrix words(corpus.vocab.size(), dim);
  CounterRng rng(derive_key({seed, 0x656d626564ULL}));
  rng.fill_normal(words.data);
  return pool_word_embeddings(corpus, std::move(words),
                              "synthetic:dim=" + std::to_string(dim) + ",seed=" + std::to_string(seed), true);
}

}  // namespace nahtm::embeddings
