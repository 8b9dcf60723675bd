#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "nahtm/embedding_store.h"
#include "nahtm/error.h"
#include "oracles.h"

using namespace nahtm;
using namespace nahtm::embeddings;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::path(NAHTM_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("synthetic embeddings align with the corpus") {
  const auto c = testing::tiny_corpus();
  const EmbeddingSet e = synth_embeddings(c, 6, 3);
  CHECK(e.dim == 6);
  CHECK(e.words.rows == c.vocab.size());
  CHECK(e.sentences.rows == c.num_sentences());
  REQUIRE(e.docs.has_value());
  CHECK(e.docs->rows == c.num_docs());
  validate(e, c);
  for (std::size_t r = 0; r < e.sentences.rows; ++r) {
    double n = 0.0;
    for (double v : e.sentences.row(r)) n += v * v;
    CHECK(std::sqrt(n) == doctest::Approx(1.0));
  }
  CHECK(synth_embeddings(c, 6, 3) == e);
  CHECK_FALSE(synth_embeddings(c, 6, 4) == e);
}

TEST_CASE("pooling uses count-weighted word means") {
  const auto c = testing::tiny_corpus();
  Matrix words(c.vocab.size(), 2);
  for (std::size_t v = 0; v < words.rows; ++v) {
    words(v, 0) = static_cast<double>(v);
    words(v, 1) = 1.0;
  }
  const EmbeddingSet e = pool_word_embeddings(c, words, "test", false);
  const auto& s0 = c.docs[0].sentences[0];
  double num = 0.0, den = 0.0;
  for (const auto& [v, n] : s0) {
    num += n * static_cast<double>(v);
    den += n;
  }
  CHECK(e.sentences(0, 0) == doctest::Approx(num / den));
  CHECK(e.sentences(0, 1) == doctest::Approx(1.0));
  const Matrix derived = derive_doc_embeddings_mean(e.sentences, e.sentence_counts);
  CHECK(derived == *e.docs);
}

TEST_CASE("save and read round trip bit-exactly") {
  const auto c = testing::tiny_corpus();
  EmbeddingSet e = synth_embeddings(c, 5, 1);
  const fs::path d = fresh_dir("rt");
  save_embeddings(e, d);
  CHECK(read_embeddings(d) == e);
  CHECK(load_embeddings(d, c) == e);

  e.docs.reset();
  const fs::path d2 = fresh_dir("rt_nodocs");
  save_embeddings(e, d2);
  const EmbeddingSet back = read_embeddings(d2);
  CHECK(back.docs_derivable());
  CHECK(document_embeddings(back) == derive_doc_embeddings_mean(back.sentences, back.sentence_counts));
}

TEST_CASE("alignment errors name the level") {
  const auto c = testing::tiny_corpus();
  const EmbeddingSet good = synth_embeddings(c, 4, 1);

  auto level_of = [&](const EmbeddingSet& e) {
    try {
      validate(e, c);
    } catch (const AlignmentError& err) {
      return err.level();
    }
    return std::string("none");
  };
  CHECK(level_of(good) == "none");

  EmbeddingSet e = good;
  e.words = Matrix(c.vocab.size() + 1, 4);
  CHECK(level_of(e) == "words");

  e = good;
  e.sentence_counts[0] += 1;
  CHECK(level_of(e) == "sentences");

  e = good;
  e.sentence_counts.pop_back();
  CHECK(level_of(e) == "documents");

  e = good;
  e.docs = Matrix(c.num_docs() - 1, 4);
  CHECK(level_of(e) == "documents");

  e = good;
  e.corpus_checksum = "0000000000000000";
  CHECK(level_of(e) == "header");

  e = good;
  e.words(0, 0) = std::nan("");
  CHECK_THROWS_AS(validate(e, c), DataError);
}

TEST_CASE("truncated payloads are rejected") {
  const auto c = testing::tiny_corpus();
  const fs::path d = fresh_dir("trunc");
  save_embeddings(synth_embeddings(c, 3, 1), d);
  fs::resize_file(d / "sentences.bin", fs::file_size(d / "sentences.bin") - 8);
  CHECK_THROWS_AS(read_embeddings(d), AlignmentError);
}
