#include "nahtm/corpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "nahtm/error.h"
#include "nahtm/rng.h"
#include "nahtm/text.h"

namespace nahtm::corpus {

using json = nlohmann::ordered_json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "valid") return Split::kValid;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> words, std::vector<std::uint64_t> frequencies)
    : words_(std::move(words)), frequencies_(std::move(frequencies)) {
  if (frequencies_.empty()) frequencies_.assign(words_.size(), 0);
  if (frequencies_.size() != words_.size()) throw DataError("vocabulary: frequency list length mismatch");
  index_.reserve(words_.size());
  for (std::size_t i = 0; i < words_.size(); ++i) {
    const std::string& w = words_[i];
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
      throw DataError("vocabulary: invalid word at index " + std::to_string(i));
    }
    if (!index_.emplace(w, static_cast<std::uint32_t>(i)).second) {
      throw DataError("vocabulary: duplicate word '" + w + "'");
    }
  }
}

std::optional<std::uint32_t> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------- BowCorpus

std::uint64_t Document::length() const {
  std::uint64_t n = 0;
  for (const auto& [idx, c] : counts) n += c;
  return n;
}

std::size_t BowCorpus::num_sentences() const {
  std::size_t n = 0;
  for (const Document& d : docs) n += d.sentences.size();
  return n;
}

std::vector<std::size_t> BowCorpus::sentence_offsets() const {
  std::vector<std::size_t> off(docs.size() + 1, 0);
  for (std::size_t i = 0; i < docs.size(); ++i) off[i + 1] = off[i] + docs[i].sentences.size();
  return off;
}

std::vector<std::size_t> BowCorpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].split == split) out.push_back(i);
  }
  return out;
}

namespace {

void check_sparse(const SparseVector& v, std::size_t vocab_size, const std::string& where) {
  std::uint32_t prev = 0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    const auto [idx, c] = v[k];
    if (idx >= vocab_size) {
      throw DataError(where + ": word index " + std::to_string(idx) + " outside vocabulary of size " +
                      std::to_string(vocab_size));
    }
    if (c == 0) throw DataError(where + ": zero count stored");
    if (k > 0 && idx <= prev) throw DataError(where + ": indices not strictly ascending");
    prev = idx;
  }
}

SparseVector to_sparse(const std::map<std::uint32_t, std::uint32_t>& m) {
  return SparseVector(m.begin(), m.end());
}

}  // namespace

void BowCorpus::validate() const {
  const std::size_t V = vocab.size();
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const Document& d = docs[i];
    const std::string where = "document " + std::to_string(i) + " (" + d.id + ")";
    check_sparse(d.counts, V, where);
    if (d.sentences.empty()) throw DataError(where + ": no sentences");
    if (!d.sentence_text.empty() && d.sentence_text.size() != d.sentences.size()) {
      throw DataError(where + ": sentence text count differs from sentence count");
    }
    std::vector<std::uint64_t> doc(V, 0), colsum(V, 0);
    for (const auto& [idx, c] : d.counts) doc[idx] = c;
    for (std::size_t j = 0; j < d.sentences.size(); ++j) {
      check_sparse(d.sentences[j], V, where + " sentence " + std::to_string(j));
      if (d.sentences[j].empty()) throw DataError(where + ": empty sentence " + std::to_string(j));
      for (const auto& [idx, c] : d.sentences[j]) colsum[idx] += c;
    }
    const bool exact = !d.truncated || options.cap_document_bow;
    for (std::size_t v = 0; v < V; ++v) {
      if (exact ? doc[v] != colsum[v] : doc[v] < colsum[v]) {
        throw DataError(where + ": document counts disagree with sentence counts at word " + std::to_string(v));
      }
    }
    if (!d.tokens.empty()) {
      std::vector<std::uint64_t> tok(V, 0);
      for (std::uint32_t t : d.tokens) {
        if (t >= V) throw DataError(where + ": token outside vocabulary");
        ++tok[t];
      }
      if (tok != doc) throw DataError(where + ": token stream disagrees with document counts");
    }
  }
}

// ---------------------------------------------------------------- building

BowCorpus assemble_corpus(Vocabulary vocab, std::span<const TokenizedDocument> docs,
                          const PreprocessOptions& options) {
  if (options.max_sentences == 0) throw DataError("max_sentences must be positive");
  BowCorpus corpus;
  corpus.options = options;
  const std::size_t V = vocab.size();
  for (const TokenizedDocument& td : docs) {
    if (!td.sentence_text.empty() && td.sentence_text.size() != td.sentences.size()) {
      throw DataError("document " + td.id + ": sentence text count differs from sentence count");
    }
    Document d;
    d.id = td.id;
    std::map<std::uint32_t, std::uint32_t> doc_counts;
    std::size_t kept = 0;
    for (std::size_t j = 0; j < td.sentences.size(); ++j) {
      const auto& sent = td.sentences[j];
      if (sent.empty()) continue;
      const bool retained = kept < options.max_sentences;
      ++kept;
      if (!retained) d.truncated = true;
      if (!retained && options.cap_document_bow) break;
      std::map<std::uint32_t, std::uint32_t> counts;
      for (std::uint32_t w : sent) {
        if (w >= V) throw DataError("document " + td.id + ": token outside vocabulary");
        ++counts[w];
        ++doc_counts[w];
        d.tokens.push_back(w);
      }
      if (retained) {
        d.sentences.push_back(to_sparse(counts));
        if (!td.sentence_text.empty()) d.sentence_text.push_back(td.sentence_text[j]);
      }
    }
    if (d.sentences.empty()) continue;
    d.counts = to_sparse(doc_counts);
    corpus.docs.push_back(std::move(d));
  }
  if (corpus.docs.empty()) throw DataError("empty corpus: every document was filtered away");
  corpus.vocab = std::move(vocab);
  return corpus;
}

BowCorpus build_corpus(std::span<const RawDocument> raw_docs, const PreprocessOptions& options) {
  if (raw_docs.empty()) throw DataError("empty corpus: no input documents");
  std::unordered_set<std::string> custom(options.stopwords.begin(), options.stopwords.end());
  const auto& stopwords = options.stopwords.empty() ? text::english_stopwords() : custom;

  struct Pending {
    std::string id;
    std::vector<std::vector<std::string>> sentences;
    std::vector<std::string> text;
  };
  std::vector<Pending> pending;
  pending.reserve(raw_docs.size());
  std::unordered_map<std::string, std::uint64_t> freq;
  for (const RawDocument& raw : raw_docs) {
    Pending p;
    p.id = raw.id;
    for (std::string& sentence : text::split_sentences(raw.text)) {
      std::vector<std::string> toks;
      for (std::string& tok : text::tokenize(sentence)) {
        if (tok.size() < options.min_token_length) continue;
        if (options.remove_stopwords && stopwords.count(tok)) continue;
        if (options.stem) tok = text::stem(tok);
        toks.push_back(std::move(tok));
      }
      if (toks.empty()) continue;
      for (const std::string& t : toks) ++freq[t];
      p.sentences.push_back(std::move(toks));
      p.text.push_back(std::move(sentence));
    }
    pending.push_back(std::move(p));
  }

  std::vector<std::pair<std::string, std::uint64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (ranked.size() > options.max_vocab) ranked.resize(options.max_vocab);
  std::vector<std::string> words;
  std::vector<std::uint64_t> counts;
  for (auto& [w, c] : ranked) {
    words.push_back(w);
    counts.push_back(c);
  }
  Vocabulary vocab(std::move(words), std::move(counts));

  std::vector<TokenizedDocument> tokenized;
  tokenized.reserve(pending.size());
  for (Pending& p : pending) {
    TokenizedDocument td;
    td.id = std::move(p.id);
    for (std::size_t j = 0; j < p.sentences.size(); ++j) {
      std::vector<std::uint32_t> ids;
      for (const std::string& t : p.sentences[j]) {
        if (auto idx = vocab.find(t)) ids.push_back(*idx);
      }
      // Sentences left empty by the vocabulary cut are dropped with their text.
      if (ids.empty()) continue;
      td.sentences.push_back(std::move(ids));
      td.sentence_text.push_back(std::move(p.text[j]));
    }
    tokenized.push_back(std::move(td));
  }
  return assemble_corpus(std::move(vocab), tokenized, options);
}

BowCorpus split_corpus(BowCorpus corpus, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios) {
    if (!(r > 0.0)) throw DataError("split ratios must all be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw DataError("split ratios must sum to 1");
  }
  const std::size_t n = corpus.docs.size();
  // Largest-remainder apportionment keeps every share within one document.
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = ratios[k] * static_cast<double>(n);
    sizes[k] = static_cast<std::size_t>(std::floor(exact));
    frac[k] = exact - static_cast<double>(sizes[k]);
    assigned += sizes[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  CounterRng rng(derive_key({seed, 0x73706c6974ULL}));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  for (std::size_t p = 0; p < n; ++p) {
    const Split s = p < sizes[0] ? Split::kTrain : (p < sizes[0] + sizes[1] ? Split::kValid : Split::kTest);
    corpus.docs[perm[p]].split = s;
  }
  return corpus;
}

// ---------------------------------------------------------------- persistence

namespace {

std::string encode_sparse(const SparseVector& v) {
  std::string out;
  for (const auto& [idx, c] : v) {
    if (!out.empty()) out.push_back(' ');
    out += std::to_string(idx);
    out.push_back(':');
    out += std::to_string(c);
  }
  return out;
}

SparseVector decode_sparse(const std::string& s, const std::string& where) {
  SparseVector out;
  std::istringstream in(s);
  std::string item;
  while (in >> item) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ParseError(where + ": malformed pair '" + item + "'");
    try {
      std::size_t used = 0;
      const unsigned long idx = std::stoul(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument("index");
      const std::string cs = item.substr(colon + 1);
      const unsigned long c = std::stoul(cs, &used);
      if (used != cs.size()) throw std::invalid_argument("count");
      if (idx > UINT32_MAX || c > UINT32_MAX) throw std::out_of_range("pair");
      out.emplace_back(static_cast<std::uint32_t>(idx), static_cast<std::uint32_t>(c));
    } catch (const std::logic_error&) {
      throw ParseError(where + ": malformed pair '" + item + "'");
    }
  }
  return out;
}

json options_to_json(const PreprocessOptions& o) {
  json j;
  j["max_vocab"] = o.max_vocab;
  j["max_sentences"] = o.max_sentences;
  j["remove_stopwords"] = o.remove_stopwords;
  j["stopwords"] = o.stopwords;
  j["stem"] = o.stem;
  j["min_token_length"] = o.min_token_length;
  j["cap_document_bow"] = o.cap_document_bow;
  return j;
}

PreprocessOptions options_from_json(const json& j) {
  PreprocessOptions o;
  o.max_vocab = j.at("max_vocab").get<std::size_t>();
  o.max_sentences = j.at("max_sentences").get<std::size_t>();
  o.remove_stopwords = j.at("remove_stopwords").get<bool>();
  o.stopwords = j.at("stopwords").get<std::vector<std::string>>();
  o.stem = j.at("stem").get<bool>();
  o.min_token_length = j.at("min_token_length").get<std::size_t>();
  o.cap_document_bow = j.at("cap_document_bow").get<bool>();
  return o;
}

std::string serialize_vocab(const Vocabulary& vocab) {
  std::string out;
  for (const std::string& w : vocab.words()) {
    out += w;
    out.push_back('\n');
  }
  return out;
}

std::string serialize_docs(const BowCorpus& corpus) {
  std::string out;
  for (const Document& d : corpus.docs) {
    json j;
    j["id"] = d.id;
    j["split"] = to_string(d.split);
    j["length"] = d.length();
    j["counts"] = encode_sparse(d.counts);
    json sents = json::array();
    for (const auto& s : d.sentences) sents.push_back(encode_sparse(s));
    j["sentences"] = std::move(sents);
    j["truncated"] = d.truncated;
    j["tokens"] = d.tokens;
    j["text"] = d.sentence_text;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("write failed for " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void save_corpus(const BowCorpus& corpus, const std::filesystem::path& dir) {
  corpus.validate();
  std::filesystem::create_directories(dir);
  write_file(dir / "vocab.txt", serialize_vocab(corpus.vocab));
  write_file(dir / "docs.jsonl", serialize_docs(corpus));
  json meta;
  meta["format"] = "nahtm-corpus";
  meta["format_version"] = kCorpusFormatVersion;
  meta["V"] = corpus.vocab.size();
  meta["I"] = corpus.docs.size();
  meta["num_sentences"] = corpus.num_sentences();
  meta["options"] = options_to_json(corpus.options);
  meta["frequencies"] = corpus.vocab.frequencies();
  meta["checksum"] = corpus_checksum(corpus);
  write_file(dir / "meta.json", meta.dump(2) + "\n");
}

BowCorpus load_corpus(const std::filesystem::path& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw ParseError((dir / "meta.json").string() + ": " + e.what());
  }
  std::size_t V = 0, I = 0;
  BowCorpus corpus;
  std::vector<std::uint64_t> freq;
  try {
    if (meta.at("format").get<std::string>() != "nahtm-corpus") throw ParseError("meta.json: not a corpus");
    const int version = meta.at("format_version").get<int>();
    if (version != kCorpusFormatVersion) {
      throw DataError("meta.json: unsupported corpus format version " + std::to_string(version));
    }
    V = meta.at("V").get<std::size_t>();
    I = meta.at("I").get<std::size_t>();
    corpus.options = options_from_json(meta.at("options"));
    freq = meta.at("frequencies").get<std::vector<std::uint64_t>>();
  } catch (const json::exception& e) {
    throw ParseError("meta.json: " + std::string(e.what()));
  }

  std::vector<std::string> words;
  {
    std::istringstream in(read_file(dir / "vocab.txt"));
    std::string line;
    while (std::getline(in, line)) words.push_back(line);
  }
  if (words.size() != V) {
    throw DataError("vocab.txt: " + std::to_string(words.size()) + " words, meta.json declares V=" +
                    std::to_string(V));
  }
  if (freq.size() != V) throw DataError("meta.json: frequency list length differs from V");
  corpus.vocab = Vocabulary(std::move(words), std::move(freq));

  const std::string docs_text = read_file(dir / "docs.jsonl");
  if (!docs_text.empty() && docs_text.back() != '\n') throw ParseError("docs.jsonl: truncated final record");
  std::istringstream in(docs_text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = "docs.jsonl:" + std::to_string(lineno);
    Document d;
    try {
      const json j = json::parse(line);
      d.id = j.at("id").get<std::string>();
      d.split = parse_split(j.at("split").get<std::string>());
      d.counts = decode_sparse(j.at("counts").get<std::string>(), where);
      for (const auto& s : j.at("sentences")) d.sentences.push_back(decode_sparse(s.get<std::string>(), where));
      d.truncated = j.at("truncated").get<bool>();
      d.tokens = j.at("tokens").get<std::vector<std::uint32_t>>();
      d.sentence_text = j.at("text").get<std::vector<std::string>>();
      if (j.at("length").get<std::uint64_t>() != d.length()) throw DataError(where + ": length disagrees with counts");
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    corpus.docs.push_back(std::move(d));
  }
  if (corpus.docs.size() != I) {
    throw ParseError("docs.jsonl: " + std::to_string(corpus.docs.size()) + " records, meta.json declares I=" +
                     std::to_string(I));
  }
  corpus.validate();
  return corpus;
}

std::string corpus_checksum(const BowCorpus& corpus) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  feed(serialize_vocab(corpus.vocab));
  feed(serialize_docs(corpus));
  static const char* kHex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
  return out;
}

CorpusSummary summarize(const BowCorpus& corpus) {
  CorpusSummary s;
  s.num_docs = corpus.docs.size();
  s.vocab_size = corpus.vocab.size();
  s.num_sentences = corpus.num_sentences();
  double total = 0.0, capped = 0.0;
  for (const Document& d : corpus.docs) {
    total += static_cast<double>(d.length());
    for (const auto& sent : d.sentences) {
      for (const auto& [idx, c] : sent) capped += c;
    }
  }
  if (s.num_docs > 0) {
    s.avg_doc_length = total / static_cast<double>(s.num_docs);
    s.avg_sentence_capped_length = capped / static_cast<double>(s.num_docs);
  }
  return s;
}

}  // namespace nahtm::corpus
