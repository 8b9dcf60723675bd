#include "nahtm/eval.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "nahtm/error.h"

namespace nahtm::eval {

using model::Tape;
using model::Tensor;

UnitLikelihoods unit_likelihoods(const model::ModelParams& p, const model::HyperParams& hp,
                                 const model::ModelData& data, std::span<const std::size_t> docs, Level level,
                                 std::size_t batch_size) {
  if (docs.empty()) throw DataError("perplexity: empty split");
  if (batch_size == 0) throw ConfigError("perplexity: batch size must be >= 1");
  UnitLikelihoods out;
  for (std::size_t start = 0; start < docs.size(); start += batch_size) {
    const auto chunk = docs.subspan(start, std::min(batch_size, docs.size() - start));
    const model::Batch batch = model::make_batch(data, chunk);
    Tape tape(Tape::Mode::kInference);
    model::Noise noise = model::Noise::zero();
    const model::Forward f = model::forward(tape, p, hp, data, batch, noise);
    const ad::SparseRows& counts = level == Level::kDocument ? batch.doc_counts : batch.sentence_counts;
    const Tensor& lp = level == Level::kDocument ? f.doc_log_probs : f.sentence_log_probs;
    const std::size_t V = lp.cols();
    for (std::size_t r = 0; r < counts.rows; ++r) {
      double ll = 0.0, n = 0.0;
      for (std::size_t k = counts.row_ptr[r]; k < counts.row_ptr[r + 1]; ++k) {
        ll += counts.value[k] * lp.data()[r * V + counts.index[k]];
        n += counts.value[k];
      }
      out.loglik.push_back(ll);
      out.length.push_back(n);
    }
  }
  return out;
}

double perplexity_from(const UnitLikelihoods& u) {
  double acc = 0.0;
  std::size_t units = 0;
  for (std::size_t i = 0; i < u.loglik.size(); ++i) {
    if (u.length[i] <= 0.0) continue;
    acc += u.loglik[i] / u.length[i];
    ++units;
  }
  if (units == 0) throw DataError("perplexity: no non-empty units");
  return std::exp(-acc / static_cast<double>(units));
}

double perplexity(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data,
                  std::span<const std::size_t> docs, Level level, std::size_t batch_size) {
  return perplexity_from(unit_likelihoods(p, hp, data, docs, level, batch_size));
}

Matrix combined_topic_matrix(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data) {
  Tape tape(Tape::Mode::kInference);
  const model::DiagGaussian phi_e = model::encode_external(tape, p, hp, data.word_embeddings());
  const Tensor comb = ad::add(tape, p.phi, ad::scale(tape, phi_e.mean, hp.gamma1));
  Matrix m(comb.rows(), comb.cols());
  std::copy(comb.data().begin(), comb.data().end(), m.data.begin());
  return m;
}

std::vector<std::vector<std::size_t>> top_words(const Matrix& phi, std::size_t n) {
  if (n > phi.rows) {
    throw ConfigError("top_words: n=" + std::to_string(n) + " exceeds vocabulary size " + std::to_string(phi.rows));
  }
  std::vector<std::vector<std::size_t>> out(phi.cols);
  std::vector<std::size_t> order(phi.rows);
  for (std::size_t k = 0; k < phi.cols; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double va = phi(a, k), vb = phi(b, k);
                        return va != vb ? va > vb : a < b;
                      });
    out[k].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return out;
}

double sentence_doc_distance(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data,
                             std::span<const std::size_t> docs) {
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < docs.size(); start += kChunk) {
    const auto chunk = docs.subspan(start, std::min(kChunk, docs.size() - start));
    const model::Batch batch = model::make_batch(data, chunk);
    Tape tape(Tape::Mode::kInference);
    const Tensor zb = model::encode_internal(tape, p, hp, batch.doc_counts).mean;
    const Tensor sb = model::encode_internal(tape, p, hp, batch.sentence_counts).mean;
    const std::size_t K = zb.cols();
    for (std::size_t s = 0; s < sb.rows(); ++s) {
      const std::size_t d = batch.sentence_doc[s];
      double d2 = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double diff = sb(s, k) - zb(d, k);
        d2 += diff * diff;
      }
      total += std::sqrt(d2);
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

// ---------------------------------------------------------------- NPMI

NpmiReference::NpmiReference(const corpus::Vocabulary& vocab,
                             std::span<const std::vector<std::uint32_t>> token_streams, std::size_t window) {
  if (window == 0) throw ConfigError("NPMI window must be >= 1");
  for (std::size_t v = 0; v < vocab.size(); ++v) index_.emplace(vocab.word(v), static_cast<std::uint32_t>(v));
  spans_.resize(vocab.size());
  for (const auto& tokens : token_streams) {
    if (tokens.empty()) continue;
    const std::size_t n = tokens.size();
    const std::size_t W = n <= window ? 1 : n - window + 1;
    for (std::size_t pos = 0; pos < n; ++pos) {
      const std::uint32_t w = tokens[pos];
      if (w >= vocab.size()) throw DataError("NPMI reference: token index out of range");
      const std::size_t lo = pos + 1 >= window ? pos + 1 - window : 0;
      const std::size_t hi = std::min(pos, W - 1);
      auto& s = spans_[w];
      const std::uint64_t glo = num_windows_ + lo, ghi = num_windows_ + hi;
      // Occurrences arrive in increasing order, so overlapping ranges merge here.
      if (!s.empty() && glo <= s.back().second + 1) {
        s.back().second = std::max(s.back().second, ghi);
      } else {
        s.emplace_back(glo, ghi);
      }
    }
    num_windows_ += W;
  }
  if (num_windows_ == 0) throw DataError("NPMI reference is empty");
}

NpmiReference NpmiReference::from_corpus(const corpus::BowCorpus& corpus, std::span<const std::size_t> docs,
                                         std::size_t window) {
  std::vector<std::vector<std::uint32_t>> streams;
  streams.reserve(docs.size());
  for (std::size_t i : docs) streams.push_back(corpus.docs.at(i).tokens);
  return NpmiReference(corpus.vocab, streams, window);
}

const std::vector<std::uint64_t>& NpmiReference::windows_of(std::uint32_t word) const {
  auto it = cache_.find(word);
  if (it != cache_.end()) return it->second;
  std::vector<std::uint64_t> ids;
  for (const auto& [lo, hi] : spans_[word]) {
    for (std::uint64_t w = lo; w <= hi; ++w) ids.push_back(w);
  }
  return cache_.emplace(word, std::move(ids)).first->second;
}

std::uint64_t NpmiReference::count(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return 0;
  return windows_of(it->second).size();
}

std::uint64_t NpmiReference::joint_count(const std::string& a, const std::string& b) const {
  auto ia = index_.find(a), ib = index_.find(b);
  if (ia == index_.end() || ib == index_.end()) return 0;
  const auto& wa = windows_of(ia->second);
  const auto& wb = windows_of(ib->second);
  std::uint64_t n = 0;
  auto x = wa.begin(), y = wb.begin();
  while (x != wa.end() && y != wb.end()) {
    if (*x < *y) {
      ++x;
    } else if (*y < *x) {
      ++y;
    } else {
      ++n;
      ++x;
      ++y;
    }
  }
  return n;
}

std::optional<double> NpmiReference::npmi(const std::string& a, const std::string& b) const {
  const std::uint64_t ca = count(a), cb = count(b);
  if (ca == 0 || cb == 0) return std::nullopt;
  const std::uint64_t cab = joint_count(a, b);
  if (cab == num_windows_) return 1.0;
  const double N = static_cast<double>(num_windows_);
  const double pa = static_cast<double>(ca) / N, pb = static_cast<double>(cb) / N;
  const double pab = static_cast<double>(cab) / N + kNpmiEpsilon;
  const double value = std::log(pab / (pa * pb)) / -std::log(pab);
  return std::clamp(value, -1.0, 1.0);
}

TopicCoherence topic_npmi(const std::vector<std::vector<std::string>>& topics, const NpmiReference& ref) {
  TopicCoherence out;
  double sum = 0.0;
  std::size_t scored_topics = 0;
  for (const auto& words : topics) {
    for (const auto& w : words) {
      if (ref.count(w) == 0) ++out.coverage.words_missing;
    }
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < words.size(); ++a) {
      for (std::size_t b = a + 1; b < words.size(); ++b) {
        const auto v = ref.npmi(words[a], words[b]);
        if (!v) {
          ++out.coverage.pairs_skipped;
          continue;
        }
        acc += *v;
        ++pairs;
        ++out.coverage.pairs_scored;
      }
    }
    if (pairs == 0) {
      out.per_topic.push_back(std::nullopt);
      continue;
    }
    out.per_topic.push_back(acc / static_cast<double>(pairs));
    sum += acc / static_cast<double>(pairs);
    ++scored_topics;
  }
  if (scored_topics > 0) out.mean = sum / static_cast<double>(scored_topics);
  return out;
}

// ---------------------------------------------------------------- bundle

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json coverage_json(const Coverage& c) {
  return {{"words_missing", c.words_missing}, {"pairs_scored", c.pairs_scored}, {"pairs_skipped", c.pairs_skipped}};
}

}  // namespace

nlohmann::json Metrics::to_json() const {
  nlohmann::json topics_json = nlohmann::json::array();
  for (std::size_t k = 0; k < topics.size(); ++k) {
    nlohmann::json t;
    t["words"] = topics[k].words;
    t["scores"] = topics[k].scores;
    t["npmi"] = opt(internal.per_topic.at(k));
    t["external_npmi"] = external ? opt(external->per_topic.at(k)) : nlohmann::json(nullptr);
    topics_json.push_back(t);
  }
  nlohmann::json j;
  j["doc_perplexity"] = doc_perplexity;
  j["sent_perplexity"] = sent_perplexity;
  j["topics"] = topics_json;
  j["mean_npmi"] = opt(internal.mean);
  j["external_mean_npmi"] = external ? opt(external->mean) : nlohmann::json(nullptr);
  j["coverage"] = {{"internal", coverage_json(internal.coverage)},
                   {"external", external ? coverage_json(external->coverage) : nlohmann::json(nullptr)}};
  j["sentence_doc_distance"] = sentence_doc_distance;
  return j;
}

std::string Metrics::topic_report() const {
  std::ostringstream out;
  for (std::size_t k = 0; k < topics.size(); ++k) {
    out << "topic " << k << " npmi=";
    if (internal.per_topic.at(k)) {
      out << std::fixed << std::setprecision(4) << *internal.per_topic[k];
    } else {
      out << "n/a";
    }
    out << ":";
    for (const auto& w : topics[k].words) out << ' ' << w;
    out << '\n';
  }
  return out.str();
}

Metrics evaluate(const model::ModelParams& p, const model::HyperParams& hp, const model::ModelData& data,
                 corpus::Split split, const corpus::BowCorpus* external, std::size_t top_n) {
  const corpus::BowCorpus& c = data.corpus();
  const std::vector<std::size_t> docs = c.indices(split);
  if (docs.empty()) throw DataError("evaluate: split '" + std::string(corpus::to_string(split)) + "' is empty");

  Metrics m;
  m.doc_perplexity = perplexity(p, hp, data, docs, Level::kDocument);
  m.sent_perplexity = perplexity(p, hp, data, docs, Level::kSentence);
  m.sentence_doc_distance = sentence_doc_distance(p, hp, data, docs);

  const Matrix phi = combined_topic_matrix(p, hp, data);
  std::vector<std::vector<std::string>> words;
  for (const auto& idx : top_words(phi, top_n)) {
    Topic t;
    const std::size_t k = m.topics.size();
    for (std::size_t v : idx) {
      t.words.push_back(c.vocab.word(v));
      t.scores.push_back(phi(v, k));
    }
    words.push_back(t.words);
    m.topics.push_back(std::move(t));
  }

  const std::vector<std::size_t> train = c.indices(corpus::Split::kTrain);
  if (train.empty()) throw DataError("evaluate: internal NPMI needs a non-empty training split");
  m.internal = topic_npmi(words, NpmiReference::from_corpus(c, train));
  if (external != nullptr) {
    std::vector<std::size_t> all(external->docs.size());
    std::iota(all.begin(), all.end(), 0);
    m.external = topic_npmi(words, NpmiReference::from_corpus(*external, all));
  }
  return m;
}

// ---------------------------------------------------------------- plot

std::string perplexity_svg(std::span<const double> epochs, std::span<const double> values) {
  if (epochs.size() != values.size() || epochs.empty()) throw DataError("perplexity_svg: need matching non-empty series");
  constexpr double W = 640, H = 400, L = 70, R = 20, T = 30, B = 50;
  const auto [xmin_it, xmax_it] = std::minmax_element(epochs.begin(), epochs.end());
  const auto [ymin_it, ymax_it] = std::minmax_element(values.begin(), values.end());
  double xmin = *xmin_it, xmax = *xmax_it, ymin = *ymin_it, ymax = *ymax_it;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < epochs.size(); ++i) out << (i ? " " : "") << sx(epochs[i]) << ',' << sy(values[i]);
  out << "\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">epoch</text>\n";
  out << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2
      << ")\" text-anchor=\"middle\">validation perplexity</text>\n";
  out << "<text x=\"" << L - 5 << "\" y=\"" << sy(ymax) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << ymax
      << "</text>\n";
  out << "<text x=\"" << L - 5 << "\" y=\"" << sy(ymin) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << ymin
      << "</text>\n";
  out << "<text x=\"" << sx(xmin) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << xmin << "</text>\n";
  out << "<text x=\"" << sx(xmax) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << xmax << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

}  // namespace nahtm::eval
