#pragma once

// The attention-aware hierarchical topic model.
//
// Two VAE encoders share the latent topical space: the internal encoder maps
// bag-of-words counts of documents and sentences to diagonal Gaussians, the
// external encoder does the same for pre-trained word, sentence and document
// embeddings. Samples are combined (word-topic matrix additively, sentence
// rows through sparsemax, document rows through softmax) and decoded with a
// softmax over the vocabulary. Sentence posteriors are regularized towards
// their document's posterior with optionally attention-weighted KL terms.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nahtm/corpus.h"
#include "nahtm/embedding_store.h"
#include "nahtm/matrix.h"
#include "nahtm/rng.h"
#include "nahtm/tensor.h"

namespace nahtm::model {

using ad::Tape;
using ad::Tensor;

// KL: sentence KL against N(0, I). HKL: against the document posterior.
// S1: HKL weighted by normalized learned controls tied to attention scores.
// S2: as S1 with scores fixed to negative distances from the sentence centroid.
enum class Variant { kKL, kHKL, kS1, kS2 };
enum class Normalizer { kSoftmax, kSparsemax };
// Where the external document input comes from. kAuto picks attention for
// S1 and the sentence mean otherwise.
enum class DocEmbeddingSource { kAuto, kMean, kAttention };
enum class Activation { kTanh, kSoftplus };

std::string_view to_string(Variant v);
std::string_view to_string(Normalizer n);
std::string_view to_string(DocEmbeddingSource s);
std::string_view to_string(Activation a);
Variant parse_variant(std::string_view s);
Normalizer parse_normalizer(std::string_view s);
DocEmbeddingSource parse_doc_embedding_source(std::string_view s);
Activation parse_activation(std::string_view s);

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct HyperParams {
  // Influence of external word / sentence / document embeddings.
  double gamma1 = 0.01;
  double gamma2 = 0.001;
  double gamma3 = 0.01;
  // Weight of the sentence reconstruction term.
  double gamma4 = 1.0;
  // Document KL, sentence KL and external word KL weights.
  double beta0 = 1.0;
  double beta1 = 1.0;
  double beta2 = 1.0;
  // Penalty tying learned sentence controls to their scores.
  double lambda0 = 1.0;
  // Squared-norm penalty on the internal word-topic matrix.
  double lambda1 = 0.01;
  std::size_t topics = 50;
  std::size_t hidden = 300;
  std::size_t hidden_layers = 1;
  Variant variant = Variant::kS2;
  Normalizer attention_normalizer = Normalizer::kSoftmax;
  bool hard_weights = false;
  DocEmbeddingSource doc_embedding = DocEmbeddingSource::kAuto;
  Activation activation = Activation::kTanh;
  // Stop sentence-KL gradients from reaching the document posterior.
  bool detach_doc_posterior = false;
  // Stop the control penalty from reaching the attention parameters.
  bool detach_attention_target = false;
  // Add a fixed background log-frequency vector to every decoder row.
  bool decoder_bias = false;

  void validate() const;
  bool attention_doc_embedding() const;
  bool operator==(const HyperParams&) const = default;
};

struct DiagGaussian {
  Tensor mean;
  Tensor log_var;
};

struct Dense {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

struct Encoder {
  std::vector<Dense> hidden;
  Dense mean_head;
  Dense log_var_head;

  std::size_t input_dim() const { return hidden.front().weight.rows(); }
};

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t embed_dim = 0;
  std::size_t num_sentences = 0;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  Encoder internal;
  Encoder external;
  Tensor phi;         // V x K internal word-topic matrix
  Tensor att_theta1;  // M x M
  Tensor att_bias;    // 1 x M
  Tensor att_theta2;  // M x 1
  Tensor y_prime;     // S x 1, one learned control per corpus sentence
  Tensor decoder_bias;  // 1 x V, fixed; undefined unless enabled

  // Xavier-uniform weights, zero biases and zero controls.
  static ModelParams init(const ModelDims& dims, const HyperParams& hp, std::uint64_t seed,
                          std::optional<std::vector<double>> background_log_freq = std::nullopt);

  // Trainable tensors in declared (serialization) order.
  std::vector<NamedTensor> trainable() const;
  // trainable() plus fixed tensors.
  std::vector<NamedTensor> all() const;
  ModelParams clone() const;
  void zero_grad() const;

  std::size_t vocab_size() const { return phi.rows(); }
  std::size_t topics() const { return phi.cols(); }
  std::size_t embed_dim() const { return att_theta1.rows(); }
  std::size_t num_sentences() const { return y_prime.rows(); }
};

// Empirical log word frequencies (add-one smoothed) over the given documents.
std::vector<double> background_log_frequencies(const corpus::BowCorpus& corpus, std::span<const std::size_t> docs);

// ---------------------------------------------------------------- building blocks

DiagGaussian encode_internal(Tape& t, const ModelParams& p, const HyperParams& hp, const ad::SparseRows& counts);
DiagGaussian encode_internal(Tape& t, const ModelParams& p, const HyperParams& hp, const Tensor& counts);
DiagGaussian encode_external(Tape& t, const ModelParams& p, const HyperParams& hp, const Tensor& x);

// mean + exp(log_var / 2) * noise.
Tensor reparam_sample(Tape& t, const DiagGaussian& g, const Tensor& noise);

struct AttentionOutput {
  Tensor scores;   // J x 1, unnormalized
  Tensor weights;  // J x 1, on the simplex
  Tensor doc_embedding;  // 1 x M
};
AttentionOutput attention_doc_embedding(Tape& t, const ModelParams& p, const Tensor& sentence_embeddings,
                                        Normalizer normalizer);

// Negative Euclidean distance of each sentence row to the sentence centroid.
std::vector<double> strategy2_weights(const Matrix& sentence_embeddings);

// Normalizes each [offsets[b], offsets[b+1]) segment of a column vector.
Tensor segment_normalize(Tape& t, const Tensor& column, std::span<const std::size_t> offsets, Normalizer normalizer);

struct Combined {
  Tensor phi;        // V x K, unnormalized
  Tensor sentences;  // rows on the simplex (sparsemax)
  Tensor docs;       // rows on the simplex (softmax)
};
Combined combine(Tape& t, const Tensor& phi_b, const Tensor& phi_e, const Tensor& s_b, const Tensor& s_e,
                 const Tensor& z_b, const Tensor& z_e, const HyperParams& hp);

// Row-wise log softmax of topic_rows * phi^T (+ bias row when defined).
Tensor decode_log_probs(Tape& t, const Tensor& topic_rows, const Tensor& phi, const Tensor& bias = {});

// sum counts * log_probs; the multinomial coefficient is omitted.
Tensor multinomial_loglik(Tape& t, const ad::SparseRows& counts, const Tensor& log_probs);
Tensor multinomial_loglik(Tape& t, const Tensor& counts, const Tensor& log_probs);

// Per-row KL(q || p), rows x 1.
Tensor kl_diag_gauss(Tape& t, const DiagGaussian& q, const DiagGaussian& p);
DiagGaussian standard_normal(std::size_t rows, std::size_t cols);

// beta0 * (sum_i KL[z_b_i || N(0,I)] + KL[z_e_i || N(0,I)]).
Tensor q_doc(Tape& t, const DiagGaussian& z_b, const DiagGaussian& z_e, double beta0);

struct SentenceKlInputs {
  DiagGaussian s_b;  // S x K sentence posteriors
  DiagGaussian s_e;
  // Document posteriors repeated per sentence (S x K); ignored by kKL.
  DiagGaussian z_b;
  DiagGaussian z_e;
  std::vector<std::size_t> offsets;  // per-document sentence segments
  Tensor scores;    // S x 1 target scores (S1: attention, S2: strategy 2)
  Tensor controls;  // S x 1 learned controls y'
  Tensor weights;   // S x 1 normalized scores for hard weighting
};
Tensor q_sent(Tape& t, const SentenceKlInputs& in, const HyperParams& hp);

// scale * sum_v (lambda1 * ||phi_b_v||^2 + beta2 * KL[phi_e_v || N(0,I)]).
Tensor q_word(Tape& t, const Tensor& phi_b, const DiagGaussian& phi_e, const HyperParams& hp, double scale);

// ---------------------------------------------------------------- batched forward pass

// Read-only inputs derived once per (corpus, embeddings) pair.
class ModelData {
 public:
  ModelData(const corpus::BowCorpus& corpus, const embeddings::EmbeddingSet& emb);

  const corpus::BowCorpus& corpus() const { return *corpus_; }
  const embeddings::EmbeddingSet& embeddings() const { return *emb_; }
  const std::vector<std::size_t>& sentence_offsets() const { return offsets_; }
  const Matrix& doc_mean_embeddings() const { return doc_mean_; }
  const std::vector<double>& strategy2_scores() const { return strategy2_; }
  const Tensor& word_embeddings() const { return words_; }

 private:
  const corpus::BowCorpus* corpus_;
  const embeddings::EmbeddingSet* emb_;
  std::vector<std::size_t> offsets_;
  Matrix doc_mean_;
  std::vector<double> strategy2_;
  Tensor words_;
};

struct Batch {
  std::vector<std::size_t> docs;
  ad::SparseRows doc_counts;
  ad::SparseRows sentence_counts;
  Tensor sentence_embeddings;  // S_b x M
  Tensor doc_mean_embeddings;  // B x M
  Tensor strategy2_scores;     // S_b x 1
  std::vector<std::size_t> offsets;          // local, size B + 1
  std::vector<std::size_t> sentence_doc;     // local document of each sentence
  std::vector<std::size_t> global_sentence;  // corpus-wide sentence index
};
Batch make_batch(const ModelData& data, std::span<const std::size_t> docs);

// Source of reparameterization noise. zero() yields posterior means.
class Noise {
 public:
  static Noise zero() { return Noise(std::nullopt); }
  static Noise gaussian(std::uint64_t key) { return Noise(CounterRng(key)); }
  Tensor draw(std::size_t rows, std::size_t cols);

 private:
  explicit Noise(std::optional<CounterRng> rng) : rng_(std::move(rng)) {}
  std::optional<CounterRng> rng_;
};

struct Forward {
  DiagGaussian z_b, z_e, s_b, s_e, phi_e;
  Tensor x_doc;  // B x M external document input
  std::optional<Tensor> attention_scores;   // S_b x 1
  std::optional<Tensor> attention_weights;  // S_b x 1
  Combined comb;
  Tensor doc_log_probs;
  Tensor sentence_log_probs;
};
Forward forward(Tape& t, const ModelParams& p, const HyperParams& hp, const ModelData& data, const Batch& batch,
                Noise& noise);

struct ObjectiveTerms {
  Tensor loss;  // negated objective, to minimize
  double doc_ll = 0.0;
  double sent_ll = 0.0;
  double q_doc = 0.0;
  double q_sent = 0.0;
  double q_word = 0.0;
};
// `word_scale` multiplies the vocabulary-wide Q^W sum (batch size / I).
ObjectiveTerms objective(Tape& t, const ModelParams& p, const HyperParams& hp, const ModelData& data,
                         const Batch& batch, Noise& noise, double word_scale);

}  // namespace nahtm::model
