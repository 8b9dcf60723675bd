#include "nahtm/model.h"

#include <cmath>

#include "nahtm/error.h"

namespace nahtm::model {

// ---------------------------------------------------------------- enums

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kKL: return "KL";
    case Variant::kHKL: return "HKL";
    case Variant::kS1: return "S1";
    case Variant::kS2: return "S2";
  }
  return "S2";
}

std::string_view to_string(Normalizer n) { return n == Normalizer::kSoftmax ? "softmax" : "sparsemax"; }

std::string_view to_string(DocEmbeddingSource s) {
  switch (s) {
    case DocEmbeddingSource::kAuto: return "auto";
    case DocEmbeddingSource::kMean: return "mean";
    case DocEmbeddingSource::kAttention: return "attention";
  }
  return "auto";
}

std::string_view to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "softplus"; }

Variant parse_variant(std::string_view s) {
  if (s == "KL") return Variant::kKL;
  if (s == "HKL") return Variant::kHKL;
  if (s == "S1") return Variant::kS1;
  if (s == "S2") return Variant::kS2;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected KL, HKL, S1 or S2)");
}

Normalizer parse_normalizer(std::string_view s) {
  if (s == "softmax") return Normalizer::kSoftmax;
  if (s == "sparsemax") return Normalizer::kSparsemax;
  throw ConfigError("unknown normalizer '" + std::string(s) + "'");
}

DocEmbeddingSource parse_doc_embedding_source(std::string_view s) {
  if (s == "auto") return DocEmbeddingSource::kAuto;
  if (s == "mean") return DocEmbeddingSource::kMean;
  if (s == "attention") return DocEmbeddingSource::kAttention;
  throw ConfigError("unknown document embedding source '" + std::string(s) + "'");
}

Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "softplus") return Activation::kSoftplus;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

void HyperParams::validate() const {
  const std::pair<const char*, double> weights[] = {
      {"gamma1", gamma1}, {"gamma2", gamma2}, {"gamma3", gamma3}, {"gamma4", gamma4}, {"beta0", beta0},
      {"beta1", beta1},   {"beta2", beta2},   {"lambda0", lambda0}, {"lambda1", lambda1}};
  for (const auto& [name, v] : weights) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be finite and >= 0");
  }
  if (topics < 1) throw ConfigError("topics must be >= 1");
  if (hidden < 1) throw ConfigError("hidden must be >= 1");
  if (hidden_layers < 1) throw ConfigError("hidden_layers must be >= 1");
}

bool HyperParams::attention_doc_embedding() const {
  if (doc_embedding == DocEmbeddingSource::kAuto) return variant == Variant::kS1;
  return doc_embedding == DocEmbeddingSource::kAttention;
}

// ---------------------------------------------------------------- parameters

namespace {

Tensor xavier(std::size_t in, std::size_t out, CounterRng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.uniform(-limit, limit);
  return Tensor::from_data(in, out, std::move(w), true);
}

Dense dense(std::size_t in, std::size_t out, CounterRng& rng) {
  return Dense{xavier(in, out, rng), Tensor::zeros(1, out, true)};
}

Encoder make_encoder(std::size_t in, const HyperParams& hp, CounterRng& rng) {
  Encoder e;
  std::size_t width = in;
  for (std::size_t l = 0; l < hp.hidden_layers; ++l) {
    e.hidden.push_back(dense(width, hp.hidden, rng));
    width = hp.hidden;
  }
  e.mean_head = dense(width, hp.topics, rng);
  e.log_var_head = dense(width, hp.topics, rng);
  return e;
}

void append_encoder(std::vector<NamedTensor>& out, const std::string& prefix, const Encoder& e) {
  for (std::size_t l = 0; l < e.hidden.size(); ++l) {
    out.push_back({prefix + ".hidden" + std::to_string(l) + ".weight", e.hidden[l].weight});
    out.push_back({prefix + ".hidden" + std::to_string(l) + ".bias", e.hidden[l].bias});
  }
  out.push_back({prefix + ".mean.weight", e.mean_head.weight});
  out.push_back({prefix + ".mean.bias", e.mean_head.bias});
  out.push_back({prefix + ".log_var.weight", e.log_var_head.weight});
  out.push_back({prefix + ".log_var.bias", e.log_var_head.bias});
}

Dense clone_dense(const Dense& d) { return Dense{d.weight.copy(true), d.bias.copy(true)}; }

Encoder clone_encoder(const Encoder& e) {
  Encoder c;
  for (const Dense& d : e.hidden) c.hidden.push_back(clone_dense(d));
  c.mean_head = clone_dense(e.mean_head);
  c.log_var_head = clone_dense(e.log_var_head);
  return c;
}

}  // namespace

ModelParams ModelParams::init(const ModelDims& dims, const HyperParams& hp, std::uint64_t seed,
                              std::optional<std::vector<double>> background_log_freq) {
  hp.validate();
  if (dims.vocab == 0) throw ConfigError("vocabulary must be non-empty");
  if (dims.embed_dim == 0) throw ConfigError("embedding dimension must be >= 1");
  CounterRng rng(derive_key({seed, 0x696e6974ULL}));
  ModelParams p;
  p.internal = make_encoder(dims.vocab, hp, rng);
  p.external = make_encoder(dims.embed_dim, hp, rng);
  p.phi = xavier(dims.vocab, hp.topics, rng);
  p.att_theta1 = xavier(dims.embed_dim, dims.embed_dim, rng);
  p.att_bias = Tensor::zeros(1, dims.embed_dim, true);
  p.att_theta2 = xavier(dims.embed_dim, 1, rng);
  p.y_prime = Tensor::zeros(dims.num_sentences, 1, true);
  if (hp.decoder_bias) {
    if (!background_log_freq || background_log_freq->size() != dims.vocab) {
      throw ConfigError("decoder_bias requires a background frequency vector of length V");
    }
    p.decoder_bias = Tensor::from_data(1, dims.vocab, std::move(*background_log_freq), false);
  }
  return p;
}

std::vector<NamedTensor> ModelParams::trainable() const {
  std::vector<NamedTensor> out;
  append_encoder(out, "internal", internal);
  append_encoder(out, "external", external);
  out.push_back({"phi", phi});
  out.push_back({"attention.theta1", att_theta1});
  out.push_back({"attention.bias", att_bias});
  out.push_back({"attention.theta2", att_theta2});
  out.push_back({"y_prime", y_prime});
  return out;
}

std::vector<NamedTensor> ModelParams::all() const {
  std::vector<NamedTensor> out = trainable();
  if (decoder_bias.defined()) out.push_back({"decoder_bias", decoder_bias});
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams c;
  c.internal = clone_encoder(internal);
  c.external = clone_encoder(external);
  c.phi = phi.copy(true);
  c.att_theta1 = att_theta1.copy(true);
  c.att_bias = att_bias.copy(true);
  c.att_theta2 = att_theta2.copy(true);
  c.y_prime = y_prime.copy(true);
  if (decoder_bias.defined()) c.decoder_bias = decoder_bias.copy(false);
  return c;
}

void ModelParams::zero_grad() const {
  for (const NamedTensor& nt : trainable()) nt.tensor.zero_grad();
}

std::vector<double> background_log_frequencies(const corpus::BowCorpus& corpus, std::span<const std::size_t> docs) {
  const std::size_t V = corpus.vocab.size();
  std::vector<double> counts(V, 1.0);
  double total = static_cast<double>(V);
  for (std::size_t i : docs) {
    for (const auto& [idx, c] : corpus.docs.at(i).counts) {
      counts[idx] += c;
      total += c;
    }
  }
  for (double& c : counts) c = std::log(c / total);
  return counts;
}

// ---------------------------------------------------------------- building blocks

namespace {

Tensor activate(Tape& t, const Tensor& x, Activation a) {
  return a == Activation::kTanh ? ad::tanh(t, x) : ad::softplus(t, x);
}

DiagGaussian heads(Tape& t, const Encoder& e, const Tensor& h) {
  Tensor mean = ad::affine(t, h, e.mean_head.weight, e.mean_head.bias);
  Tensor log_var = ad::affine(t, h, e.log_var_head.weight, e.log_var_head.bias);
  return {mean, ad::clamp(t, log_var, kLogVarMin, kLogVarMax)};
}

Tensor hidden_stack(Tape& t, const Encoder& e, Tensor h, std::size_t first, Activation a) {
  for (std::size_t l = first; l < e.hidden.size(); ++l) {
    h = activate(t, ad::affine(t, h, e.hidden[l].weight, e.hidden[l].bias), a);
  }
  return h;
}

Tensor normalize_rows(Tape& t, const Tensor& x, Normalizer n) {
  return n == Normalizer::kSoftmax ? ad::softmax_rows(t, x) : ad::sparsemax_rows(t, x);
}

}  // namespace

DiagGaussian encode_internal(Tape& t, const ModelParams& p, const HyperParams& hp, const ad::SparseRows& counts) {
  const Encoder& e = p.internal;
  if (counts.cols != e.input_dim()) {
    throw DimensionError("encode_internal: input width " + std::to_string(counts.cols) + ", expected " +
                         std::to_string(e.input_dim()));
  }
  Tensor h = activate(t, ad::sparse_affine(t, counts, e.hidden[0].weight, e.hidden[0].bias), hp.activation);
  return heads(t, e, hidden_stack(t, e, h, 1, hp.activation));
}

DiagGaussian encode_internal(Tape& t, const ModelParams& p, const HyperParams& hp, const Tensor& counts) {
  const Encoder& e = p.internal;
  if (counts.cols() != e.input_dim()) {
    throw DimensionError("encode_internal: input width " + std::to_string(counts.cols()) + ", expected " +
                         std::to_string(e.input_dim()));
  }
  return heads(t, e, hidden_stack(t, e, counts, 0, hp.activation));
}

DiagGaussian encode_external(Tape& t, const ModelParams& p, const HyperParams& hp, const Tensor& x) {
  const Encoder& e = p.external;
  if (x.cols() != e.input_dim()) {
    throw DimensionError("encode_external: input width " + std::to_string(x.cols()) + ", expected " +
                         std::to_string(e.input_dim()));
  }
  return heads(t, e, hidden_stack(t, e, x, 0, hp.activation));
}

Tensor reparam_sample(Tape& t, const DiagGaussian& g, const Tensor& noise) {
  Tensor stddev = ad::exp(t, ad::scale(t, g.log_var, 0.5));
  return ad::add(t, g.mean, ad::mul(t, stddev, noise));
}

AttentionOutput attention_doc_embedding(Tape& t, const ModelParams& p, const Tensor& sentence_embeddings,
                                        Normalizer normalizer) {
  if (sentence_embeddings.rows() == 0) throw DimensionError("attention_doc_embedding: document has no sentences");
  Tensor hidden = ad::tanh(t, ad::affine(t, sentence_embeddings, p.att_theta1, p.att_bias));
  Tensor scores = ad::matmul(t, hidden, p.att_theta2);
  Tensor row = normalize_rows(t, ad::transpose(t, scores), normalizer);
  Tensor doc = ad::matmul(t, row, sentence_embeddings);
  return {scores, ad::transpose(t, row), doc};
}

std::vector<double> strategy2_weights(const Matrix& sentence_embeddings) {
  const std::size_t J = sentence_embeddings.rows, M = sentence_embeddings.cols;
  std::vector<double> centroid(M, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    for (std::size_t m = 0; m < M; ++m) centroid[m] += sentence_embeddings(j, m);
  }
  for (double& c : centroid) c /= static_cast<double>(J);
  std::vector<double> y(J);
  for (std::size_t j = 0; j < J; ++j) {
    double d2 = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const double d = sentence_embeddings(j, m) - centroid[m];
      d2 += d * d;
    }
    y[j] = -std::sqrt(d2);
  }
  return y;
}

Tensor segment_normalize(Tape& t, const Tensor& column, std::span<const std::size_t> offsets,
                         Normalizer normalizer) {
  std::vector<Tensor> parts;
  parts.reserve(offsets.size());
  for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
    Tensor seg = ad::transpose(t, ad::slice_rows(t, column, offsets[b], offsets[b + 1]));
    parts.push_back(ad::transpose(t, normalize_rows(t, seg, normalizer)));
  }
  return ad::concat_rows(t, parts);
}

Combined combine(Tape& t, const Tensor& phi_b, const Tensor& phi_e, const Tensor& s_b, const Tensor& s_e,
                 const Tensor& z_b, const Tensor& z_e, const HyperParams& hp) {
  Combined c;
  c.phi = ad::add(t, phi_b, ad::scale(t, phi_e, hp.gamma1));
  c.sentences = ad::sparsemax_rows(t, ad::add(t, s_b, ad::scale(t, s_e, hp.gamma2)));
  c.docs = ad::softmax_rows(t, ad::add(t, z_b, ad::scale(t, z_e, hp.gamma3)));
  return c;
}

Tensor decode_log_probs(Tape& t, const Tensor& topic_rows, const Tensor& phi, const Tensor& bias) {
  if (topic_rows.cols() != phi.cols()) {
    throw DimensionError("decode_log_probs: topic width " + std::to_string(topic_rows.cols()) + " vs phi K=" +
                         std::to_string(phi.cols()));
  }
  Tensor logits = ad::matmul(t, topic_rows, ad::transpose(t, phi));
  if (bias.defined()) logits = ad::add_row(t, logits, bias);
  return ad::log_softmax_rows(t, logits);
}

Tensor multinomial_loglik(Tape& t, const ad::SparseRows& counts, const Tensor& log_probs) {
  for (double c : counts.value) {
    if (c < 0.0) throw DataError("multinomial_loglik: negative count");
  }
  return ad::sparse_weighted_sum(t, log_probs, counts);
}

Tensor multinomial_loglik(Tape& t, const Tensor& counts, const Tensor& log_probs) {
  for (double c : counts.data()) {
    if (c < 0.0) throw DataError("multinomial_loglik: negative count");
  }
  return ad::sum(t, ad::mul(t, counts, log_probs));
}

Tensor kl_diag_gauss(Tape& t, const DiagGaussian& q, const DiagGaussian& p) {
  return ad::kl_diag_rows(t, q.mean, q.log_var, p.mean, p.log_var);
}

DiagGaussian standard_normal(std::size_t rows, std::size_t cols) {
  return {Tensor::zeros(rows, cols), Tensor::zeros(rows, cols)};
}

Tensor q_doc(Tape& t, const DiagGaussian& z_b, const DiagGaussian& z_e, double beta0) {
  const DiagGaussian prior_b = standard_normal(z_b.mean.rows(), z_b.mean.cols());
  const DiagGaussian prior_e = standard_normal(z_e.mean.rows(), z_e.mean.cols());
  Tensor kl = ad::add(t, ad::sum(t, kl_diag_gauss(t, z_b, prior_b)), ad::sum(t, kl_diag_gauss(t, z_e, prior_e)));
  return ad::scale(t, kl, beta0);
}

Tensor q_sent(Tape& t, const SentenceKlInputs& in, const HyperParams& hp) {
  const std::size_t S = in.s_b.mean.rows(), K = in.s_b.mean.cols();
  DiagGaussian target_b, target_e;
  if (hp.variant == Variant::kKL) {
    target_b = standard_normal(S, K);
    target_e = standard_normal(S, K);
  } else if (hp.detach_doc_posterior) {
    target_b = {ad::detach(in.z_b.mean), ad::detach(in.z_b.log_var)};
    target_e = {ad::detach(in.z_e.mean), ad::detach(in.z_e.log_var)};
  } else {
    target_b = in.z_b;
    target_e = in.z_e;
  }
  Tensor kl = ad::add(t, kl_diag_gauss(t, in.s_b, target_b), kl_diag_gauss(t, in.s_e, target_e));

  switch (hp.variant) {
    case Variant::kKL:
    case Variant::kHKL:
      return ad::scale(t, ad::sum(t, kl), hp.beta1);
    case Variant::kS1:
    case Variant::kS2: {
      if (hp.hard_weights) {
        if (!in.weights.defined()) throw Error("q_sent: hard weighting requires normalized weights");
        return ad::scale(t, ad::sum(t, ad::mul(t, in.weights, kl)), hp.beta1);
      }
      if (!in.controls.defined() || !in.scores.defined()) throw Error("q_sent: soft weighting requires controls");
      Tensor w = segment_normalize(t, in.controls, in.offsets, hp.attention_normalizer);
      Tensor weighted = ad::scale(t, ad::sum(t, ad::mul(t, w, kl)), hp.beta1);
      Tensor penalty = ad::scale(t, ad::sum(t, ad::square(t, ad::sub(t, in.controls, in.scores))), hp.lambda0);
      return ad::add(t, weighted, penalty);
    }
  }
  throw ConfigError("q_sent: unknown variant");
}

Tensor q_word(Tape& t, const Tensor& phi_b, const DiagGaussian& phi_e, const HyperParams& hp, double scale) {
  Tensor norm = ad::scale(t, ad::sum(t, ad::square(t, phi_b)), hp.lambda1);
  const DiagGaussian prior = standard_normal(phi_e.mean.rows(), phi_e.mean.cols());
  Tensor kl = ad::scale(t, ad::sum(t, kl_diag_gauss(t, phi_e, prior)), hp.beta2);
  return ad::scale(t, ad::add(t, norm, kl), scale);
}

// ---------------------------------------------------------------- data and batches

ModelData::ModelData(const corpus::BowCorpus& corpus, const embeddings::EmbeddingSet& emb)
    : corpus_(&corpus), emb_(&emb), offsets_(corpus.sentence_offsets()) {
  embeddings::validate(emb, corpus);
  doc_mean_ = embeddings::document_embeddings(emb);
  const std::size_t M = emb.dim;
  strategy2_.reserve(corpus.num_sentences());
  for (std::size_t i = 0; i < corpus.docs.size(); ++i) {
    const std::size_t J = offsets_[i + 1] - offsets_[i];
    Matrix xs(J, M);
    std::copy_n(emb.sentences.data.begin() + offsets_[i] * M, J * M, xs.data.begin());
    for (double y : strategy2_weights(xs)) strategy2_.push_back(y);
  }
  words_ = Tensor::from_data(emb.words.rows, M, emb.words.data);
}

Batch make_batch(const ModelData& data, std::span<const std::size_t> docs) {
  const corpus::BowCorpus& c = data.corpus();
  const embeddings::EmbeddingSet& emb = data.embeddings();
  const std::size_t V = c.vocab.size(), M = emb.dim;
  Batch b;
  b.docs.assign(docs.begin(), docs.end());
  b.doc_counts = ad::SparseRows(V);
  b.sentence_counts = ad::SparseRows(V);
  b.offsets.push_back(0);
  std::vector<double> xs, xd, s2;
  for (std::size_t local = 0; local < docs.size(); ++local) {
    const std::size_t i = docs[local];
    const corpus::Document& d = c.docs.at(i);
    b.doc_counts.add_row(d.counts);
    const std::size_t first = data.sentence_offsets()[i];
    for (std::size_t j = 0; j < d.sentences.size(); ++j) {
      b.sentence_counts.add_row(d.sentences[j]);
      b.sentence_doc.push_back(local);
      b.global_sentence.push_back(first + j);
      auto row = emb.sentences.row(first + j);
      xs.insert(xs.end(), row.begin(), row.end());
      s2.push_back(data.strategy2_scores()[first + j]);
    }
    auto drow = data.doc_mean_embeddings().row(i);
    xd.insert(xd.end(), drow.begin(), drow.end());
    b.offsets.push_back(b.offsets.back() + d.sentences.size());
  }
  const std::size_t S = b.global_sentence.size();
  b.sentence_embeddings = Tensor::from_data(S, M, std::move(xs));
  b.doc_mean_embeddings = Tensor::from_data(docs.size(), M, std::move(xd));
  b.strategy2_scores = Tensor::from_data(S, 1, std::move(s2));
  return b;
}

Tensor Noise::draw(std::size_t rows, std::size_t cols) {
  Tensor n = Tensor::zeros(rows, cols);
  if (rng_) rng_->fill_normal(n.data_mut());
  return n;
}

// ---------------------------------------------------------------- forward and objective

Forward forward(Tape& t, const ModelParams& p, const HyperParams& hp, const ModelData& data, const Batch& batch,
                Noise& noise) {
  if (p.vocab_size() != data.corpus().vocab.size()) throw DimensionError("forward: vocabulary size mismatch");
  if (p.embed_dim() != data.embeddings().dim) throw DimensionError("forward: embedding dimension mismatch");
  Forward f;
  f.z_b = encode_internal(t, p, hp, batch.doc_counts);
  f.s_b = encode_internal(t, p, hp, batch.sentence_counts);
  f.s_e = encode_external(t, p, hp, batch.sentence_embeddings);

  const bool need_attention = hp.attention_doc_embedding() || hp.variant == Variant::kS1;
  if (need_attention) {
    std::vector<Tensor> scores, weights, docs;
    for (std::size_t b = 0; b + 1 < batch.offsets.size(); ++b) {
      Tensor xs = ad::slice_rows(t, batch.sentence_embeddings, batch.offsets[b], batch.offsets[b + 1]);
      AttentionOutput a = attention_doc_embedding(t, p, xs, hp.attention_normalizer);
      scores.push_back(a.scores);
      weights.push_back(a.weights);
      docs.push_back(a.doc_embedding);
    }
    f.attention_scores = ad::concat_rows(t, scores);
    f.attention_weights = ad::concat_rows(t, weights);
    if (hp.attention_doc_embedding()) f.x_doc = ad::concat_rows(t, docs);
  }
  if (!f.x_doc.defined()) f.x_doc = batch.doc_mean_embeddings;
  f.z_e = encode_external(t, p, hp, f.x_doc);
  f.phi_e = encode_external(t, p, hp, data.word_embeddings());

  const std::size_t K = p.topics();
  Tensor z_b = reparam_sample(t, f.z_b, noise.draw(batch.docs.size(), K));
  Tensor z_e = reparam_sample(t, f.z_e, noise.draw(batch.docs.size(), K));
  Tensor s_b = reparam_sample(t, f.s_b, noise.draw(batch.global_sentence.size(), K));
  Tensor s_e = reparam_sample(t, f.s_e, noise.draw(batch.global_sentence.size(), K));
  Tensor phi_e = reparam_sample(t, f.phi_e, noise.draw(p.vocab_size(), K));

  f.comb = combine(t, p.phi, phi_e, s_b, s_e, z_b, z_e, hp);
  f.doc_log_probs = decode_log_probs(t, f.comb.docs, f.comb.phi, p.decoder_bias);
  f.sentence_log_probs = decode_log_probs(t, f.comb.sentences, f.comb.phi, p.decoder_bias);
  return f;
}

ObjectiveTerms objective(Tape& t, const ModelParams& p, const HyperParams& hp, const ModelData& data,
                         const Batch& batch, Noise& noise, double word_scale) {
  Forward f = forward(t, p, hp, data, batch, noise);

  Tensor doc_ll = multinomial_loglik(t, batch.doc_counts, f.doc_log_probs);
  Tensor sent_ll = multinomial_loglik(t, batch.sentence_counts, f.sentence_log_probs);
  Tensor qd = q_doc(t, f.z_b, f.z_e, hp.beta0);

  SentenceKlInputs in;
  in.s_b = f.s_b;
  in.s_e = f.s_e;
  in.offsets = batch.offsets;
  if (hp.variant != Variant::kKL) {
    in.z_b = {ad::gather_rows(t, f.z_b.mean, batch.sentence_doc), ad::gather_rows(t, f.z_b.log_var, batch.sentence_doc)};
    in.z_e = {ad::gather_rows(t, f.z_e.mean, batch.sentence_doc), ad::gather_rows(t, f.z_e.log_var, batch.sentence_doc)};
  }
  if (hp.variant == Variant::kS1) {
    in.scores = hp.detach_attention_target ? ad::detach(*f.attention_scores) : *f.attention_scores;
    in.weights = *f.attention_weights;
  } else if (hp.variant == Variant::kS2) {
    in.scores = batch.strategy2_scores;
    if (hp.hard_weights) in.weights = segment_normalize(t, batch.strategy2_scores, batch.offsets, hp.attention_normalizer);
  }
  if (hp.variant == Variant::kS1 || hp.variant == Variant::kS2) {
    in.controls = ad::gather_rows(t, p.y_prime, batch.global_sentence);
  }
  Tensor qs = q_sent(t, in, hp);
  Tensor qw = q_word(t, p.phi, f.phi_e, hp, word_scale);

  Tensor loss = ad::scale(t, doc_ll, -1.0);
  loss = ad::sub(t, loss, ad::scale(t, sent_ll, hp.gamma4));
  loss = ad::add(t, loss, qs);
  loss = ad::add(t, loss, qd);
  loss = ad::add(t, loss, qw);

  ObjectiveTerms out;
  out.loss = loss;
  out.doc_ll = doc_ll.item();
  out.sent_ll = sent_ll.item();
  out.q_doc = qd.item();
  out.q_sent = qs.item();
  out.q_word = qw.item();
  return out;
}

}  // namespace nahtm::model
