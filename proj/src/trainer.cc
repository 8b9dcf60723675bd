#include "nahtm/trainer.h"

#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "nahtm/error.h"
#include "nahtm/eval.h"
#include "nahtm/rng.h"

namespace nahtm::train {

namespace {

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

template <typename F>
auto with_key(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(key + ":", 0) == 0) throw;
    throw ConfigError(key + ": " + msg);
  }
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void TrainConfig::validate() const {
  hyper.validate();
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  model::HyperParams& h = cfg.hyper;
  with_key(key, [&] {
    if (key == "gamma1") h.gamma1 = parse_double(key, value);
    else if (key == "gamma2") h.gamma2 = parse_double(key, value);
    else if (key == "gamma3") h.gamma3 = parse_double(key, value);
    else if (key == "gamma4") h.gamma4 = parse_double(key, value);
    else if (key == "beta0") h.beta0 = parse_double(key, value);
    else if (key == "beta1") h.beta1 = parse_double(key, value);
    else if (key == "beta2") h.beta2 = parse_double(key, value);
    else if (key == "lambda0") h.lambda0 = parse_double(key, value);
    else if (key == "lambda1") h.lambda1 = parse_double(key, value);
    else if (key == "topics") h.topics = parse_uint(key, value);
    else if (key == "hidden") h.hidden = parse_uint(key, value);
    else if (key == "hidden_layers") h.hidden_layers = parse_uint(key, value);
    else if (key == "variant") h.variant = model::parse_variant(value);
    else if (key == "attention_normalizer") h.attention_normalizer = model::parse_normalizer(value);
    else if (key == "hard_weights") h.hard_weights = parse_bool(key, value);
    else if (key == "doc_embedding") h.doc_embedding = model::parse_doc_embedding_source(value);
    else if (key == "activation") h.activation = model::parse_activation(value);
    else if (key == "detach_doc_posterior") h.detach_doc_posterior = parse_bool(key, value);
    else if (key == "detach_attention_target") h.detach_attention_target = parse_bool(key, value);
    else if (key == "decoder_bias") h.decoder_bias = parse_bool(key, value);
    else if (key == "learning_rate") cfg.learning_rate = parse_double(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_uint(key, value);
    else if (key == "max_epochs") cfg.max_epochs = parse_uint(key, value);
    else if (key == "patience") cfg.patience = parse_uint(key, value);
    else if (key == "seed") cfg.seed = parse_uint(key, value);
    else throw ConfigError("unknown configuration key '" + key + "'");
  });
}

std::vector<std::pair<std::string, std::string>> settings(const TrainConfig& cfg) {
  const model::HyperParams& h = cfg.hyper;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"variant", std::string(model::to_string(h.variant))},
      {"topics", std::to_string(h.topics)},
      {"hidden", std::to_string(h.hidden)},
      {"hidden_layers", std::to_string(h.hidden_layers)},
      {"gamma1", format_double(h.gamma1)},
      {"gamma2", format_double(h.gamma2)},
      {"gamma3", format_double(h.gamma3)},
      {"gamma4", format_double(h.gamma4)},
      {"beta0", format_double(h.beta0)},
      {"beta1", format_double(h.beta1)},
      {"beta2", format_double(h.beta2)},
      {"lambda0", format_double(h.lambda0)},
      {"lambda1", format_double(h.lambda1)},
      {"attention_normalizer", std::string(model::to_string(h.attention_normalizer))},
      {"hard_weights", b(h.hard_weights)},
      {"doc_embedding", std::string(model::to_string(h.doc_embedding))},
      {"activation", std::string(model::to_string(h.activation))},
      {"detach_doc_posterior", b(h.detach_doc_posterior)},
      {"detach_attention_target", b(h.detach_attention_target)},
      {"decoder_bias", b(h.decoder_bias)},
      {"learning_rate", format_double(cfg.learning_rate)},
      {"batch_size", std::to_string(cfg.batch_size)},
      {"max_epochs", std::to_string(cfg.max_epochs)},
      {"patience", std::to_string(cfg.patience)},
      {"seed", std::to_string(cfg.seed)},
  };
}

// ---------------------------------------------------------------- Adam

AdamState AdamState::init(std::span<const model::NamedTensor> params) {
  AdamState s;
  for (const auto& nt : params) {
    s.m.emplace_back(nt.tensor.size(), 0.0);
    s.v.emplace_back(nt.tensor.size(), 0.0);
  }
  return s;
}

void adam_step(std::span<const model::NamedTensor> params, AdamState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].tensor.grad();
    if (g.size() != state.m[i].size()) throw DimensionError("adam_step: moment shape mismatch for " + params[i].name);
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k])) {
        throw NumericError("non-finite gradient in tensor '" + params[i].name + "' at element " + std::to_string(k));
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].tensor.grad();
    auto w = params[i].tensor.data_mut();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------- history

namespace {
constexpr const char* kHistoryHeader = "epoch,train_loss,doc_ll,sent_ll,q_doc,q_sent,q_word,valid_perplexity";
}

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << kHistoryHeader << '\n';
  for (const auto& r : history) {
    out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.doc_ll) << ','
        << format_double(r.sent_ll) << ',' << format_double(r.q_doc) << ',' << format_double(r.q_sent) << ','
        << format_double(r.q_word) << ',' << format_double(r.valid_perplexity) << '\n';
  }
}

std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kHistoryHeader) throw ParseError(path.string() + ":1: unexpected header");
  std::vector<EpochRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 8 fields");
    try {
      EpochRecord r;
      r.epoch = parse_uint("epoch", f[0]);
      r.train_loss = parse_double("train_loss", f[1]);
      r.doc_ll = parse_double("doc_ll", f[2]);
      r.sent_ll = parse_double("sent_ll", f[3]);
      r.q_doc = parse_double("q_doc", f[4]);
      r.q_sent = parse_double("q_sent", f[5]);
      r.q_word = parse_double("q_word", f[6]);
      r.valid_perplexity = parse_double("valid_perplexity", f[7]);
      out.push_back(r);
    } catch (const ConfigError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

TrainResult train(const model::ModelData& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const corpus::BowCorpus& c = data.corpus();
  const model::ModelDims dims{c.vocab.size(), data.embeddings().dim, c.num_sentences()};
  std::optional<std::vector<double>> bias;
  if (cfg.hyper.decoder_bias) bias = model::background_log_frequencies(c, c.indices(corpus::Split::kTrain));
  return train_from(data, cfg, model::ModelParams::init(dims, cfg.hyper, cfg.seed, std::move(bias)), on_epoch);
}

TrainResult train_from(const model::ModelData& data, const TrainConfig& cfg, model::ModelParams params,
                       const EpochCallback& on_epoch) {
  cfg.validate();
  const corpus::BowCorpus& c = data.corpus();
  std::vector<std::size_t> train_docs = c.indices(corpus::Split::kTrain);
  const std::vector<std::size_t> valid_docs = c.indices(corpus::Split::kValid);
  if (train_docs.empty()) throw DataError("train: the training split is empty");
  if (valid_docs.empty()) throw DataError("train: the validation split is empty");

  const std::vector<model::NamedTensor> trainable = params.trainable();
  AdamState adam = AdamState::init(trainable);
  const double n_train = static_cast<double>(train_docs.size());

  TrainResult result;
  result.initial_valid_perplexity = eval::perplexity(params, cfg.hyper, data, valid_docs, eval::Level::kDocument);
  result.best_valid_perplexity = std::numeric_limits<double>::infinity();
  result.best.hyper = cfg.hyper;
  result.best.metadata["embeddings"] = data.embeddings().provenance;
  result.best.metadata["seed"] = std::to_string(cfg.seed);

  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    CounterRng shuffle(derive_key({cfg.seed, epoch, 0x73687566666c65ULL}));
    for (std::size_t i = train_docs.size(); i > 1; --i) {
      std::swap(train_docs[i - 1], train_docs[shuffle.below(i)]);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < train_docs.size(); start += cfg.batch_size, ++batch_index) {
      const std::span<const std::size_t> docs(train_docs.data() + start,
                                              std::min(cfg.batch_size, train_docs.size() - start));
      const model::Batch batch = model::make_batch(data, docs);
      model::Noise noise = model::Noise::gaussian(derive_key({cfg.seed, epoch, batch_index, 0x6e6f697365ULL}));
      params.zero_grad();
      ad::Tape tape;
      const model::ObjectiveTerms terms =
          model::objective(tape, params, cfg.hyper, data, batch, noise, static_cast<double>(docs.size()) / n_train);
      const double loss = terms.loss.item();
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(terms.loss);
      adam_step(trainable, adam, cfg.learning_rate);

      rec.train_loss += loss;
      rec.doc_ll += terms.doc_ll;
      rec.sent_ll += terms.sent_ll;
      rec.q_doc += terms.q_doc;
      rec.q_sent += terms.q_sent;
      rec.q_word += terms.q_word;
    }
    rec.train_loss /= n_train;
    rec.doc_ll /= n_train;
    rec.sent_ll /= n_train;
    rec.q_doc /= n_train;
    rec.q_sent /= n_train;
    rec.q_word /= n_train;
    rec.valid_perplexity = eval::perplexity(params, cfg.hyper, data, valid_docs, eval::Level::kDocument);
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.valid_perplexity < result.best_valid_perplexity) {
      result.best_valid_perplexity = rec.valid_perplexity;
      result.best_epoch = epoch;
      result.best.params = params.clone();
      result.best.epoch = epoch;
      result.best.step = adam.step;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  result.last = std::move(params);
  return result;
}

// ---------------------------------------------------------------- grid search

GridResult grid_search(const model::ModelData& data, const TrainConfig& base, std::span<const GridAxis> grid,
                       std::size_t jobs) {
  if (grid.empty()) throw ConfigError("grid_search: empty grid");
  std::size_t total = 1;
  for (const auto& axis : grid) {
    if (axis.values.empty()) throw ConfigError("grid_search: no values for '" + axis.key + "'");
    total *= axis.values.size();
  }

  GridResult result;
  result.runs.resize(total);
  for (std::size_t r = 0; r < total; ++r) {
    TrainConfig cfg = base;
    std::size_t rem = r;
    for (std::size_t a = grid.size(); a-- > 0;) {
      const auto& axis = grid[a];
      apply_setting(cfg, axis.key, axis.values[rem % axis.values.size()]);
      rem /= axis.values.size();
    }
    cfg.validate();
    result.runs[r].config = cfg;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t r; (r = next.fetch_add(1)) < total;) {
      try {
        result.runs[r].valid_perplexity = train(data, result.runs[r].config).best_valid_perplexity;
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, total));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t r = 1; r < total; ++r) {
    if (result.runs[r].valid_perplexity < result.runs[result.best_index].valid_perplexity) result.best_index = r;
  }
  return result;
}

}  // namespace nahtm::train
