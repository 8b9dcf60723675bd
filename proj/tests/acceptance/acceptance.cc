// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nahtm/cli.h"
#include "nahtm/eval.h"
#include "nahtm/model.h"
#include "nahtm/tensor.h"
#include "nahtm/trainer.h"
#include "oracles.h"

using namespace nahtm;
namespace fs = std::filesystem;
namespace k = nahtm::ad::kernels;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::size_t> all_docs(const corpus::BowCorpus& c) {
  std::vector<std::size_t> d(c.num_docs());
  std::iota(d.begin(), d.end(), 0);
  return d;
}

// ------------------------------------------------------------------ gradients

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = testing::random_corpus(30, 8, 4, 6, 11);
  const auto emb = embeddings::synth_embeddings(c, 8, 11);
  const model::ModelData data(c, emb);
  const std::vector<std::size_t> docs = all_docs(c);
  const model::Batch batch = model::make_batch(data, docs);

  double worst = 0.0;
  std::string worst_name;
  for (model::Variant v : {model::Variant::kS1, model::Variant::kS2}) {
    model::HyperParams hp;
    hp.topics = 5;
    hp.hidden = 16;
    hp.variant = v;
    // Larger mixing weights than the defaults so every path carries signal.
    hp.gamma1 = 0.3;
    hp.gamma2 = 0.2;
    hp.gamma3 = 0.4;
    hp.gamma4 = 0.7;
    hp.lambda1 = 0.05;
    model::ModelParams p = model::ModelParams::init({30, 8, c.num_sentences()}, hp, 5);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 0.5);
    for (double& y : p.y_prime.data_mut()) y = n(rng);
    const auto loss = [&](ad::Tape& t) {
      model::Noise noise = model::Noise::zero();
      return model::objective(t, p, hp, data, batch, noise, 1.0).loss;  // one batch holds every document
    };
    for (const auto& g : testing::check_gradients(loss, p.trainable())) {
      if (!(g.rel_error <= worst)) {
        worst = g.rel_error;
        worst_name = std::string(model::to_string(v)) + ":" + g.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt("max relative error %.3g (%s), %.1fs", worst, worst_name.c_str(), secs)};
}

// ------------------------------------------------------------------ sparsemax

Outcome sparsemax_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(2, 16);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst_proj = 0.0, worst_jvp = 0.0;
  std::size_t jvp_checked = 0;
  const double h = 1e-6;
  for (int it = 0; it < 1000; ++it) {
    const std::size_t d = dim(rng);
    std::vector<double> x(d), p(d);
    for (double& v : x) v = n(rng);
    k::sparsemax(x, p);
    const auto ref = testing::brute_force_simplex_projection(x);
    for (std::size_t i = 0; i < d; ++i) worst_proj = std::max(worst_proj, std::abs(p[i] - ref[i]));

    // Threshold from the support; skip inputs within reach of a kink.
    double tau = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      if (p[i] > 0) {
        tau = x[i] - p[i];
        break;
      }
    }
    bool near_tie = false;
    for (std::size_t i = 0; i < d; ++i) near_tie |= std::abs(x[i] - tau) < 1e-3;
    if (near_tie) continue;

    std::vector<double> u(d);
    for (double& v : u) v = n(rng);
    // Tape path: the gradient of <u, sparsemax(x)> is J^T u = J u.
    ad::Tape t;
    const ad::Tensor xt = ad::Tensor::from_data(1, d, x, true);
    t.backward(ad::sum(t, ad::mul(t, ad::sparsemax_rows(t, xt), ad::Tensor::from_data(1, d, u))));
    std::vector<double> kj(d);
    k::sparsemax_jvp(p, u, kj);
    std::vector<double> xp = x, xm = x, pp(d), pm(d);
    for (std::size_t i = 0; i < d; ++i) {
      xp[i] += h * u[i];
      xm[i] -= h * u[i];
    }
    k::sparsemax(xp, pp);
    k::sparsemax(xm, pm);
    for (std::size_t i = 0; i < d; ++i) {
      const double fd = (pp[i] - pm[i]) / (2 * h);
      worst_jvp = std::max({worst_jvp, std::abs(fd - kj[i]), std::abs(fd - xt.grad()[i])});
    }
    ++jvp_checked;
  }
  return {worst_proj <= 1e-8 && worst_jvp < 1e-6 && jvp_checked > 500,
          fmt("projection max error %.3g over 1000 vectors; JVP max error %.3g over %zu tie-free vectors", worst_proj,
              worst_jvp, jvp_checked)};
}

// ------------------------------------------------------------------ KL

Outcome kl_properties() {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 1.5);
  ad::Tape t(ad::Tape::Mode::kInference);
  double min_kl = INFINITY, max_equal = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t K = 1 + i % 7;
    std::vector<double> mq(K), lq(K), mp(K), lp(K);
    for (std::size_t j = 0; j < K; ++j) {
      mq[j] = n(rng);
      lq[j] = n(rng);
      mp[j] = n(rng);
      lp[j] = n(rng);
    }
    const model::DiagGaussian q{ad::Tensor::from_data(1, K, mq), ad::Tensor::from_data(1, K, lq)};
    const model::DiagGaussian p{ad::Tensor::from_data(1, K, mp), ad::Tensor::from_data(1, K, lp)};
    min_kl = std::min(min_kl, model::kl_diag_gauss(t, q, p).item());
    max_equal = std::max(max_equal, std::abs(model::kl_diag_gauss(t, q, q).item()));
  }
  const double spot = model::kl_diag_gauss(t, {ad::Tensor::scalar(1.0), ad::Tensor::scalar(0.0)},
                                           {ad::Tensor::scalar(0.0), ad::Tensor::scalar(0.0)})
                          .item();
  return {min_kl >= 0.0 && max_equal <= 1e-12 && spot == 0.5,
          fmt("min KL %.3g over 1000 pairs; max |KL(q||q)| %.3g; KL(N(1,1)||N(0,1)) = %.17g", min_kl, max_equal,
              spot)};
}

// ------------------------------------------------------------------ perplexity

Outcome uniform_perplexity() {
  const auto c = testing::text_dir_corpus(fs::path(NAHTM_TEST_DATA) / "fixture");
  const auto emb = embeddings::synth_embeddings(c, 8, 1);
  const model::ModelData data(c, emb);
  model::HyperParams hp;
  hp.topics = 4;
  hp.hidden = 8;
  hp.gamma1 = hp.gamma2 = hp.gamma3 = 0.0;
  model::ModelParams p = model::ModelParams::init({c.vocab.size(), 8, c.num_sentences()}, hp, 1);
  std::fill(p.phi.data_mut().begin(), p.phi.data_mut().end(), 0.0);
  const double ppl = eval::perplexity(p, hp, data, all_docs(c), eval::Level::kDocument);
  const double V = static_cast<double>(c.vocab.size());
  return {std::abs(ppl - V) <= 1e-9, fmt("perplexity %.15g, V = %.0f, |diff| %.3g", ppl, V, std::abs(ppl - V))};
}

// ------------------------------------------------------------------ synthetic corpus

const testing::PlantedCorpus& planted() {
  static const testing::PlantedCorpus pc = testing::make_planted_corpus(testing::PlantedSpec{});
  return pc;
}

train::TrainConfig synthetic_config() {
  train::TrainConfig cfg;
  cfg.hyper.topics = 5;
  cfg.hyper.hidden = 64;
  cfg.learning_rate = 0.005;
  cfg.batch_size = 20;
  cfg.max_epochs = 200;
  cfg.patience = 20;
  cfg.seed = 42;
  return cfg;
}

Outcome topic_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& pc = planted();
  const auto emb = embeddings::synth_embeddings(pc.corpus, 16, 3);
  const model::ModelData data(pc.corpus, emb);
  train::TrainConfig cfg = synthetic_config();
  cfg.hyper.variant = model::Variant::kHKL;
  const model::ModelParams init =
      model::ModelParams::init({pc.corpus.vocab.size(), 16, pc.corpus.num_sentences()}, cfg.hyper,
                               derive_key({cfg.seed, 0x696e6974ULL}));
  const double before = testing::topic_recovery_score(eval::combined_topic_matrix(init, cfg.hyper, data), pc.topics);
  const train::TrainResult r = train::train_from(data, cfg, init.clone());
  const double after =
      testing::topic_recovery_score(eval::combined_topic_matrix(r.best.params, cfg.hyper, data), pc.topics);
  const double secs = seconds_since(t0);
  return {after >= 0.6 && after > before && secs < 600.0,
          fmt("matched cosine %.4f (untrained %.4f) after %zu epochs, best epoch %zu, %.1fs", after, before,
              r.history.size(), r.best_epoch, secs)};
}

Outcome hierarchical_kl_effect() {
  const auto& pc = planted();
  const auto emb = embeddings::synth_embeddings(pc.corpus, 16, 3);
  const model::ModelData data(pc.corpus, emb);
  const auto docs = pc.corpus.indices(corpus::Split::kTrain);
  double dist[2];
  for (int b = 0; b < 2; ++b) {
    train::TrainConfig cfg = synthetic_config();
    cfg.hyper.variant = model::Variant::kHKL;
    cfg.hyper.beta1 = b;
    cfg.max_epochs = 30;
    cfg.patience = cfg.max_epochs;
    const train::TrainResult r = train::train(data, cfg);
    dist[b] = eval::sentence_doc_distance(r.last, cfg.hyper, data, docs);
  }
  return {dist[1] <= dist[0], fmt("mean sentence-document distance %.5f with beta1=1, %.5f with beta1=0 (30 epochs)",
                                  dist[1], dist[0])};
}

Outcome variant_ordering() {
  const auto& pc = planted();
  const auto emb = testing::topic_correlated_embeddings(pc, 16, 0.5, 3);
  const model::ModelData data(pc.corpus, emb);
  auto median_for = [&](model::Variant v) {
    std::vector<double> ppl;
    for (std::uint64_t seed : {1, 2, 3}) {
      train::TrainConfig cfg = synthetic_config();
      cfg.hyper.variant = v;
      cfg.seed = seed;
      ppl.push_back(train::train(data, cfg).best_valid_perplexity);
    }
    std::sort(ppl.begin(), ppl.end());
    return ppl[1];
  };
  const double s2 = median_for(model::Variant::kS2);
  const double hkl = median_for(model::Variant::kHKL);
  const double kl = median_for(model::Variant::kKL);
  return {s2 <= kl, fmt("median validation perplexity S2 %.4f, HKL %.4f, KL %.4f (3 seeds)", s2, hkl, kl)};
}

// ------------------------------------------------------------------ NPMI

Outcome npmi_sanity() {
  // apple and banana always share a document; apple and egg never do.
  const std::vector<corpus::RawDocument> raw = {
      {"d1", "apple banana cherry"}, {"d2", "apple banana date"}, {"d3", "apple banana cherry date"},
      {"d4", "egg fig date"},        {"d5", "egg fig cherry"},
  };
  const auto c = corpus::build_corpus(raw, corpus::PreprocessOptions{});
  const auto ref = eval::NpmiReference::from_corpus(c, all_docs(c));
  const double together = ref.npmi("apple", "banana").value();
  const double never = ref.npmi("apple", "egg").value();
  bool in_range = true;
  for (std::size_t a = 0; a < c.vocab.size(); ++a) {
    for (std::size_t b = 0; b < c.vocab.size(); ++b) {
      const double v = ref.npmi(c.vocab.word(a), c.vocab.word(b)).value();
      in_range &= v >= -1.0 && v <= 1.0;
    }
  }
  return {std::abs(together - 1.0) <= 1e-9 && never < 0.0 && in_range,
          fmt("NPMI(apple, banana) = %.12f, NPMI(apple, egg) = %.6f, all pairs in range: %s", together, never,
              in_range ? "yes" : "no")};
}

// ------------------------------------------------------------------ determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nahtm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

Outcome determinism() {
  const fs::path root = fs::path(NAHTM_TEST_TMP) / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path corpus_dir = root / "corpus";
  if (cli({"build", "--input", (fs::path(NAHTM_TEST_DATA) / "fixture").string(), "--out", corpus_dir.string()}) != 0) {
    return {false, "corpus build failed"};
  }
  std::ofstream(root / "run.conf") << "corpus = \"" << corpus_dir.string() << "\"\n"
                                   << "topics = 4\nhidden = 16\nmax_epochs = 8\nbatch_size = 3\nseed = 5\n";
  for (const char* name : {"a", "b"}) {
    if (cli({"train", "--config", (root / "run.conf").string(), "--synth-embeddings", "8", "1", "--out",
             (root / name).string()}) != 0) {
      return {false, "training failed"};
    }
  }
  const bool hist = slurp(root / "a" / "history.csv") == slurp(root / "b" / "history.csv");
  const bool ckpt = slurp(root / "a" / "checkpoint.bin") == slurp(root / "b" / "checkpoint.bin");
  return {hist && ckpt, fmt("history identical: %s; checkpoint identical: %s (%zu bytes)", hist ? "yes" : "no",
                            ckpt ? "yes" : "no", static_cast<std::size_t>(fs::file_size(root / "a" / "checkpoint.bin")))};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-check", gradient_check},
      {"sparsemax-oracle", sparsemax_oracle},
      {"kl-properties", kl_properties},
      {"uniform-perplexity", uniform_perplexity},
      {"topic-recovery", topic_recovery},
      {"hierarchical-kl-effect", hierarchical_kl_effect},
      {"variant-ordering", variant_ordering},
      {"npmi-sanity", npmi_sanity},
      {"determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
