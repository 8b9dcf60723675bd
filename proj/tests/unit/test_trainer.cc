#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "nahtm/error.h"
#include "nahtm/trainer.h"
#include "oracles.h"

using namespace nahtm;
using namespace nahtm::train;
namespace fs = std::filesystem;

namespace {

struct Data {
  testing::PlantedCorpus pc;
  embeddings::EmbeddingSet emb;
  model::ModelData data;

  explicit Data(std::size_t docs = 60)
      : pc(make(docs)), emb(testing::topic_correlated_embeddings(pc, 8, 0.3, 5)), data(pc.corpus, emb) {}

  static testing::PlantedCorpus make(std::size_t docs) {
    testing::PlantedSpec s;
    s.docs = docs;
    s.vocab = 40;
    s.min_sentences = 3;
    s.max_sentences = 5;
    return testing::make_planted_corpus(s);
  }
};

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.hyper.topics = 5;
  cfg.hyper.hidden = 16;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 10;
  cfg.max_epochs = 12;
  cfg.patience = 100;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("adam leaves parameters alone on zero gradients but advances the step") {
  const auto x = ad::Tensor::from_data(1, 3, {1.0, -2.0, 3.0}, true);
  const std::vector<model::NamedTensor> params = {{"x", x}};
  AdamState s = AdamState::init(params);
  x.zero_grad();
  adam_step(params, s, 0.1);
  CHECK(s.step == 1);
  CHECK(x(0, 0) == 1.0);
  CHECK(x(0, 1) == -2.0);
  CHECK(x(0, 2) == 3.0);
}

TEST_CASE("first adam step moves each element by about lr against the gradient sign") {
  const auto x = ad::Tensor::from_data(1, 3, {0.0, 0.0, 0.0}, true);
  const std::vector<model::NamedTensor> params = {{"x", x}};
  AdamState s = AdamState::init(params);
  ad::Tape t;
  t.backward(ad::sum(t, ad::mul(t, x, ad::Tensor::from_data(1, 3, {2.0, -0.5, 1e-3}))));
  adam_step(params, s, 0.01);
  CHECK(x(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(x(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(x(0, 2) == doctest::Approx(-0.01).epsilon(1e-4));
}

TEST_CASE("adam rejects non-finite gradients naming the tensor") {
  const auto x = ad::Tensor::from_data(1, 1, {1.0}, true);
  const std::vector<model::NamedTensor> params = {{"phi", x}};
  AdamState s = AdamState::init(params);
  x.zero_grad();
  x.grad_mut()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(adam_step(params, s, 0.1), doctest::Contains("phi"), NumericError);
}

TEST_CASE("configuration keys") {
  TrainConfig cfg;
  apply_setting(cfg, "beta1", "0.25");
  apply_setting(cfg, "variant", "HKL");
  apply_setting(cfg, "batch_size", "7");
  apply_setting(cfg, "hard_weights", "true");
  CHECK(cfg.hyper.beta1 == 0.25);
  CHECK(cfg.hyper.variant == model::Variant::kHKL);
  CHECK(cfg.batch_size == 7);
  CHECK(cfg.hyper.hard_weights);
  CHECK_THROWS_WITH_AS(apply_setting(cfg, "betta1", "1"), doctest::Contains("betta1"), ConfigError);
  CHECK_THROWS_WITH_AS(apply_setting(cfg, "beta1", "abc"), doctest::Contains("beta1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(cfg, "batch_size", "-1"), ConfigError);
  TrainConfig copy;
  for (const auto& [k, v] : settings(cfg)) apply_setting(copy, k, v);
  CHECK(copy == cfg);
  CHECK(format_double(0.1) == "0.1");
}

TEST_CASE("history CSV round trip") {
  const fs::path d = fs::path(NAHTM_TEST_TMP);
  fs::create_directories(d);
  std::vector<EpochRecord> h = {{1, 10.5, -9.25, -3.0, 0.1, 0.2, 0.3, 44.0}, {2, 0.1, -1e-300, 1.0 / 3.0, 0, 0, 0, 1e10}};
  write_history_csv(h, d / "h.csv");
  CHECK(read_history_csv(d / "h.csv") == h);
}

TEST_CASE("patience 1 with a frozen model stops after two epochs") {
  Data d;
  TrainConfig cfg = small_config();
  cfg.learning_rate = 0.0;
  cfg.patience = 1;
  const TrainResult r = train::train(d.data, cfg);
  CHECK(r.history.size() == 2);
  CHECK(r.best_epoch == 1);
}

TEST_CASE("training is deterministic and improves validation perplexity") {
  Data d;
  const TrainConfig cfg = small_config();
  std::size_t calls = 0;
  const TrainResult a = train::train(d.data, cfg, [&](const EpochRecord&) { ++calls; });
  const TrainResult b = train::train(d.data, cfg);
  CHECK(calls == a.history.size());
  REQUIRE(a.history.size() == cfg.max_epochs);
  CHECK(a.history == b.history);
  const auto ta = a.best.params.all(), tb = b.best.params.all();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(std::equal(ta[i].tensor.data().begin(), ta[i].tensor.data().end(), tb[i].tensor.data().begin()));
  }
  CHECK(a.best_valid_perplexity < a.initial_valid_perplexity);
  CHECK(a.best_valid_perplexity <= a.history.back().valid_perplexity);
  CHECK(a.history[a.best_epoch - 1].valid_perplexity == a.best_valid_perplexity);
  for (const EpochRecord& e : a.history) {
    CHECK(std::isfinite(e.train_loss));
    CHECK(e.q_doc >= 0.0);
    CHECK(e.q_sent >= 0.0);
    CHECK(e.q_word >= 0.0);
    CHECK(e.doc_ll <= 0.0);
  }
  CHECK(a.best.metadata.at("seed") == "3");

  TrainConfig other = cfg;
  other.seed = 4;
  CHECK_FALSE(train::train(d.data, other).history == a.history);
}

TEST_CASE("every variant trains without numeric trouble") {
  Data d(30);
  for (const char* v : {"KL", "HKL", "S1", "S2"}) {
    TrainConfig cfg = small_config();
    cfg.max_epochs = 3;
    apply_setting(cfg, "variant", v);
    const TrainResult r = train::train(d.data, cfg);
    INFO(v);
    CHECK(std::isfinite(r.best_valid_perplexity));
  }
}

TEST_CASE("training needs training and validation documents") {
  const auto c = testing::random_corpus(10, 5, 2, 4, 1);
  const auto emb = embeddings::synth_embeddings(c, 4, 1);
  const model::ModelData data(c, emb);
  CHECK_THROWS_AS(train::train(data, small_config()), DataError);
}

TEST_CASE("grid search") {
  Data d(30);
  TrainConfig base = small_config();
  base.max_epochs = 3;

  SUBCASE("a singleton grid reproduces a plain training run") {
    const std::vector<GridAxis> grid = {{"beta1", {"0.5"}}};
    const GridResult g = grid_search(d.data, base, grid);
    REQUIRE(g.runs.size() == 1);
    TrainConfig cfg = base;
    cfg.hyper.beta1 = 0.5;
    CHECK(g.best() == cfg);
    CHECK(g.runs[0].valid_perplexity == train::train(d.data, cfg).best_valid_perplexity);
  }
  SUBCASE("the best run has the lowest validation perplexity and comes from the grid") {
    const std::vector<GridAxis> grid = {{"beta1", {"0", "0.01"}}, {"gamma4", {"1", "0.5"}}};
    const GridResult g = grid_search(d.data, base, grid, 2);
    REQUIRE(g.runs.size() == 4);
    CHECK(g.runs[1].config.hyper.beta1 == 0.0);
    CHECK(g.runs[1].config.hyper.gamma4 == 0.5);
    CHECK(g.runs[2].config.hyper.beta1 == 0.01);
    for (const GridRun& r : g.runs) CHECK(g.runs[g.best_index].valid_perplexity <= r.valid_perplexity);
    const double b1 = g.best().hyper.beta1;
    CHECK((b1 == 0.0 || b1 == 0.01));
    const GridResult serial = grid_search(d.data, base, grid, 1);
    CHECK(serial.best_index == g.best_index);
    for (std::size_t i = 0; i < 4; ++i) CHECK(serial.runs[i].valid_perplexity == g.runs[i].valid_perplexity);
  }
  SUBCASE("bad grids") {
    const std::vector<GridAxis> empty_values = {{"beta1", {}}};
    CHECK_THROWS_AS(grid_search(d.data, base, empty_values), ConfigError);
    const std::vector<GridAxis> bad_key = {{"nope", {"1"}}};
    CHECK_THROWS_AS(grid_search(d.data, base, bad_key), ConfigError);
  }
}
