#include "nahtm/cli.h"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "nahtm/checkpoint.h"
#include "nahtm/corpus.h"
#include "nahtm/embedding_store.h"
#include "nahtm/error.h"
#include "nahtm/eval.h"
#include "nahtm/run_config.h"
#include "nahtm/trainer.h"

namespace nahtm {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// A directory of .txt files (one document each, ordered by file name) or a
// JSONL file whose records carry "text" and optionally "id".
std::vector<corpus::RawDocument> read_raw_documents(const fs::path& input) {
  std::vector<corpus::RawDocument> docs;
  if (fs::is_directory(input)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(input)) {
      if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) docs.push_back({f.stem().string(), read_file(f)});
    return docs;
  }
  std::ifstream in(input);
  if (!in) throw DataError("cannot read " + input.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = input.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw ParseError(where + ": record needs a string field 'text'");
    }
    std::string id = std::to_string(lineno);
    if (j.contains("id")) id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    docs.push_back({id, j["text"].get<std::string>()});
  }
  return docs;
}

std::optional<SynthEmbeddingSpec> parse_synth_provenance(const std::string& provenance) {
  SynthEmbeddingSpec s;
  if (std::sscanf(provenance.c_str(), "synthetic:dim=%zu,seed=%lu", &s.dim, &s.seed) == 2) return s;
  return std::nullopt;
}

embeddings::EmbeddingSet resolve_embeddings(const corpus::BowCorpus& c, const std::optional<SynthEmbeddingSpec>& synth,
                                            const fs::path& dir) {
  if (synth) return embeddings::synth_embeddings(c, synth->dim, synth->seed);
  if (dir.empty()) {
    throw DataError("no embeddings given: set 'embeddings' to an embedding directory or pass --synth-embeddings M SEED");
  }
  return embeddings::load_embeddings(dir, c);
}

void print_summary(std::ostream& out, const corpus::BowCorpus& c) {
  const corpus::CorpusSummary s = corpus::summarize(c);
  out << "documents: " << s.num_docs << "\n"
      << "vocabulary: " << s.vocab_size << "\n"
      << "sentences: " << s.num_sentences << "\n"
      << "avg_doc_length: " << std::fixed << std::setprecision(2) << s.avg_doc_length << "\n"
      << "train/valid/test: " << c.indices(corpus::Split::kTrain).size() << "/"
      << c.indices(corpus::Split::kValid).size() << "/" << c.indices(corpus::Split::kTest).size() << "\n";
  out.unsetf(std::ios::floatfield);
}

void check_consistency(const Checkpoint& ckpt, const corpus::BowCorpus& c, const embeddings::EmbeddingSet& emb) {
  if (ckpt.params.vocab_size() != c.vocab.size()) {
    throw AlignmentError("checkpoint", "vocabulary size " + std::to_string(ckpt.params.vocab_size()) +
                                           " does not match corpus V=" + std::to_string(c.vocab.size()));
  }
  if (ckpt.params.num_sentences() != c.num_sentences()) {
    throw AlignmentError("checkpoint", "sentence count " + std::to_string(ckpt.params.num_sentences()) +
                                           " does not match corpus (" + std::to_string(c.num_sentences()) + ")");
  }
  if (ckpt.params.embed_dim() != emb.dim) {
    throw AlignmentError("checkpoint", "embedding dimension " + std::to_string(ckpt.params.embed_dim()) +
                                           " does not match embeddings M=" + std::to_string(emb.dim));
  }
}

void write_grid_csv(const fs::path& path, const train::GridResult& g, std::span<const train::GridAxis> axes) {
  std::ostringstream out;
  out << "index";
  for (const auto& a : axes) out << ',' << a.key;
  out << ",valid_perplexity\n";
  for (std::size_t r = 0; r < g.runs.size(); ++r) {
    const auto all = train::settings(g.runs[r].config);
    out << r;
    for (const auto& a : axes) {
      auto it = std::find_if(all.begin(), all.end(), [&](const auto& kv) { return kv.first == a.key; });
      out << ',' << (it == all.end() ? "" : it->second);
    }
    out << ',' << train::format_double(g.runs[r].valid_perplexity) << '\n';
  }
  write_file(path, out.str());
}

struct SetOverrides {
  std::vector<std::string> pairs;

  void apply(RunConfig& cfg) const {
    for (const auto& kv : pairs) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-aware hierarchical neural topic model"};
  app.require_subcommand(1);

  // build
  auto* build = app.add_subcommand("build", "Build a corpus directory from raw text");
  fs::path build_input, build_out, build_config;
  std::vector<std::string> build_set;
  build->add_option("--input", build_input, "Directory of .txt files or a JSONL file")->required();
  build->add_option("--out", build_out, "Output corpus directory")->required();
  build->add_option("--config", build_config, "Config file supplying preprocessing keys");
  build->add_option("--set", build_set, "Override a config key (key=value)");

  // synth-embed
  auto* synth = app.add_subcommand("synth-embed", "Write deterministic synthetic embeddings for a corpus");
  fs::path synth_corpus, synth_out;
  std::size_t synth_dim = 0;
  std::uint64_t synth_seed = 0;
  synth->add_option("--corpus", synth_corpus)->required();
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--dim", synth_dim)->required();
  synth->add_option("--seed", synth_seed)->required();

  // train
  auto* trn = app.add_subcommand("train", "Train a model");
  fs::path train_config, train_out;
  std::string train_variant;
  std::vector<std::uint64_t> train_synth;
  std::vector<std::string> train_set;
  trn->add_option("--config", train_config)->required();
  trn->add_option("--variant", train_variant, "KL, HKL, S1 or S2");
  trn->add_option("--synth-embeddings", train_synth, "Use synthetic embeddings: DIM SEED")->expected(2);
  trn->add_option("--out", train_out, "Output directory (overrides 'output')");
  trn->add_option("--set", train_set, "Override a config key (key=value)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  fs::path eval_ckpt, eval_corpus, eval_emb, eval_ref, eval_out, eval_history, eval_plot;
  std::vector<std::uint64_t> eval_synth;
  std::string eval_split = "test";
  std::size_t eval_top = 10;
  ev->add_option("--checkpoint", eval_ckpt)->required();
  ev->add_option("--corpus", eval_corpus)->required();
  ev->add_option("--embeddings", eval_emb);
  ev->add_option("--synth-embeddings", eval_synth, "DIM SEED")->expected(2);
  ev->add_option("--reference", eval_ref, "Corpus directory for external NPMI");
  ev->add_option("--split", eval_split, "train, valid or test");
  ev->add_option("--top", eval_top, "Words per topic");
  ev->add_option("--out", eval_out)->required();
  ev->add_option("--history", eval_history, "Training history CSV to plot");
  ev->add_option("--plot", eval_plot, "SVG output for the history plot");

  // grid
  auto* grid = app.add_subcommand("grid", "Grid search over configuration values");
  fs::path grid_config, grid_out;
  std::vector<std::string> grid_axes, grid_set;
  std::vector<std::uint64_t> grid_synth;
  std::size_t grid_jobs = 1;
  grid->add_option("--config", grid_config)->required();
  grid->add_option("--grid", grid_axes, "key=v1,v2,...")->required();
  grid->add_option("--synth-embeddings", grid_synth, "DIM SEED")->expected(2);
  grid->add_option("--jobs", grid_jobs);
  grid->add_option("--out", grid_out);
  grid->add_option("--set", grid_set);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*build) {
      RunConfig cfg = build_config.empty() ? RunConfig{} : load_run_config(build_config);
      SetOverrides{build_set}.apply(cfg);
      apply_seed_override(cfg);
      cfg.validate();
      const auto raw = read_raw_documents(build_input);
      if (raw.empty()) throw DataError("empty corpus: no documents found in " + build_input.string());
      corpus::BowCorpus c = corpus::build_corpus(raw, cfg.preprocess);
      c = corpus::split_corpus(std::move(c), cfg.split_ratios, cfg.split_seed);
      corpus::save_corpus(c, build_out);
      print_summary(out, c);
    } else if (*synth) {
      const corpus::BowCorpus c = corpus::load_corpus(synth_corpus);
      embeddings::save_embeddings(embeddings::synth_embeddings(c, synth_dim, synth_seed), synth_out);
      out << "wrote " << synth_out.string() << "\n";
    } else if (*trn) {
      RunConfig cfg = load_run_config(train_config);
      SetOverrides{train_set}.apply(cfg);
      if (!train_variant.empty()) cfg.set("variant", train_variant);
      if (!train_synth.empty()) cfg.synth_embeddings = SynthEmbeddingSpec{train_synth[0], train_synth[1]};
      if (!train_out.empty()) cfg.output_dir = train_out;
      apply_seed_override(cfg);
      cfg.validate();
      if (cfg.corpus_dir.empty()) throw ConfigError("corpus: no corpus directory configured");
      if (cfg.output_dir.empty()) throw ConfigError("output: no output directory configured");

      const corpus::BowCorpus c = corpus::load_corpus(cfg.corpus_dir);
      const embeddings::EmbeddingSet emb = resolve_embeddings(c, cfg.synth_embeddings, cfg.embeddings_dir);
      const model::ModelData data(c, emb);
      fs::create_directories(cfg.output_dir);
      save_run_config(cfg, cfg.output_dir / "config.snapshot");

      train::TrainResult res = train::train(data, cfg.train, [&](const train::EpochRecord& r) {
        out << "epoch " << r.epoch << " loss " << r.train_loss << " valid_ppl " << r.valid_perplexity << "\n";
      });
      if (!cfg.synth_embeddings) res.best.metadata["embeddings_dir"] = fs::absolute(cfg.embeddings_dir).string();
      res.best.metadata["corpus_checksum"] = corpus::corpus_checksum(c);
      save_checkpoint(res.best, cfg.output_dir / "checkpoint.bin");
      train::write_history_csv(res.history, cfg.output_dir / "history.csv");
      out << "best epoch " << res.best_epoch << " valid_ppl " << res.best_valid_perplexity << "\n";
    } else if (*ev) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const corpus::BowCorpus c = corpus::load_corpus(eval_corpus);
      std::optional<SynthEmbeddingSpec> spec;
      if (!eval_synth.empty()) spec = SynthEmbeddingSpec{eval_synth[0], eval_synth[1]};
      fs::path emb_dir = eval_emb;
      if (!spec && emb_dir.empty()) {
        // Fall back to the embeddings recorded at training time.
        auto prov = ckpt.metadata.find("embeddings");
        if (prov != ckpt.metadata.end()) spec = parse_synth_provenance(prov->second);
        auto dir = ckpt.metadata.find("embeddings_dir");
        if (!spec && dir != ckpt.metadata.end()) emb_dir = dir->second;
      }
      const embeddings::EmbeddingSet emb = resolve_embeddings(c, spec, emb_dir);
      check_consistency(ckpt, c, emb);
      const model::ModelData data(c, emb);
      std::optional<corpus::BowCorpus> reference;
      if (!eval_ref.empty()) reference = corpus::load_corpus(eval_ref);
      const eval::Metrics m = eval::evaluate(ckpt.params, ckpt.hyper, data, corpus::parse_split(eval_split),
                                             reference ? &*reference : nullptr, eval_top);
      write_file(eval_out / "metrics.json", m.to_json().dump(2) + "\n");
      write_file(eval_out / "topics.txt", m.topic_report());
      if (!eval_history.empty()) {
        const auto hist = train::read_history_csv(eval_history);
        std::vector<double> xs, ys;
        for (const auto& r : hist) {
          xs.push_back(static_cast<double>(r.epoch));
          ys.push_back(r.valid_perplexity);
        }
        write_file(eval_plot.empty() ? eval_out / "perplexity.svg" : eval_plot, eval::perplexity_svg(xs, ys));
      }
      out << "doc_perplexity " << m.doc_perplexity << "\nsent_perplexity " << m.sent_perplexity << "\n";
      out << m.topic_report();
    } else if (*grid) {
      RunConfig cfg = load_run_config(grid_config);
      SetOverrides{grid_set}.apply(cfg);
      if (!grid_synth.empty()) cfg.synth_embeddings = SynthEmbeddingSpec{grid_synth[0], grid_synth[1]};
      if (!grid_out.empty()) cfg.output_dir = grid_out;
      apply_seed_override(cfg);
      cfg.validate();
      std::vector<train::GridAxis> axes;
      for (const auto& spec : grid_axes) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw ConfigError("--grid expects key=v1,v2,..., got '" + spec + "'");
        train::GridAxis axis{spec.substr(0, eq), {}};
        std::stringstream ss(spec.substr(eq + 1));
        for (std::string v; std::getline(ss, v, ',');) axis.values.push_back(v);
        axes.push_back(std::move(axis));
      }
      const corpus::BowCorpus c = corpus::load_corpus(cfg.corpus_dir);
      const embeddings::EmbeddingSet emb = resolve_embeddings(c, cfg.synth_embeddings, cfg.embeddings_dir);
      const model::ModelData data(c, emb);
      const train::GridResult g = train::grid_search(data, cfg.train, axes, grid_jobs);
      RunConfig best = cfg;
      best.train = g.best();
      if (!cfg.output_dir.empty()) {
        write_grid_csv(cfg.output_dir / "grid.csv", g, axes);
        save_run_config(best, cfg.output_dir / "best.conf");
      }
      out << "best index " << g.best_index << " valid_ppl " << g.runs[g.best_index].valid_perplexity << "\n";
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DimensionError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace nahtm
