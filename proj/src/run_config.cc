#include "nahtm/run_config.h"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "nahtm/error.h"

namespace nahtm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  return v;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string unquote(const std::string& raw, const std::string& where) {
  if (raw.empty() || raw.front() != '"') return raw;
  if (raw.size() < 2 || raw.back() != '"') throw ConfigError(where + ": unterminated string");
  std::string out;
  for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
    if (raw[i] == '\\' && i + 2 < raw.size()) ++i;
    out += raw[i];
  }
  return out;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "corpus") {
    corpus_dir = value;
  } else if (key == "embeddings") {
    embeddings_dir = value;
  } else if (key == "output") {
    output_dir = value;
  } else if (key == "reference") {
    reference_dir = value;
  } else if (key == "synth_embeddings") {
    // "M SEED", or empty to disable.
    if (value.empty()) {
      synth_embeddings.reset();
      return;
    }
    std::istringstream in(value);
    std::string m, s, extra;
    if (!(in >> m >> s) || (in >> extra)) throw ConfigError(key + ": expected 'DIM SEED', got '" + value + "'");
    synth_embeddings = SynthEmbeddingSpec{to_uint(key, m), to_uint(key, s)};
  } else if (key == "max_vocab") {
    preprocess.max_vocab = to_uint(key, value);
  } else if (key == "max_sentences") {
    preprocess.max_sentences = to_uint(key, value);
  } else if (key == "remove_stopwords") {
    preprocess.remove_stopwords = to_bool(key, value);
  } else if (key == "stem") {
    preprocess.stem = to_bool(key, value);
  } else if (key == "min_token_length") {
    preprocess.min_token_length = to_uint(key, value);
  } else if (key == "cap_document_bow") {
    preprocess.cap_document_bow = to_bool(key, value);
  } else if (key == "split") {
    std::array<double, 3> r{};
    std::istringstream in(value);
    std::string part;
    std::size_t n = 0;
    while (std::getline(in, part, ',')) {
      part = trim(part);
      if (n == 3) throw ConfigError(key + ": expected three comma-separated ratios");
      auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), r[n]);
      if (ec != std::errc() || ptr != part.data() + part.size()) throw ConfigError(key + ": bad ratio '" + part + "'");
      ++n;
    }
    if (n != 3) throw ConfigError(key + ": expected three comma-separated ratios");
    split_ratios = r;
  } else if (key == "split_seed") {
    split_seed = to_uint(key, value);
  } else {
    train::apply_setting(train, key, value);
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "# paths\n";
  out << "corpus = " << quote(corpus_dir.string()) << '\n';
  out << "embeddings = " << quote(embeddings_dir.string()) << '\n';
  out << "output = " << quote(output_dir.string()) << '\n';
  out << "reference = " << quote(reference_dir.string()) << '\n';
  out << "synth_embeddings = "
      << quote(synth_embeddings ? std::to_string(synth_embeddings->dim) + " " + std::to_string(synth_embeddings->seed)
                                : "")
      << '\n';
  out << "\n# preprocessing\n";
  out << "max_vocab = " << preprocess.max_vocab << '\n';
  out << "max_sentences = " << preprocess.max_sentences << '\n';
  out << "remove_stopwords = " << (preprocess.remove_stopwords ? "true" : "false") << '\n';
  out << "stem = " << (preprocess.stem ? "true" : "false") << '\n';
  out << "min_token_length = " << preprocess.min_token_length << '\n';
  out << "cap_document_bow = " << (preprocess.cap_document_bow ? "true" : "false") << '\n';
  out << "split = " << quote(train::format_double(split_ratios[0]) + "," + train::format_double(split_ratios[1]) +
                             "," + train::format_double(split_ratios[2]))
      << '\n';
  out << "split_seed = " << split_seed << '\n';
  out << "\n# model and training\n";
  for (const auto& [k, v] : train::settings(train)) out << k << " = " << v << '\n';
  return out.str();
}

void RunConfig::validate() const {
  train.validate();
  if (preprocess.max_vocab < 1) throw ConfigError("max_vocab must be >= 1");
  if (preprocess.max_sentences < 1) throw ConfigError("max_sentences must be >= 1");
  if (synth_embeddings && synth_embeddings->dim < 1) throw ConfigError("synth_embeddings: dimension must be >= 1");
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    // A '#' inside a quoted value is kept.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = unquote(trim(line.substr(eq + 1)), where);
    if (key.empty()) throw ConfigError(where + ": missing key");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << cfg.to_text();
}

void apply_seed_override(RunConfig& cfg) {
  if (const char* s = std::getenv("NAHTM_SEED"); s != nullptr && *s != '\0') {
    cfg.train.seed = to_uint("NAHTM_SEED", s);
  }
}

}  // namespace nahtm
